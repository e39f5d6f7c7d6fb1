"""Per-head branch gating, hard dispatch and soft mixing of the three branches."""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass

import torch

from .coreset import BucketGeometry, _gather_rows, bcs_plan, unpool_scatter
from .counters import MacCounter
from .errors import ContractError, FormatError
from .reference import qk_scale, sdpa, softmax
from .sliding import TileGeometry, sliding_plan, sliding_tile_attention
from .grid import VideoGrid


class Branch(enum.IntEnum):
    FULL = 0
    SLIDING = 1
    CORESET = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, s: str) -> "Branch":
        try:
            return cls[s.strip().upper()]
        except KeyError:
            raise FormatError(f"unknown branch {s!r}") from None


def compute_gates(temb: torch.Tensor, w_router: torch.Tensor) -> torch.Tensor:
    """Gate values ``softmax(T W)`` per head: ``(..., d) x (d, 3*heads) -> (..., heads, 3)``."""
    if w_router.ndim != 2 or w_router.shape[1] % 3:
        raise ContractError(f"router weights must be (d, 3*heads), got {tuple(w_router.shape)}")
    if temb.shape[-1] != w_router.shape[0]:
        raise ContractError(f"embedding width {temb.shape[-1]} != router input {w_router.shape[0]}")
    logits = temb @ w_router
    return softmax(logits.reshape(*logits.shape[:-1], -1, 3))


def route_hard(alpha: torch.Tensor) -> torch.Tensor:
    """Sliding or coreset only when strictly largest; everything else is full."""
    a1, a2, a3 = alpha[..., 0], alpha[..., 1], alpha[..., 2]
    out = torch.full(a1.shape, int(Branch.FULL), dtype=torch.long)
    out[(a2 > a1) & (a2 > a3)] = int(Branch.SLIDING)
    out[(a3 > a1) & (a3 > a2)] = int(Branch.CORESET)
    return out


@dataclass(frozen=True)
class BranchGeometry:
    grid: VideoGrid
    tile: TileGeometry
    bucket: BucketGeometry

    def validate(self) -> None:
        self.tile.validate(self.grid)
        self.bucket.validate(self.grid)


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    *lead, L, d = x.shape
    return x.reshape(*lead, L, heads, d // heads).transpose(-2, -3)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    *lead, heads, L, dh = x.shape
    return x.transpose(-2, -3).reshape(*lead, L, heads * dh)


def _head_cols(w: torch.Tensor, heads_idx, dh: int, heads: int) -> torch.Tensor:
    if len(heads_idx) == heads:
        return w
    cols = torch.cat([torch.arange(h * dh, (h + 1) * dh) for h in heads_idx])
    return w[:, cols]


def branch_outputs(xn, wq, wk, wv, heads: int, geo: BranchGeometry, scale_qk: bool = True,
                   counter: MacCounter | None = None):
    """All three branch outputs per head, each ``(..., heads, L, dh)``."""
    L, d = xn.shape[-2:]
    dh = d // heads
    scale = qk_scale(dh, scale_qk)
    q, k, v = (_split_heads(xn @ w, heads) for w in (wq, wk, wv))
    full = sdpa(q, k, v, scale)
    sliding = sliding_tile_attention(q, k, v, sliding_plan(geo.grid, geo.tile), scale)
    plan = bcs_plan(xn, geo.grid, geo.bucket)
    xc = _gather_rows(xn, plan.core_index)
    qc, kc, vc = (_split_heads(xc @ w, heads) for w in (wq, wk, wv))
    core = unpool_scatter(sdpa(qc, kc, vc, scale), _HeadPlan(plan))
    if counter is not None:
        n = math.prod(xn.shape[:-2])
        lc = plan.core_length
        counter.add("attention", n * (2 * L * L * d + 2 * lc * lc * d))
        counter.add("attention", n * sliding_plan(geo.grid, geo.tile).active_blocks
                    * geo.tile.tile_tokens ** 2 * 2 * d)
        counter.add("projection", n * 3 * (L + lc) * d * d)
        counter.add("similarity", n * plan.similarity_evals * d)
    return full, sliding, core


class _HeadPlan:
    """View of a plan whose index tensors broadcast over a head axis."""

    def __init__(self, plan):
        self.core_index = plan.core_index.unsqueeze(-2)
        self.source = plan.source.unsqueeze(-2)
        self.core_length = plan.core_length


def mixed_attention_soft(xn, wq, wk, wv, heads: int, geo: BranchGeometry, alpha: torch.Tensor,
                         scale_qk: bool = True, counter: MacCounter | None = None) -> torch.Tensor:
    """Gate-weighted sum of the three branches per head; returns ``(..., L, d)``."""
    full, sliding, core = branch_outputs(xn, wq, wk, wv, heads, geo, scale_qk, counter)
    a = alpha.unsqueeze(-1).unsqueeze(-1)
    out = a[..., 0, :, :] * full + a[..., 1, :, :] * sliding + a[..., 2, :, :] * core
    return _merge_heads(out)


def mixed_attention_hard(xn, wq, wk, wv, heads: int, geo: BranchGeometry, choice: torch.Tensor,
                         scale_qk: bool = True, counter: MacCounter | None = None) -> torch.Tensor:
    """Each head runs only its chosen branch. ``xn`` is ``(L, d)``, ``choice`` is ``(heads,)``."""
    if xn.ndim != 2:
        raise ContractError("hard routing works on one sequence at a time")
    choice = torch.as_tensor(choice, dtype=torch.long).reshape(-1)
    if choice.numel() != heads:
        raise ContractError(f"need one choice per head ({heads}), got {choice.numel()}")
    L, d = xn.shape
    dh = d // heads
    scale = qk_scale(dh, scale_qk)
    outs: dict[int, torch.Tensor] = {}
    for br in Branch:
        idx = [h for h in range(heads) if int(choice[h]) == br]
        if not idx:
            continue
        ws = [_head_cols(w, idx, dh, heads) for w in (wq, wk, wv)]
        nh = len(idx)
        if br == Branch.CORESET:
            plan = bcs_plan(xn, geo.grid, geo.bucket, counter)
            xc = _gather_rows(xn, plan.core_index)
            q, k, v = (_split_heads(xc @ w, nh) for w in ws)
            o = unpool_scatter(sdpa(q, k, v, scale), _HeadPlan(plan))
            if counter is not None:
                lc = plan.core_length
                counter.add("attention", nh * 2 * lc * lc * dh)
                counter.add("projection", 3 * lc * d * dh * nh)
        else:
            q, k, v = (_split_heads(xn @ w, nh) for w in ws)
            if counter is not None:
                counter.add("projection", 3 * L * d * dh * nh)
            if br == Branch.FULL:
                o = sdpa(q, k, v, scale)
                if counter is not None:
                    counter.add("attention", nh * 2 * L * L * dh)
            else:
                o = sliding_tile_attention(q, k, v, sliding_plan(geo.grid, geo.tile), scale, counter)
        for j, h in enumerate(idx):
            outs[h] = o[j]
    return _merge_heads(torch.stack([outs[h] for h in range(heads)]))


def routed_block_forward_hard(h, wq, wk, wv, heads, geo: BranchGeometry, choice,
                              scale_qk=True, counter=None, tally=None) -> torch.Tensor:
    """Multi-head attention on one ``(L, d)`` sequence with per-head branch dispatch.

    ``tally`` (a dict) accumulates how often each branch was activated.
    """
    if tally is not None:
        for c in torch.as_tensor(choice).reshape(-1).tolist():
            tally[Branch(c).label] = tally.get(Branch(c).label, 0) + 1
    return mixed_attention_hard(h, wq, wk, wv, heads, geo, choice, scale_qk, counter)


def routed_block_forward_soft(h, wq, wk, wv, heads, geo: BranchGeometry, alpha,
                              scale_qk=True, counter=None) -> torch.Tensor:
    return mixed_attention_soft(h, wq, wk, wv, heads, geo, alpha, scale_qk, counter)


def multihead_full_attention(h, wq, wk, wv, heads: int, scale_qk: bool = True) -> torch.Tensor:
    q, k, v = (_split_heads(h @ w, heads) for w in (wq, wk, wv))
    return _merge_heads(sdpa(q, k, v, qk_scale(h.shape[-1] // heads, scale_qk)))


# gate dumps

GATE_HEADER = ["step", "block", "head", "alpha_full", "alpha_sliding", "alpha_coreset", "choice"]


@dataclass
class GateRecord:
    step: int
    block: int
    head: int
    alpha: tuple[float, float, float]
    choice: Branch


def gate_records(step: int, gates_per_block) -> list[GateRecord]:
    """Records for one step from a list of ``(heads, 3)`` gate tensors."""
    out = []
    for n, g in enumerate(gates_per_block):
        ch = route_hard(g)
        for h in range(g.shape[0]):
            out.append(GateRecord(step, n, h, tuple(float(x) for x in g[h]), Branch(int(ch[h]))))
    return out


def write_gate_dump(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GATE_HEADER)
        for r in records:
            w.writerow([r.step, r.block, r.head, *(repr(a) for a in r.alpha), r.choice.label])


def read_gate_dump(path) -> list[GateRecord]:
    out = []
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header != GATE_HEADER:
            raise FormatError(f"expected header {','.join(GATE_HEADER)}", line=1)
        for n, row in enumerate(rows, start=2):
            if len(row) != len(GATE_HEADER):
                raise FormatError(f"expected {len(GATE_HEADER)} fields, got {len(row)}", line=n)
            try:
                rec = GateRecord(int(row[0]), int(row[1]), int(row[2]),
                                 (float(row[3]), float(row[4]), float(row[5])),
                                 Branch.parse(row[6]))
            except (ValueError, FormatError) as e:
                raise FormatError(str(e), line=n) from None
            if rec.step < 0 or rec.block < 0 or rec.head < 0:
                raise FormatError("negative index", line=n)
            out.append(rec)
    return out
