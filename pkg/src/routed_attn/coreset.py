"""Bucketed coreset selection and coreset attention (pool -> attend -> unpool)."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache

import torch

from .counters import MacCounter
from .errors import ContractError, GeometryError
from .grid import ProjectionSet, VideoGrid, check_features
from .reference import project, qk_scale, sdpa


@dataclass(frozen=True)
class BucketGeometry:
    bucket: tuple[int, int, int]
    r_core: float

    def __post_init__(self):
        object.__setattr__(self, "bucket", tuple(int(x) for x in self.bucket))
        if len(self.bucket) != 3 or any(b < 1 for b in self.bucket):
            raise GeometryError(f"bucket sizes must be three positive ints, got {self.bucket}")
        if not 0.0 < self.r_core <= 1.0:
            raise GeometryError(f"r_core must lie in (0, 1], got {self.r_core}")
        raw = self.size * (1.0 - self.r_core)
        if abs(raw - round(raw)) > 1e-9:
            raise GeometryError(f"n_drop = {self.size}*(1-{self.r_core}) = {raw} is not an integer")
        if round(raw) > self.size - 1:
            raise GeometryError("r_core too small: the bucket centre must survive")

    @property
    def size(self) -> int:
        return self.bucket[0] * self.bucket[1] * self.bucket[2]

    @property
    def n_drop(self) -> int:
        return int(round(self.size * (1.0 - self.r_core)))

    @property
    def n_keep(self) -> int:
        return self.size - self.n_drop

    @property
    def centre_offset(self) -> int:
        t, h, w = self.bucket
        return ((t // 2) * h + h // 2) * w + w // 2

    def validate(self, grid: VideoGrid) -> None:
        for name, n, b in zip("FHW", grid.shape, self.bucket):
            if n % b:
                raise GeometryError(f"bucket size {b} does not divide grid dim {name}={n}")

    def num_buckets(self, grid: VideoGrid) -> int:
        self.validate(grid)
        return grid.L // self.size

    def core_length(self, grid: VideoGrid) -> int:
        return self.num_buckets(grid) * self.n_keep


@lru_cache(maxsize=64)
def bucket_tokens(grid: VideoGrid, bucket: tuple[int, int, int]) -> torch.Tensor:
    """(B, t*h*w) token indices; buckets and their members in flatten order."""
    c = grid.coords()
    b = torch.tensor(bucket)
    nb = torch.tensor(grid.shape) // b
    bc = c // b
    bid = (bc[:, 0] * nb[1] + bc[:, 1]) * nb[2] + bc[:, 2]
    order = torch.argsort(bid * grid.L + torch.arange(grid.L))
    return order.reshape(-1, int(b.prod()))


@dataclass
class BucketPlan:
    """Selection result; tensors may carry leading batch dims ``...``.

    ``core_index`` (..., Lc) lists token indices in coreset order: per bucket the
    centre, then the surviving non-centres in original order. ``source`` (..., L)
    maps every original position to the coreset row it receives on unpool.
    """

    grid: VideoGrid
    geom: BucketGeometry
    buckets: torch.Tensor      # (B, n) token ids
    centres: torch.Tensor      # (B,)
    kept: torch.Tensor         # (..., B, n_keep) token ids, centre first
    dropped: torch.Tensor      # (..., B, n_drop) token ids, drop order
    core_index: torch.Tensor   # (..., Lc)
    source: torch.Tensor       # (..., L)
    similarity_evals: int

    @property
    def core_length(self) -> int:
        return self.core_index.shape[-1]

    def scatter_map(self) -> dict[int, int]:
        """Dropped token -> its bucket centre (single-sequence plans only)."""
        if self.dropped.ndim != 2:
            raise ContractError("scatter_map needs an unbatched plan")
        out = {}
        for b, row in enumerate(self.dropped.tolist()):
            for j in row:
                out[j] = int(self.centres[b])
        return out

    def write_csv(self, path) -> None:
        if self.kept.ndim != 2:
            raise ContractError("only unbatched plans can be exported")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            nk, nd = self.kept.shape[1], self.dropped.shape[1]
            w.writerow(["bucket", "center"] + [f"kept{i}" for i in range(nk)]
                       + [f"dropped{i}" for i in range(nd)])
            for b in range(self.kept.shape[0]):
                w.writerow([b, int(self.centres[b])] + self.kept[b].tolist()
                           + sorted(self.dropped[b].tolist()))


def cosine_to_centre(hb: torch.Tensor, centre: int) -> torch.Tensor:
    """Cosine similarity of each bucket member to the centre; (..., B, n-1).

    Zero-norm rows (centre or member) score -inf so they are dropped last.
    """
    n = hb.shape[-2]
    others = [j for j in range(n) if j != centre]
    c = hb[..., centre:centre + 1, :]
    o = hb[..., others, :]
    dot = (o * c).sum(-1)
    nrm = o.norm(dim=-1) * c.norm(dim=-1)
    sim = dot / torch.where(nrm > 0, nrm, torch.ones_like(nrm))
    return torch.where(nrm > 0, sim, torch.full_like(sim, float("-inf")))


def bcs_plan(h: torch.Tensor, grid: VideoGrid, geom: BucketGeometry,
             counter: MacCounter | None = None) -> BucketPlan:
    """Bucketed coreset selection on ``h`` of shape ``(..., L, d)``.

    Per bucket, drop the ``n_drop`` non-centre tokens most similar to the
    centre; ties drop the lower flattened index first.
    """
    geom.validate(grid)
    if h.shape[-2] != grid.L:
        raise ContractError(f"features have {h.shape[-2]} rows, grid has {grid.L}")
    lead = h.shape[:-2]
    toks = bucket_tokens(grid, geom.bucket)
    B, n = toks.shape
    ci = geom.centre_offset
    others = torch.tensor([j for j in range(n) if j != ci], dtype=torch.long)
    with torch.no_grad():
        sim = cosine_to_centre(h.detach()[..., toks, :], ci)
        # stable descending sort keeps lower index first among equal scores
        order = torch.sort(sim, dim=-1, descending=True, stable=True).indices
    drop_local = others[order[..., :geom.n_drop]]
    keep_local = torch.sort(others[order[..., geom.n_drop:]], dim=-1).values
    centre_col = torch.full((*lead, B, 1), ci, dtype=torch.long)
    keep_local = torch.cat([centre_col, keep_local], dim=-1)
    tk = toks.expand(*lead, B, n)
    kept = torch.gather(tk, -1, keep_local)
    dropped = torch.gather(tk, -1, drop_local)
    nk = geom.n_keep
    core_index = kept.reshape(*lead, B * nk)
    source = torch.empty((*lead, grid.L), dtype=torch.long)
    pos = torch.arange(B * nk).reshape(B, nk).expand(*lead, B, nk)
    source.scatter_(-1, kept.reshape(*lead, -1), pos.reshape(*lead, -1))
    centre_pos = (torch.arange(B) * nk)[:, None].expand(*lead, B, geom.n_drop)
    source.scatter_(-1, dropped.reshape(*lead, -1), centre_pos.reshape(*lead, -1))
    evals = B * (n - 1)
    if counter is not None:
        counter.add("similarity", math.prod(lead) * evals * h.shape[-1])
        counter.add("similarity_evals", math.prod(lead) * evals)
    return BucketPlan(grid, geom, toks, toks[:, ci], kept, dropped, core_index, source, evals)


def _gather_rows(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """Select rows ``idx`` (..., m) from ``x`` (..., [heads,] L, d)."""
    extra = x.ndim - idx.ndim - 1
    for _ in range(extra):
        idx = idx.unsqueeze(-2)
    idx = idx.expand(*x.shape[:-2], idx.shape[-1])
    return torch.gather(x, -2, idx.unsqueeze(-1).expand(*idx.shape, x.shape[-1]))


def bcs_pool(h: torch.Tensor, plan: BucketPlan) -> torch.Tensor:
    if h.shape[-2] != plan.grid.L:
        raise ContractError(f"plan built for L={plan.grid.L}, features have {h.shape[-2]} rows")
    return _gather_rows(h, plan.core_index)


def unpool_scatter(out_core: torch.Tensor, plan: BucketPlan) -> torch.Tensor:
    """Kept tokens get their own row; dropped tokens copy their centre's row."""
    if out_core.shape[-2] != plan.core_length:
        raise ContractError(f"expected {plan.core_length} coreset rows, got {out_core.shape[-2]}")
    return _gather_rows(out_core, plan.source)


def coreset_attention(h, proj: ProjectionSet, grid: VideoGrid, geom: BucketGeometry,
                      scale_qk: bool = True, counter: MacCounter | None = None) -> torch.Tensor:
    check_features(h, grid)
    plan = bcs_plan(h, grid, geom, counter)
    hc = bcs_pool(h, plan)
    q, k, v = project(hc, proj)
    out = sdpa(q, k, v, qk_scale(proj.d, scale_qk))
    if counter is not None:
        lc, d = plan.core_length, proj.d
        counter.add("projection", 3 * lc * d * d)
        counter.add("attention", 2 * lc * lc * d)
    return unpool_scatter(out, plan)
