"""FLOP accounting, latency benchmarks, recall sweeps, gate heatmaps and the
average-pooling ablation baseline.

Runtime-breakdown categories (one block forward):

* ``attention``    the softmax(QK^T)V kernels of the executed branches
* ``attn_related`` Q/K/V and output projections, coreset selection, pool/unpool
* ``other``        layer norms and the feed-forward network
"""
from __future__ import annotations

import csv
import hashlib
import math
import statistics
import time
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .coreset import BucketGeometry, _gather_rows, bcs_plan, bcs_pool, unpool_scatter
from .counters import MacCounter
from .errors import ContractError, FormatError, GeometryError, MeasurementError
from .grid import DTYPE, ProjectionSet, VideoGrid, check_features
from .reference import project, qk_scale, recall_curve, sdpa
from .router import (Branch, BranchGeometry, GateRecord, _merge_heads, _split_heads,
                     mixed_attention_hard, route_hard)
from .rng import Stream
from .sliding import TileGeometry, sliding_plan, sliding_tile_attention

BRANCHES = ("full", "sliding", "coreset", "avgpool")


@dataclass(frozen=True)
class Dims:
    grid: VideoGrid
    d: int
    heads: int = 1

    @property
    def L(self) -> int:
        return self.grid.L


@dataclass
class FlopReport:
    branch: str
    attention_macs: int
    aux_macs: dict[str, int] = field(default_factory=dict)

    @property
    def total_macs(self) -> int:
        return self.attention_macs + sum(self.aux_macs.values())

    @property
    def flops(self) -> int:
        return 2 * self.total_macs


def flop_count(branch: str, dims: Dims, tile: TileGeometry | None = None,
               bucket: BucketGeometry | None = None,
               kernel: tuple[int, int, int] | None = None) -> FlopReport:
    """Closed-form MAC counts for one attention layer on one sequence."""
    L, d = dims.L, dims.d
    if branch == "full":
        return FlopReport(branch, 2 * L * L * d, {"projection": 3 * L * d * d})
    if branch == "sliding":
        if tile is None:
            raise ContractError("sliding needs a tile geometry")
        plan = sliding_plan(dims.grid, tile)
        T = tile.tile_tokens
        return FlopReport(branch, plan.active_blocks * T * T * 2 * d, {"projection": 3 * L * d * d})
    if branch == "coreset":
        if bucket is None:
            raise ContractError("coreset needs a bucket geometry")
        lc = bucket.core_length(dims.grid)
        evals = bucket.num_buckets(dims.grid) * (bucket.size - 1)
        return FlopReport(branch, 2 * lc * lc * d,
                          {"projection": 3 * lc * d * d, "similarity": evals * d})
    if branch == "avgpool":
        if kernel is None:
            raise ContractError("avgpool needs a kernel")
        lp = L // _check_kernel(dims.grid, kernel)
        return FlopReport(branch, 2 * lp * lp * d, {"projection": 3 * lp * d * d, "pooling": L * d})
    raise ContractError(f"unknown branch {branch!r}; expected one of {BRANCHES}")


# average pooling ablation

def _check_kernel(grid: VideoGrid, kernel) -> int:
    for name, n, k in zip("FHW", grid.shape, kernel):
        if k < 1 or n % k:
            raise GeometryError(f"pool kernel {k} does not divide grid dim {name}={n}")
    return math.prod(kernel)


def average_pool_baseline(h, proj: ProjectionSet, grid: VideoGrid, kernel, scale_qk: bool = True,
                          counter: MacCounter | None = None) -> torch.Tensor:
    """Mean-pool each kernel cell, attend over cell means, broadcast back."""
    check_features(h, grid)
    kt, kh, kw = kernel
    size = _check_kernel(grid, kernel)
    F_, H_, W_ = grid.shape
    d = h.shape[-1]
    x = h.reshape(F_ // kt, kt, H_ // kh, kh, W_ // kw, kw, d)
    pooled = x.mean(dim=(1, 3, 5)).reshape(-1, d)
    q, k, v = project(pooled, proj)
    out = sdpa(q, k, v, qk_scale(proj.d, scale_qk))
    if counter is not None:
        lp = pooled.shape[0]
        counter.add("pooling", grid.L * d)
        counter.add("projection", 3 * lp * d * d)
        counter.add("attention", 2 * lp * lp * d)
    out = out.reshape(F_ // kt, 1, H_ // kh, 1, W_ // kw, 1, -1)
    out = out.expand(F_ // kt, kt, H_ // kh, kh, W_ // kw, kw, out.shape[-1])
    return out.reshape(grid.L, -1)


# benchmarks

@dataclass
class BenchRecord:
    branch: str
    L: int
    d: int
    heads: int
    reps: int
    min_s: float
    median_s: float
    mean_s: float
    checksum: str
    step: int | None = None

    HEADER = ["branch", "L", "d", "heads", "reps", "min_s", "median_s", "mean_s", "checksum", "step"]

    def row(self):
        return [self.branch, self.L, self.d, self.heads, self.reps, repr(self.min_s),
                repr(self.median_s), repr(self.mean_s), self.checksum,
                "" if self.step is None else self.step]


def write_bench_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BenchRecord.HEADER)
        for r in records:
            w.writerow(r.row())


def checksum(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().contiguous().numpy().tobytes()).hexdigest()[:16]


def _timer_resolution_ns() -> float:
    return time.get_clock_info("perf_counter").resolution * 1e9


def time_callable(fn, reps: int):
    """Run once as warmup, then ``reps`` timed calls; returns (durations_s, checksum)."""
    if reps < 3:
        raise ContractError("benchmarks need at least 3 repetitions")
    ref = checksum(fn())
    res = _timer_resolution_ns()
    durs = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        out = fn()
        dt = time.perf_counter_ns() - t0
        if dt < 10 * res:
            raise MeasurementError(f"a repetition took {dt} ns (< 10 timer ticks); use larger dims")
        if checksum(out) != ref:
            raise MeasurementError("branch output changed between repetitions")
        durs.append(dt * 1e-9)
    return durs, ref


def _bench_inputs(dims: Dims, stream: Stream, dtype=DTYPE):
    h = stream.child("h").normal(dims.L, dims.d).to(dtype)
    s = 1.0 / math.sqrt(dims.d)
    w = [stream.child(n).normal(dims.d, dims.d).to(dtype) * s for n in ("wq", "wk", "wv")]
    return h, w


def branch_callable(branch: str, dims: Dims, stream: Stream, tile=None, bucket=None,
                    kernel=None, dtype=DTYPE):
    h, (wq, wk, wv) = _bench_inputs(dims, stream, dtype)
    if branch == "avgpool":
        proj = ProjectionSet(wq, wk, wv)
        return lambda: average_pool_baseline(h, proj, dims.grid, kernel)
    choice = torch.full((dims.heads,), int(Branch.parse(branch)))
    tile = tile or TileGeometry((1, 1, 1), (0, 0, 0))
    bucket = bucket or BucketGeometry((1, 1, 1), 1.0)
    geo = BranchGeometry(dims.grid, tile, bucket)
    geo.validate()
    return lambda: mixed_attention_hard(h, wq, wk, wv, dims.heads, geo, choice)


def bench(branch: str, dims: Dims, reps: int, seed: int, tile=None, bucket=None, kernel=None,
          dtype=DTYPE, step: int | None = None) -> BenchRecord:
    """Wall-clock stats for one attention layer (projections included) on seeded inputs."""
    with torch.no_grad():
        fn = branch_callable(branch, dims, Stream(seed, ("bench",)), tile, bucket, kernel, dtype)
        durs, ck = time_callable(fn, reps)
    return BenchRecord(branch, dims.L, dims.d, dims.heads, reps, min(durs),
                       statistics.median(durs), statistics.fmean(durs), ck, step)


def bench_routed_steps(records: list[GateRecord], dims: Dims, geo: BranchGeometry, reps: int,
                       seed: int) -> list[dict]:
    """Per-step latency of the attention layers under a gate dump's hard choices.

    Each block gets seeded random weights; returns one row per step with the
    dense and routed medians and attention MACs.
    """
    by_step = _group(records)
    nblocks = 1 + max(r.block for r in records)
    st = Stream(seed, ("bench_steps",))
    inputs = [_bench_inputs(dims, st.child(str(n))) for n in range(nblocks)]
    rows = []
    with torch.no_grad():
        dense_choice = torch.zeros(dims.heads, dtype=torch.long)
        dense_fn = lambda: torch.stack([mixed_attention_hard(h, *w, dims.heads, geo, dense_choice)
                                        for h, w in inputs])
        dense_t, _ = time_callable(dense_fn, reps)
        for step, recs in sorted(by_step.items()):
            choice = torch.zeros(nblocks, dims.heads, dtype=torch.long)
            for r in recs:
                choice[r.block, r.head] = int(r.choice)
            c = MacCounter()
            for n, (h, w) in enumerate(inputs):
                mixed_attention_hard(h, *w, dims.heads, geo, choice[n], counter=c)
            fn = lambda: torch.stack([mixed_attention_hard(h, *w, dims.heads, geo, choice[n])
                                      for n, (h, w) in enumerate(inputs)])
            durs, _ = time_callable(fn, reps)
            rows.append({"step": step, "dense_median_s": statistics.median(dense_t),
                         "routed_median_s": statistics.median(durs),
                         "dense_attn_macs": nblocks * 2 * dims.L * dims.L * dims.d,
                         "routed_attn_macs": c["attention"]})
    return rows


def runtime_breakdown(branch: str, dims: Dims, geo: BranchGeometry, reps: int, seed: int,
                      ffn_mult: int = 4) -> dict[str, float]:
    """Median seconds per category for one block with every head on ``branch``."""
    st = Stream(seed, ("breakdown",))
    x, (wq, wk, wv) = _bench_inputs(dims, st)
    d, heads = dims.d, dims.heads
    wo = st.child("wo").normal(d, d) / math.sqrt(d)
    w1 = st.child("w1").normal(d, ffn_mult * d) / math.sqrt(d)
    w2 = st.child("w2").normal(ffn_mult * d, d) / math.sqrt(ffn_mult * d)
    scale = qk_scale(d // heads, True)
    br = Branch.parse(branch)
    with torch.no_grad():
        plan = bcs_plan(x, geo.grid, geo.bucket) if br == Branch.CORESET else None
        src = bcs_pool(x, plan) if plan is not None else x
        q, k, v = (_split_heads(src @ w, heads) for w in (wq, wk, wv))
        sp = sliding_plan(geo.grid, geo.tile)

        def kernel():
            if br == Branch.SLIDING:
                return sliding_tile_attention(q, k, v, sp, scale)
            return sdpa(q, k, v, scale)

        attn = _merge_heads(kernel())

        def projections():
            return torch.cat([src @ w for w in (wq, wk, wv)] + [attn @ wo], dim=-1)

        def norm_ffn():
            return F.gelu(F.layer_norm(x, (d,)) @ w1) @ w2 + F.layer_norm(x, (d,))

        med = lambda fn: statistics.median(time_callable(fn, reps)[0])
        out = {"attention": med(kernel), "attn_related": med(projections), "other": med(norm_ffn)}
        if plan is not None:
            out["attn_related"] += med(lambda: bcs_pool(x, bcs_plan(x, geo.grid, geo.bucket)))
            out["attn_related"] += med(lambda: _gather_rows(attn, plan.source))
    return out


# recall sweeps

def recall_sweep_weights(weights_by_step: dict[int, torch.Tensor], grid: VideoGrid, ks) -> dict:
    """``{step: (heads, L, L) weights}`` -> ``{step: RecallCurve}``."""
    return {s: recall_curve(w, grid, ks) for s, w in sorted(weights_by_step.items())}


def recall_sweep(state, ks, steps: int, stream: Stream) -> dict:
    """Recall curves of every (block, head) along a dense Euler sampling run.

    Heads are numbered globally as ``block * heads + head``.
    """
    from .model import euler_sample, model_forward
    cfg = state.config
    captured = {}

    def trace(k, tk, x, _):
        out = model_forward(state, x, tk, "dense", capture_weights=True)
        captured[k] = torch.cat([w for w in out.weights], dim=0)

    euler_sample(state, steps, stream, "dense", trace=trace)
    return recall_sweep_weights(captured, cfg.grid, ks)


# gate heatmaps

HEATMAP_HEADER = ["interval", "block", "head", "alpha_full", "alpha_sliding", "alpha_coreset",
                  "dominant", "confidence"]


def _group(records):
    by_step = {}
    for r in records:
        by_step.setdefault(r.step, []).append(r)
    return by_step


@dataclass
class HeatCell:
    interval: int
    block: int
    head: int
    alpha: tuple[float, float, float]

    @property
    def dominant(self) -> Branch:
        return Branch(int(route_hard(torch.tensor(self.alpha, dtype=DTYPE))))

    @property
    def confidence(self) -> float:
        return self.alpha[int(self.dominant)]


def gate_heatmap(records: list[GateRecord], intervals: int | None = None) -> list[HeatCell]:
    """Average gate triples within equal, contiguous step intervals.

    ``intervals`` defaults to the number of distinct steps (width-1 intervals).
    """
    if not records:
        raise FormatError("empty gate dump")
    steps = sorted({r.step for r in records})
    n = len(steps) if intervals is None else intervals
    if not 1 <= n <= len(steps):
        raise ContractError(f"cannot split {len(steps)} steps into {n} intervals")
    which = {s: (i * n) // len(steps) for i, s in enumerate(steps)}
    acc: dict[tuple[int, int, int], list] = {}
    for r in records:
        acc.setdefault((which[r.step], r.block, r.head), []).append(r.alpha)
    cells = []
    for (iv, b, h), alphas in sorted(acc.items()):
        m = len(alphas)
        avg = tuple(math.fsum(a[j] for a in alphas) / m for j in range(3))
        cells.append(HeatCell(iv, b, h, avg))
    return cells


def export_gate_heatmap(records, path, intervals: int | None = None) -> list[HeatCell]:
    cells = gate_heatmap(records, intervals)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEATMAP_HEADER)
        for c in cells:
            w.writerow([c.interval, c.block, c.head, *(repr(a) for a in c.alpha), c.dominant.label,
                        repr(c.confidence)])
    return cells
