"""Quick oracle/invariant suite behind ``routed-attn verify``.

Each property is a small randomized check against an independent oracle.
The full-strength versions live in the pytest suite.
"""
from __future__ import annotations

import math
import random
import traceback
from collections.abc import Callable

import torch

from .config import RunConfig
from .coreset import BucketGeometry, bcs_plan, bcs_pool, coreset_attention, unpool_scatter
from .counters import MacCounter
from .grid import DTYPE, ProjectionSet, VideoGrid, flatten_index, spatial_distance, \
    timestep_embedding, unflatten_index
from .reference import full_attention, masked_attention, recall_by_nearest
from .router import Branch, compute_gates, route_hard
from .rng import Stream
from .sliding import TileGeometry, sliding_attention, sliding_plan, sliding_tile_mask_3d
from . import tensorio

PROPERTIES: list[tuple[str, str, Callable]] = []
MODULES = ("grid", "reference", "sliding", "coreset", "router", "model", "training", "profiler")


def prop(module: str):
    def deco(fn):
        PROPERTIES.append((module, fn.__name__, fn))
        return fn
    return deco


def _rand_grid(rng: random.Random, limit: int = 512):
    while True:
        dims = [rng.randint(1, 8) for _ in range(3)]
        if math.prod(dims) <= limit:
            return VideoGrid(*dims)


def _divisor(rng, n):
    return rng.choice([k for k in range(1, n + 1) if n % k == 0])


@prop("grid")
def flatten_roundtrip(cfg, st):
    rng = random.Random(st.seed)
    for _ in range(20):
        g = _rand_grid(rng)
        for i in range(g.L):
            assert flatten_index(*unflatten_index(i, g), g) == i


@prop("grid")
def distance_triangle(cfg, st):
    rng = random.Random(st.seed)
    g = VideoGrid(3, 4, 5)
    for _ in range(200):
        i, j, k = (rng.randrange(g.L) for _ in range(3))
        assert spatial_distance(i, k, g) <= spatial_distance(i, j, g) + spatial_distance(j, k, g) + 1e-12


@prop("grid")
def tensor_container_roundtrip(cfg, st):
    x = st.normal(3, 4, 5)
    assert torch.equal(tensorio.decode(tensorio.encode(x)), x)


@prop("reference")
def full_equals_all_true_mask(cfg, st):
    h = st.normal(64, 16)
    p = ProjectionSet(st.normal(16, 16) / 4, st.normal(16, 16) / 4, st.normal(16, 16) / 4)
    ref = masked_attention(h, p, torch.ones(64, 64, dtype=torch.bool))
    assert (full_attention(h, p) - ref).abs().max() <= 1e-12


@prop("reference")
def recall_full_mass(cfg, st):
    g = VideoGrid(2, 3, 4)
    h = st.normal(g.L, 8)
    p = ProjectionSet(st.normal(8, 8), st.normal(8, 8), st.normal(8, 8))
    assert abs(recall_by_nearest(h, p, g.L, g) - 1.0) <= 1e-12
    vals = [recall_by_nearest(h, p, k, g) for k in range(1, g.L + 1)]
    assert all(a <= b + 1e-15 for a, b in zip(vals, vals[1:]))


def _rand_tile(rng, g):
    tile = tuple(_divisor(rng, n) for n in g.shape)
    window = tuple(rng.randint(0, 2 * (n // t)) for n, t in zip(g.shape, tile))
    return TileGeometry(tile, window)


@prop("sliding")
def sliding_matches_masked_oracle(cfg, st):
    rng = random.Random(st.seed)
    for c in range(20):
        g = _rand_grid(rng, 256)
        geom = _rand_tile(rng, g)
        s = st.child(str(c))
        h = s.normal(g.L, 8)
        p = ProjectionSet(s.normal(8, 8) / 3, s.normal(8, 8) / 3, s.normal(8, 8) / 3)
        ref = masked_attention(h, p, sliding_tile_mask_3d(g, geom).dense())
        assert (sliding_attention(h, p, g, geom) - ref).abs().max() <= 1e-10


@prop("sliding")
def mask_block_dense_with_diagonal(cfg, st):
    rng = random.Random(st.seed)
    for _ in range(20):
        g = _rand_grid(rng, 512)
        geom = _rand_tile(rng, g)
        dense = sliding_tile_mask_3d(g, geom).dense()
        assert bool(dense.diagonal().all())
        from .sliding import token_tile_ids
        ids = token_tile_ids(g, geom.tile)
        for a in range(int(ids.max()) + 1):
            rows = dense[ids == a]
            assert bool((rows == rows[0]).all())


@prop("sliding")
def sliding_counter_proportional(cfg, st):
    g = cfg.model_config().grid
    geom = cfg.model_config().tile
    c = MacCounter()
    h = st.normal(g.L, 8)
    sliding_attention(h, ProjectionSet.random(8), g, geom, counter=c)
    plan = sliding_plan(g, geom)
    assert c["attention"] * plan.num_tiles ** 2 == plan.active_blocks * 2 * g.L * g.L * 8


@prop("coreset")
def coreset_identity_at_full_ratio(cfg, st):
    g = VideoGrid(2, 6, 4)
    h = st.normal(g.L, 8)
    p = ProjectionSet(st.normal(8, 8) / 3, st.normal(8, 8) / 3, st.normal(8, 8) / 3)
    out = coreset_attention(h, p, g, BucketGeometry((2, 3, 2), 1.0))
    assert (out - full_attention(h, p)).abs().max() <= 1e-12


@prop("coreset")
def coreset_homogeneous_buckets(cfg, st):
    g = VideoGrid(2, 6, 4)
    geom = BucketGeometry((2, 3, 2), 0.5)
    for c in range(10):
        s = st.child(str(c))
        proto = s.normal(g.L // geom.size, 8)
        from .coreset import bucket_tokens
        h = torch.empty(g.L, 8, dtype=DTYPE)
        for b, toks in enumerate(bucket_tokens(g, geom.bucket)):
            h[toks] = proto[b]
        p = ProjectionSet(s.normal(8, 8) / 3, s.normal(8, 8) / 3, s.normal(8, 8) / 3)
        assert (coreset_attention(h, p, g, geom) - full_attention(h, p)).abs().max() <= 1e-8


@prop("coreset")
def bcs_linear_selection_cost(cfg, st):
    geom = BucketGeometry((2, 3, 2), 0.5)
    for g in (VideoGrid(2, 6, 4), VideoGrid(4, 6, 4), VideoGrid(8, 6, 4)):
        plan = bcs_plan(st.normal(g.L, 4), g, geom)
        assert plan.similarity_evals * geom.size == g.L * (geom.size - 1)


@prop("coreset")
def pool_unpool_partition(cfg, st):
    g = VideoGrid(2, 6, 4)
    plan = bcs_plan(st.normal(g.L, 4), g, BucketGeometry((2, 3, 2), 0.5))
    allidx = torch.cat([plan.kept.reshape(-1), plan.dropped.reshape(-1)]).sort().values
    assert torch.equal(allidx, torch.arange(g.L))
    plan1 = bcs_plan(st.normal(g.L, 4), g, BucketGeometry((2, 3, 2), 1.0))
    h = st.normal(g.L, 4)
    assert torch.equal(unpool_scatter(bcs_pool(h, plan1), plan1), h)


@prop("router")
def gates_on_simplex_and_ties_full(cfg, st):
    w = st.normal(16, 12)
    a = compute_gates(timestep_embedding(0.3, 16), w)
    assert (a.sum(-1) - 1).abs().max() <= 1e-12 and bool((a >= 0).all())
    assert int(route_hard(torch.tensor([1 / 3, 1 / 3, 1 / 3]))) == Branch.FULL
    assert int(route_hard(torch.tensor([0.2, 0.4, 0.4]))) == Branch.FULL


@prop("router")
def hard_choice_shift_invariant(cfg, st):
    from .reference import softmax
    z = st.normal(1000, 3)
    c = st.normal(1000, 1) * 5
    assert torch.equal(route_hard(softmax(z)), route_hard(softmax(z + c)))


def _tiny_state(st):
    from .model import ModelState, ToyModelConfig
    cfg = ToyModelConfig(blocks=1, heads=2, width=8, ffn_hidden=16, grid=VideoGrid(2, 2, 2),
                         tile=TileGeometry((1, 2, 2), (2, 0, 0)),
                         bucket=BucketGeometry((1, 2, 2), 0.5))
    state = ModelState.init(cfg, st.child("tiny"))
    state.params["out_proj.w"] = st.child("out").normal(8, 8) / 3
    state.params["router.0"] = st.child("r").normal(8, 6)
    return state


@prop("model")
def soft_one_hot_equals_hard(cfg, st):
    from .model import model_forward
    state = _tiny_state(st)
    x = st.normal(state.config.grid.L, 8)
    for br in Branch:
        a = torch.zeros(2, 3, dtype=DTYPE)
        a[:, int(br)] = 1
        soft = model_forward(state, x, 0.4, "soft", alpha=[a])
        hard = model_forward(state, x, 0.4, "hard", choices=[torch.full((2,), int(br))])
        assert (soft.velocity - hard.velocity).abs().max() <= 1e-10


@prop("training")
def gradients_match_finite_differences(cfg, st):
    from .training import Batch, TrainConfig, gradient, total_loss
    state = _tiny_state(st)
    L = state.config.grid.L
    batch = Batch(st.normal(2, L, 8), st.normal(2, L, 8), torch.tensor([0.2, 0.7], dtype=DTYPE))
    tc = TrainConfig()
    for group, name in (("router", "router.0"), ("all", "blocks.0.attn.wq")):
        g = gradient(state, batch, group, "total", tc)[name]
        for idx in [(0, 0), (3, 1), (5, 4)]:
            p = state.params[name]
            old = float(p[idx])
            vals = []
            for sgn in (1, -1):
                p[idx] = old + sgn * 1e-5
                vals.append(float(total_loss(batch, state, tc)[1]))
            p[idx] = old
            fd = (vals[0] - vals[1]) / 2e-5
            assert abs(fd - float(g[idx])) <= 1e-4 * max(abs(fd), 1e-6), (name, idx, fd, float(g[idx]))


@prop("profiler")
def coreset_quarter_macs(cfg, st):
    from .profiler import Dims, flop_count
    g, _, bucket = cfg.bench_geometry()
    dims = Dims(g, cfg["bench.width"])
    if bucket.r_core == 0.5:
        rep = flop_count("coreset", dims, bucket=bucket)
        assert 4 * rep.attention_macs == flop_count("full", dims).attention_macs


def run(cfg: RunConfig, only: str | None = None, echo=print) -> int:
    """Run all (or one module's) properties; returns the number of failures."""
    if only is not None and only not in MODULES:
        raise ValueError(f"unknown module {only!r}; choose from {', '.join(MODULES)}")
    cfg.validate()
    failures = 0
    root = Stream(cfg["seed"], ("verify",))
    for module, name, fn in PROPERTIES:
        if only is not None and module != only:
            continue
        try:
            fn(cfg, root.child(module, name))
            echo(f"PASS {module}.{name}")
        except Exception as e:  # noqa: BLE001 - every failure is reported by name
            failures += 1
            echo(f"FAIL {module}.{name}: {type(e).__name__}: {e}")
            if not isinstance(e, AssertionError):
                echo(traceback.format_exc().rstrip())
    return failures
