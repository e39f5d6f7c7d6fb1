import math

import pytest
import torch

from conftest import maxdiff
from routed_attn.coreset import BucketGeometry
from routed_attn.errors import ConfigError, ContractError, DivergenceError
from routed_attn.grid import DTYPE, VideoGrid, timestep_embedding
from routed_attn.model import (ModelState, ToyModelConfig, euler_sample, flow_interpolate,
                               model_forward, position_embedding, synth_dataset)
from routed_attn.rng import Stream
from routed_attn.router import Branch
from routed_attn.sliding import TileGeometry

SMALL = ToyModelConfig(blocks=2, heads=2, width=16, ffn_hidden=32, grid=VideoGrid(2, 4, 4),
                       tile=TileGeometry((1, 2, 2), (2, 2, 0)),
                       bucket=BucketGeometry((1, 2, 2), 0.5))


def live_state(seed=0, cfg=SMALL):
    """Random state with a non-zero output head and router."""
    s = Stream(seed, ("live",))
    state = ModelState.init(cfg, s)
    state.params["out_proj.w"] = s.child("out").normal(cfg.width, cfg.width) / 4
    for n in range(cfg.blocks):
        state.params[f"router.{n}"] = s.child("r", str(n)).normal(cfg.width, 3 * cfg.heads)
    return state


def test_dataset_examples():
    g = VideoGrid(4, 8, 8)
    a = synth_dataset(8, g, 6, Stream(1))
    b = synth_dataset(8, g, 6, Stream(1))
    assert len(a) == 8 and all(x.shape == (256, 6) for x in a)
    assert all(torch.equal(x, y) for x, y in zip(a, b))
    still = synth_dataset(3, g, 6, Stream(2), velocity=(0, 0))
    for x in still:
        frames = x.reshape(4, 64, 6)
        assert all(torch.equal(frames[0], frames[f]) for f in range(4))


def test_dataset_rejects_degenerate_grid():
    with pytest.raises(ConfigError):
        synth_dataset(2, VideoGrid(1, 4, 4), 4, Stream(0))


def test_flow_interpolate_examples(st):
    x0, x1 = st.normal(5, 2), st.normal(5, 2)
    assert torch.equal(flow_interpolate(x0, x1, 0.0).x_t, x0)
    assert torch.equal(flow_interpolate(x0, x1, 1.0).x_t, x1)
    z, two = torch.zeros(3, 2, dtype=DTYPE), torch.full((3, 2), 2.0, dtype=DTYPE)
    assert torch.equal(flow_interpolate(z, two, 0.5).x_t, torch.ones(3, 2, dtype=DTYPE))
    with pytest.raises(ContractError):
        flow_interpolate(x0, x1[:4], 0.5)


def test_position_embedding_is_fixed_and_distinct():
    g = VideoGrid(2, 3, 4)
    pe = position_embedding(g, 12)
    assert torch.equal(pe, position_embedding(g, 12))
    assert len({tuple(r) for r in pe.tolist()}) == g.L


def test_soft_full_gates_equal_dense(st):
    state = live_state()
    x = st.normal(2, SMALL.grid.L, SMALL.width)
    onehot = torch.zeros(2, 3, dtype=DTYPE)
    onehot[:, 0] = 1
    soft = model_forward(state, x, [0.1, 0.8], "soft", alpha=[onehot] * 2)
    dense = model_forward(state, x, [0.1, 0.8], "dense")
    assert maxdiff(soft.velocity, dense.velocity) <= 1e-10
    assert maxdiff(soft.features, dense.features) <= 1e-10


def test_zero_router_hard_equals_dense(st):
    state = ModelState.init(SMALL, st)
    state.params["out_proj.w"] = st.child("o").normal(16, 16)
    x = st.normal(SMALL.grid.L, 16)
    hard = model_forward(state, x, 0.3, "hard")
    assert all(bool((c == Branch.FULL).all()) for c in hard.choices)
    assert maxdiff(hard.velocity, model_forward(state, x, 0.3, "dense").velocity) <= 1e-10


def test_single_block_hand_composition(st):
    cfg = ToyModelConfig(blocks=1, heads=1, width=4, ffn_hidden=8, grid=VideoGrid(2, 2, 2),
                         tile=TileGeometry((1, 1, 1), (0, 0, 0)),
                         bucket=BucketGeometry((1, 1, 2), 0.5))
    state = ModelState.init(cfg, st)
    eye = torch.eye(4, dtype=DTYPE)
    for name in ("in_proj.w", "blocks.0.attn.wq", "blocks.0.attn.wk", "blocks.0.attn.wv",
                 "blocks.0.attn.wo", "out_proj.w"):
        state.params[name] = eye.clone()
    p = state.params
    x = st.normal(8, 4)
    t = 0.25

    def ln(z, g, b):
        mu = z.mean(-1, keepdim=True)
        var = ((z - mu) ** 2).mean(-1, keepdim=True)
        return (z - mu) / torch.sqrt(var + 1e-6) * g + b

    h = x + position_embedding(cfg.grid, 4) + timestep_embedding(t, 4) @ p["time_proj.w"]
    xn = ln(h, p["blocks.0.norm1.g"], p["blocks.0.norm1.b"])
    w = torch.softmax(xn @ xn.T / 2.0, -1)
    h = h + w @ xn
    u = ln(h, p["blocks.0.norm2.g"], p["blocks.0.norm2.b"]) @ p["blocks.0.ffn.w1"]
    gelu = 0.5 * u * (1 + torch.erf(u / math.sqrt(2)))
    h = h + gelu @ p["blocks.0.ffn.w2"]
    v = ln(h, p["out_norm.g"], p["out_norm.b"])
    out = model_forward(state, x, t, "dense")
    assert maxdiff(out.features, h) <= 1e-10
    assert maxdiff(out.velocity, v) <= 1e-10


def test_forward_contracts(st):
    state = live_state()
    with pytest.raises(ContractError):
        model_forward(state, st.normal(5, 16), 0.5)
    with pytest.raises(ContractError):
        model_forward(state, st.normal(SMALL.grid.L, 16), 0.5, "sparse")


def test_euler_zero_and_constant_fields():
    state = ModelState.init(SMALL, Stream(0))
    noise = Stream(5).child("noise").normal(SMALL.grid.L, SMALL.width)
    assert torch.equal(euler_sample(state, 7, Stream(5)), noise)
    c = torch.full((SMALL.grid.L, SMALL.width), 0.75, dtype=DTYPE)
    out = euler_sample(state, 4, Stream(5), velocity_fn=lambda x, t: c)
    assert maxdiff(out, noise + c) <= 1e-14


def test_euler_divergence():
    state = ModelState.init(SMALL, Stream(0))
    with pytest.raises(DivergenceError):
        euler_sample(state, 3, Stream(0), velocity_fn=lambda x, t: x * 1e7)
    with pytest.raises(ConfigError):
        euler_sample(state, 0, Stream(0))


def test_checkpoint_roundtrip(tmp_path):
    state = live_state(3)
    state.save(tmp_path / "ck")
    back = ModelState.load(tmp_path / "ck")
    assert back.config == state.config
    assert back.checksum() == state.checksum()
    with pytest.raises(FileNotFoundError, match="train"):
        ModelState.load(tmp_path / "missing")


def test_groups_partition_parameters():
    state = live_state()
    assert set(state.names("base")) | set(state.names("router")) == set(state.names())
    assert state.names("router") == ["router.0", "router.1"]
    with pytest.raises(ContractError):
        state.names("encoder")
