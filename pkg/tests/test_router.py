import math

import pytest
import torch
from hypothesis import given, strategies as S

from conftest import maxdiff
from routed_attn.coreset import BucketGeometry, bcs_plan
from routed_attn.errors import ContractError, FormatError
from routed_attn.grid import DTYPE, VideoGrid, timestep_embedding
from routed_attn.reference import softmax
from routed_attn.router import (Branch, BranchGeometry, compute_gates, gate_records,
                                multihead_full_attention, read_gate_dump, route_hard,
                                routed_block_forward_hard, routed_block_forward_soft,
                                write_gate_dump)
from routed_attn.sliding import TileGeometry, sliding_tile_mask_3d

GRID = VideoGrid(2, 8, 8)
GEO = BranchGeometry(GRID, TileGeometry((1, 4, 4), (2, 2, 0)), BucketGeometry((1, 2, 2), 0.5))
COVER = BranchGeometry(GRID, TileGeometry((1, 4, 4), (2, 2, 2)), BucketGeometry((1, 2, 2), 1.0))


def weights(st, d=16):
    return [st.child(n).normal(d, d) / math.sqrt(d) for n in ("q", "k", "v")]


def test_zero_router_is_uniform():
    a = compute_gates(timestep_embedding(0.3, 8), torch.zeros(8, 12, dtype=DTYPE))
    assert a.shape == (4, 3)
    assert maxdiff(a, torch.full((4, 3), 1 / 3, dtype=DTYPE)) <= 1e-15


def test_closed_form_softmax():
    a = softmax(torch.tensor([math.log(2), 0.0, 0.0], dtype=DTYPE))
    assert maxdiff(a, torch.tensor([0.5, 0.25, 0.25], dtype=DTYPE)) <= 1e-15


def test_gate_shape_contract():
    with pytest.raises(ContractError):
        compute_gates(torch.zeros(8, dtype=DTYPE), torch.zeros(8, 5, dtype=DTYPE))
    with pytest.raises(ContractError):
        compute_gates(torch.zeros(6, dtype=DTYPE), torch.zeros(8, 6, dtype=DTYPE))


@pytest.mark.parametrize("alpha,want", [
    ((1 / 3, 1 / 3, 1 / 3), Branch.FULL),
    ((0.1, 0.7, 0.2), Branch.SLIDING),
    ((0.2, 0.4, 0.4), Branch.FULL),
    ((0.1, 0.2, 0.7), Branch.CORESET),
    ((0.4, 0.4, 0.2), Branch.FULL),
    ((0.4, 0.2, 0.4), Branch.FULL),
])
def test_route_hard_cases(alpha, want):
    assert int(route_hard(torch.tensor(alpha, dtype=DTYPE))) == want


@given(S.tuples(*[S.floats(-20, 20)] * 3), S.floats(-50, 50))
def test_shift_invariance(z, c):
    z = torch.tensor(z, dtype=DTYPE)
    a, b = softmax(z), softmax(z + c)
    assert maxdiff(a, b) <= 1e-12
    assert abs(float(a.sum()) - 1) <= 1e-12


def test_all_full_matches_multihead_bitwise(st):
    wq, wk, wv = weights(st)
    h = st.normal(GRID.L, 16)
    out = routed_block_forward_hard(h, wq, wk, wv, 4, GEO, torch.zeros(4, dtype=torch.long))
    assert torch.equal(out, multihead_full_attention(h, wq, wk, wv, 4))


def test_all_sliding_with_covering_window(st):
    wq, wk, wv = weights(st)
    h = st.normal(GRID.L, 16)
    out = routed_block_forward_hard(h, wq, wk, wv, 4, COVER, torch.ones(4, dtype=torch.long))
    assert maxdiff(out, multihead_full_attention(h, wq, wk, wv, 4)) <= 1e-10


def _oracle_head(h, wq, wk, wv, branch):
    """Dense per-head oracle for ``(L, dh)``-column projections."""
    q, k, v = h @ wq, h @ wk, h @ wv
    scale = 1 / math.sqrt(q.shape[1])
    if branch == Branch.CORESET:
        plan = bcs_plan(h, GRID, GEO.bucket)
        ci = plan.core_index
        w = torch.softmax(q[ci] @ k[ci].T * scale, -1)
        return (w @ v[ci])[plan.source]
    s = q @ k.T * scale
    if branch == Branch.SLIDING:
        s = s.masked_fill(~sliding_tile_mask_3d(GRID, GEO.tile).dense(), float("-inf"))
    return torch.softmax(s, -1) @ v


def test_mixed_choices_match_per_head_oracle(st):
    wq, wk, wv = weights(st)
    h = st.normal(GRID.L, 16)
    choice = torch.tensor([2, 0, 1, 2])
    counts = {}
    out = routed_block_forward_hard(h, wq, wk, wv, 4, GEO, choice, tally=counts)
    assert counts == {"coreset": 2, "full": 1, "sliding": 1}
    for head, br in enumerate(choice.tolist()):
        cols = slice(4 * head, 4 * head + 4)
        ref = _oracle_head(h, wq[:, cols], wk[:, cols], wv[:, cols], Branch(br))
        assert maxdiff(out[:, cols], ref) <= 1e-10


def test_soft_one_hot_endpoints(st):
    wq, wk, wv = weights(st)
    h = st.normal(GRID.L, 16)
    for br in Branch:
        alpha = torch.zeros(4, 3, dtype=DTYPE)
        alpha[:, int(br)] = 1
        soft = routed_block_forward_soft(h, wq, wk, wv, 4, GEO, alpha)
        hard = routed_block_forward_hard(h, wq, wk, wv, 4, GEO, torch.full((4,), int(br)))
        assert maxdiff(soft, hard) <= 1e-10


def test_soft_uniform_with_equal_branches(st):
    wq, wk, wv = weights(st)
    h = st.normal(GRID.L, 16)
    alpha = torch.full((4, 3), 1 / 3, dtype=DTYPE)
    out = routed_block_forward_soft(h, wq, wk, wv, 4, COVER, alpha)
    assert maxdiff(out, multihead_full_attention(h, wq, wk, wv, 4)) <= 1e-10


def test_hard_rejects_batched_input(st):
    wq, wk, wv = weights(st)
    with pytest.raises(ContractError):
        routed_block_forward_hard(st.normal(2, GRID.L, 16), wq, wk, wv, 4, GEO, [0, 0, 0, 0])


def test_gate_dump_roundtrip(st, tmp_path):
    gates = [softmax(st.normal(2, 3)), softmax(st.normal(2, 3))]
    recs = gate_records(3, gates)
    write_gate_dump(tmp_path / "g.csv", recs)
    assert read_gate_dump(tmp_path / "g.csv") == recs


def test_gate_dump_reports_line(tmp_path):
    p = tmp_path / "g.csv"
    p.write_text("step,block,head,alpha_full,alpha_sliding,alpha_coreset,choice\n"
                 "0,0,0,0.5,0.25,0.25,full\n0,0,1,0.5,0.25,0.25,banana\n")
    with pytest.raises(FormatError, match="line 3"):
        read_gate_dump(p)
