import pytest
import torch
from hypothesis import given, settings, strategies as S

from conftest import maxdiff, rand_proj
from routed_attn.coreset import (BucketGeometry, bcs_plan, bcs_pool, bucket_tokens,
                                 coreset_attention, unpool_scatter)
from routed_attn.counters import MacCounter
from routed_attn.errors import ContractError, GeometryError
from routed_attn.grid import DTYPE, VideoGrid
from routed_attn.reference import full_attention


def test_plan_hand_example(st):
    g = VideoGrid(1, 1, 4)
    plan = bcs_plan(st.normal(4, 3), g, BucketGeometry((1, 1, 2), 0.5))
    assert plan.buckets.tolist() == [[0, 1], [2, 3]]
    assert plan.centres.tolist() == [1, 3]
    assert plan.dropped.flatten().tolist() == [0, 2]
    assert plan.kept.flatten().tolist() == [1, 3]
    assert plan.scatter_map() == {0: 1, 2: 3}


def test_identity_at_full_ratio(st):
    g = VideoGrid(2, 2, 2)
    h = st.normal(g.L, 3)
    plan = bcs_plan(h, g, BucketGeometry((1, 2, 2), 1.0))
    assert plan.dropped.numel() == 0
    assert sorted(plan.core_index.tolist()) == list(range(g.L))
    assert torch.equal(unpool_scatter(bcs_pool(h, plan), plan), h)


def test_duplicate_of_centre_is_dropped(st):
    h = st.normal(4, 3)
    h[1] = h[2] * 2.5
    plan = bcs_plan(h, VideoGrid(1, 1, 4), BucketGeometry((1, 1, 4), 0.75))
    assert plan.dropped.flatten().tolist() == [1]


def test_ties_drop_lower_index_first():
    h = torch.ones(4, 2, dtype=DTYPE)
    plan = bcs_plan(h, VideoGrid(1, 1, 4), BucketGeometry((1, 1, 4), 0.5))
    assert plan.dropped.flatten().tolist() == [0, 1]
    assert plan.kept.flatten().tolist() == [2, 3]


def test_similarity_evaluation_count(st):
    g = VideoGrid(4, 6, 4)
    c = MacCounter()
    plan = bcs_plan(st.normal(g.L, 5), g, BucketGeometry((2, 3, 2), 0.5), c)
    assert plan.similarity_evals == 88 == c["similarity_evals"]
    assert c["similarity"] == 88 * 5


def test_pool_and_unpool_examples(st):
    g = VideoGrid(1, 1, 4)
    h = st.normal(4, 3)
    plan = bcs_plan(h, g, BucketGeometry((1, 1, 2), 0.5))
    assert torch.equal(bcs_pool(h, plan), h[[1, 3]])
    a, b = st.normal(3), st.normal(3)
    out = unpool_scatter(torch.stack([a, b]), plan)
    assert torch.equal(out, torch.stack([a, a, b, b]))
    same = torch.ones(4, 3, dtype=DTYPE)
    assert torch.equal(bcs_pool(same, bcs_plan(same, g, plan.geom)), torch.ones(2, 3, dtype=DTYPE))


def test_unpool_rejects_wrong_length(st):
    g = VideoGrid(1, 1, 4)
    plan = bcs_plan(st.normal(4, 3), g, BucketGeometry((1, 1, 2), 0.5))
    with pytest.raises(ContractError):
        unpool_scatter(st.normal(3, 3), plan)


def test_geometry_errors():
    with pytest.raises(GeometryError):
        BucketGeometry((1, 1, 3), 0.5)
    with pytest.raises(GeometryError):
        BucketGeometry((1, 1, 2), 0.0)
    with pytest.raises(GeometryError):
        BucketGeometry((1, 1, 2), 0.5).validate(VideoGrid(1, 1, 3))


def test_full_ratio_equals_full_attention(st):
    g = VideoGrid(2, 6, 4)
    h = st.normal(g.L, 8)
    p = rand_proj(st, 8)
    assert maxdiff(coreset_attention(h, p, g, BucketGeometry((2, 3, 2), 1.0)),
                   full_attention(h, p)) <= 1e-12


def test_homogeneous_buckets_equal_full(st):
    g = VideoGrid(2, 4, 4)
    geom = BucketGeometry((1, 2, 2), 0.5)
    toks = bucket_tokens(g, geom.bucket)
    proto = st.normal(toks.shape[0], 8)
    h = torch.empty(g.L, 8, dtype=DTYPE)
    for b, row in enumerate(toks):
        h[row] = proto[b]
    p = rand_proj(st, 8)
    assert maxdiff(coreset_attention(h, p, g, geom), full_attention(h, p)) <= 1e-8


def test_quarter_attention_macs(st):
    g = VideoGrid(2, 4, 4)
    cc, cf = MacCounter(), MacCounter()
    h = st.normal(g.L, 8)
    coreset_attention(h, rand_proj(st, 8), g, BucketGeometry((1, 2, 2), 0.5), counter=cc)
    assert 4 * cc["attention"] == 2 * g.L * g.L * 8


@settings(max_examples=30, deadline=None)
@given(S.sampled_from([(1, 2, 2), (2, 2, 1), (1, 1, 4), (2, 2, 2)]), S.integers(0, 2 ** 31))
def test_partition_and_batched_plans(bucket, seed):
    from routed_attn.rng import Stream
    g = VideoGrid(2, 4, 4)
    geom = BucketGeometry(bucket, 0.5)
    h = Stream(seed).normal(3, g.L, 4)
    batched = bcs_plan(h, g, geom)
    for i in range(3):
        single = bcs_plan(h[i], g, geom)
        assert torch.equal(batched.core_index[i], single.core_index)
        allidx = torch.cat([single.kept.flatten(), single.dropped.flatten()]).sort().values
        assert torch.equal(allidx, torch.arange(g.L))


def test_plan_csv(st, tmp_path):
    plan = bcs_plan(st.normal(4, 3), VideoGrid(1, 1, 4), BucketGeometry((1, 1, 2), 0.5))
    plan.write_csv(tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines == ["bucket,center,kept0,dropped0", "0,1,1,0", "1,3,3,2"]


def test_single_token_buckets(st):
    g = VideoGrid(1, 2, 3)
    h = st.normal(g.L, 4)
    plan = bcs_plan(h, g, BucketGeometry((1, 1, 1), 1.0))
    assert plan.similarity_evals == 0 and plan.core_length == g.L
    assert torch.equal(unpool_scatter(bcs_pool(h, plan), plan), h)
