import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sketchgait import metric
from sketchgait.descriptor import DescriptorConfig, DescriptorSet
from sketchgait.errors import DataError, ParameterError
from sketchgait.evaluation import (
    cross_domain_eval, exclusion_mask, format_table, pairwise_distances, per_condition_report, rank_k,
)
from sketchgait.prep import Protocol, SequenceMeta

import oracles


def instance(seed, max_n=50):
    rng = np.random.default_rng(seed)
    p, g = rng.integers(1, max_n + 1, 2)
    n_ids = int(rng.integers(2, 8))
    # quantized distances so ties actually occur
    dist = np.round(rng.random((p, g)) * 10) / 10
    return dist, rng.integers(0, n_ids, p), rng.integers(0, n_ids, g), rng


# ---- distances -----------------------------------------------------------

def test_distance_examples():
    x = np.random.default_rng(0).normal(size=(6, 4))
    assert np.all(np.diag(pairwise_distances(x, x)) == 0)
    assert pairwise_distances([[0.0]], [[3.0]])[0, 0] == 3.0
    with pytest.raises(ParameterError):
        pairwise_distances(np.zeros((2, 3)), np.zeros((2, 4)))
    with pytest.raises(ParameterError):
        pairwise_distances(x, x, "manhattan")


def test_distance_oracle():
    rng = np.random.default_rng(1)
    g, p = rng.normal(size=(30, 5)), rng.normal(size=(20, 5))
    d = pairwise_distances(g, p)
    for i in range(20):
        for j in range(30):
            assert abs(d[i, j] - sum((p[i] - g[j]) ** 2) ** 0.5) < 1e-6


def test_cosine_flag():
    d = pairwise_distances([[1.0, 0.0], [0.0, 2.0]], [[3.0, 0.0]], "cosine")
    np.testing.assert_allclose(d, [[0.0, 1.0]], atol=1e-12)


# ---- rank-k --------------------------------------------------------------

def test_rank_self_and_adversarial():
    x = np.random.default_rng(2).normal(size=(8, 3))
    labels = np.arange(8)
    assert rank_k(pairwise_distances(x, x), labels, labels, 1).accuracy == 1.0
    dist = np.ones((4, 4))
    dist[np.arange(4), (np.arange(4) + 1) % 4] = 0.0
    assert rank_k(dist, np.arange(4), np.arange(4), 1).accuracy == 0.0


@pytest.mark.parametrize("seed", range(25))
def test_rank_matches_exhaustive(seed):
    dist, pl, gl, rng = instance(seed)
    excl = rng.random(dist.shape) < 0.2
    for k in (1, 3, 5):
        for ex in (None, excl):
            res = rank_k(dist, pl, gl, k, ex)
            assert (res.hits, res.eligible) == oracles.rank_k(dist.tolist(), pl.tolist(), gl.tolist(), k,
                                                             None if ex is None else ex.tolist())


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_rank_monotone_and_transform_invariant(seed):
    dist, pl, gl, _ = instance(seed, 20)
    accs = [rank_k(dist, pl, gl, k).hits for k in range(1, 8)]
    assert accs == sorted(accs)
    for f in (np.exp, lambda d: 3 * d + 1, lambda d: d ** 3):
        for k in (1, 5):
            assert rank_k(f(dist), pl, gl, k) == rank_k(dist, pl, gl, k)
    far = np.hstack([dist, np.full((dist.shape[0], 1), dist.max() + 1)])
    # a far entry can only enter the top k when the gallery has fewer than k entries
    for k in [k for k in (1, 5) if k <= dist.shape[1]]:
        assert rank_k(far, pl, np.append(gl, pl[0]), k).hits == rank_k(dist, pl, gl, k).hits


def test_zero_eligible_probes_counted():
    dist = np.zeros((3, 2))
    excl = np.array([[True, True], [False, True], [False, False]])
    res = rank_k(dist, [0, 0, 1], [0, 1], 1, excl)
    assert (res.hits, res.eligible, res.skipped) == (1, 2, 1)


def test_tie_break_lower_index():
    assert rank_k(np.zeros((1, 3)), [2], [1, 2, 2], 1).hits == 0
    assert rank_k(np.zeros((1, 3)), [1], [1, 2, 2], 1).hits == 1


# ---- exclusion -----------------------------------------------------------

def test_exclusion_rules():
    a = SequenceMeta("1", "NM", "090", "00")
    b = SequenceMeta("1", "NM", "090", "01")
    c = SequenceMeta("2", "NM", "180", "00")
    assert not exclusion_mask([a], [a, b, c], "none").any()
    np.testing.assert_array_equal(exclusion_mask([a], [a, b, c], "same-sequence"), [[True, False, False]])
    np.testing.assert_array_equal(exclusion_mask([a], [a, b, c], "same-view"), [[True, True, False]])
    with pytest.raises(ParameterError):
        exclusion_mask([a], [a], "same-day")


# ---- reports -------------------------------------------------------------

def dataset(n_ids=10, conds=("NM", "BG", "CL"), noise=0.05, seed=0, dim=6):
    rng = np.random.default_rng(seed)
    centres = rng.normal(size=(n_ids, dim))
    metas, rows = [], []
    for cond in conds:
        for i in range(n_ids):
            metas.append(SequenceMeta(f"{i:02d}", cond, "090", "00"))
            rows.append(centres[i] + noise * rng.normal(size=dim))
    return metas, np.array(rows)


def test_identical_copies_score_100():
    metas, _ = dataset(conds=("A", "B"))
    emb = np.tile(np.eye(10), (2, 1))
    rep = per_condition_report(metas, emb, Protocol(("A",), ("B",)))
    assert rep.conditions[0]["rank1"] == 100.0 and rep.overall["rank1"] == 100.0


def test_columns_follow_protocol_order():
    metas, emb = dataset(conds=("NM", "BG", "CL", "UP"))
    rep = per_condition_report(metas, emb, Protocol(("NM",), ("UP", "BG", "CL")))
    assert [c["condition"] for c in rep.conditions] == ["UP", "BG", "CL"]


def test_unknown_condition_named():
    metas, emb = dataset()
    with pytest.raises(DataError, match="'XX'"):
        per_condition_report(metas, emb, Protocol(("NM",), ("BG", "XX")))


def test_overall_is_probe_weighted():
    metas, emb = dataset(n_ids=6, conds=("NM", "BG"))
    extra = [SequenceMeta(f"{i:02d}", "CL", "090", f"{s}") for i in range(6) for s in range(3)]
    emb = np.vstack([emb, np.random.default_rng(9).normal(size=(18, emb.shape[1])) * 10])
    rep = per_condition_report(metas + extra, emb, Protocol(("NM",), ("BG", "CL")))
    hits = sum(c["rank1"] * c["eligible"] / 100 for c in rep.conditions)
    assert rep.overall["eligible"] == 6 + 18
    assert rep.overall["rank1"] == pytest.approx(100 * hits / 24)


def test_shuffled_condition_is_chance():
    n_ids, trials = 20, 200
    scores = []
    for seed in range(trials):
        rng = np.random.default_rng(seed)
        metas, emb = dataset(n_ids=n_ids, conds=("NM", "OK", "SH"), seed=seed)
        emb[2 * n_ids:] = emb[2 * n_ids:][rng.permutation(n_ids)]
        rep = per_condition_report(metas, emb, Protocol(("NM",), ("OK", "SH")))
        assert rep.conditions[0]["rank1"] == 100.0
        scores.append(rep.conditions[1]["rank1"])
    assert abs(np.mean(scores) - 100.0 / n_ids) < 1.5


def test_match_log():
    metas, emb = dataset(n_ids=4)
    rep = per_condition_report(metas, emb, Protocol(("NM",), ("BG",)), log_matches=True)
    assert len(rep.matches) == 4 and all(m["correct"] for m in rep.matches)


def test_csv_and_table():
    metas, emb = dataset()
    rep = per_condition_report(metas, emb, Protocol(("NM",), ("BG", "CL")), provenance={"modality_set": "sketch"})
    lines = rep.to_csv().splitlines()
    assert lines[0] == "condition,probes,eligible,rank1,rank5"
    assert [l.split(",")[0] for l in lines[1:]] == ["BG", "CL", "overall"]
    table = format_table(rep.to_json())
    assert table.splitlines()[0] == "modalities: sketch"
    assert "OA@R1" in table


# ---- cross-domain --------------------------------------------------------

def descriptor_set(seed, n_ids=8, s=3, c=5, conds=("NM", "BG")):
    rng = np.random.default_rng(seed)
    centres = rng.normal(size=(n_ids, s, c))
    metas, rows = [], []
    for cond in conds:
        for i in range(n_ids):
            metas.append(SequenceMeta(f"{i}", cond, "000", "0"))
            rows.append(centres[i] + 0.1 * rng.normal(size=(s, c)))
    parts = {"ske": np.array(rows), "par": np.array(rows)[:, :, ::-1].copy()}
    return DescriptorSet(metas, parts, DescriptorConfig(embed_dim=c, levels=(1, 2)))


def test_identity_head_equals_raw():
    ds = descriptor_set(0)
    head = metric.init_head(ds.parts, ["x"], 5, np.random.default_rng(0), (1, 2))
    proto = Protocol(("NM",), ("BG",))
    a = cross_domain_eval(head, ds, proto).to_json()
    b = per_condition_report(ds.metas, ds.raw_embeddings(), proto).to_json()
    assert a == b


def test_same_domain_matches_in_domain():
    ds = descriptor_set(1)
    labels = [m.subject for m in ds.metas]
    head, _ = metric.train(ds.parts, labels, metric.TrainConfig(P=4, K=2, iterations=30, embed_dim=4), (1, 2))
    proto = Protocol(("NM",), ("BG",))
    assert cross_domain_eval(head, ds, proto).to_json() == \
        per_condition_report(ds.metas, head.embed(ds.parts), proto).to_json()


def test_layout_mismatch_named():
    ds = descriptor_set(2)
    head = metric.init_head(ds.parts, ["x"], 5, np.random.default_rng(0), (1, 2))
    other = descriptor_set(3, c=6)
    with pytest.raises(DataError, match="'ske'.*channels"):
        cross_domain_eval(head, other, Protocol(("NM",), ("BG",)))
    fewer = DescriptorSet(ds.metas, {"ske": ds.parts["ske"]}, ds.config)
    with pytest.raises(DataError, match="'par'"):
        cross_domain_eval(head, fewer, Protocol(("NM",), ("BG",)))
