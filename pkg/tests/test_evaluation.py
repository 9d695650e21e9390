import csv
import io
import logging

import numpy as np
import pytest

from tracklet_reid import evaluation as E
from tracklet_reid import model as M
from tracklet_reid.world import TrackletRecord


# --- oracles ---------------------------------------------------------------------

def sort_oracle(query, gallery):
    d = [(sum((g[j] - query[j]) ** 2 for j in range(len(query))) ** 0.5, i)
         for i, g in enumerate(gallery)]
    return [i for _, i in sorted(d)]


def cmc_oracle(rankings, relevance):
    firsts = []
    for order, rel in zip(rankings, relevance):
        for pos, g in enumerate(order):
            if rel[g]:
                firsts.append(pos + 1)
                break
    n = max(len(o) for o in rankings)
    return [sum(f <= k for f in firsts) / len(firsts) for k in range(1, n + 1)]


def ap_oracle(order, rel):
    positions = [p + 1 for p, g in enumerate(order) if rel[g]]
    total = 0.0
    for p in positions:
        total += sum(1 for q in positions if q <= p) / p
    return total / len(positions)


def random_queries(seed, n_queries, size):
    rng = np.random.default_rng(seed)
    rankings, relevance = [], []
    for _ in range(n_queries):
        n = int(rng.integers(1, size + 1))
        rel = rng.random(n) < 0.3
        rel[rng.integers(n)] = True
        rankings.append(rng.permutation(n))
        relevance.append(rel)
    return rankings, relevance


# --- rank_gallery ---------------------------------------------------------------

def test_rank_single_item():
    assert E.rank_gallery(np.zeros(2), np.ones((1, 2))).tolist() == [0]


def test_rank_distances_example():
    gallery = np.array([[3.0, 0.0], [0.0, 1.0], [2.0, 0.0]])
    assert E.rank_gallery(np.zeros(2), gallery).tolist() == [1, 2, 0]


def test_rank_ties_by_index():
    gallery = np.array([[1.0], [-1.0], [1.0], [0.5]])
    assert E.rank_gallery(np.zeros(1), gallery).tolist() == [3, 0, 1, 2]


@pytest.mark.parametrize("seed", range(5))
def test_rank_matches_sort_oracle(seed):
    rng = np.random.default_rng(seed)
    q, g = rng.standard_normal(4), rng.standard_normal((20, 4))
    assert E.rank_gallery(q, g).tolist() == sort_oracle(q.tolist(), g.tolist())


def test_rank_empty_gallery():
    with pytest.raises(ValueError):
        E.rank_gallery(np.zeros(3), np.zeros((0, 3)))


# --- cmc / mAP ---------------------------------------------------------------------

def test_cmc_all_first():
    r = [np.array([0, 1]), np.array([1, 0])]
    rel = [np.array([True, False]), np.array([False, True])]
    assert E.cmc(r, rel)[0] == 1.0


def test_cmc_ranks_one_and_three():
    r = [np.arange(4), np.arange(4)]
    rel = [np.array([1, 0, 0, 0], bool), np.array([0, 0, 1, 0], bool)]
    assert E.cmc(r, rel).tolist() == [0.5, 0.5, 1.0, 1.0]


@pytest.mark.parametrize("seed", range(3))
def test_cmc_matches_oracle(seed):
    r, rel = random_queries(seed, 50, 20)
    out = E.cmc(r, rel)
    np.testing.assert_allclose(out, cmc_oracle(r, rel), rtol=0, atol=1e-12)
    assert np.all(np.diff(out) >= 0) and out[-1] == 1.0


def test_cmc_excludes_query_without_match(caplog):
    r = [np.arange(2), np.arange(2)]
    rel = [np.array([True, False]), np.array([False, False])]
    with caplog.at_level(logging.WARNING):
        assert E.cmc(r, rel).tolist() == [1.0, 1.0]
    assert "no relevant" in caplog.text


def test_map_perfect():
    r = [np.array([2, 0, 1, 3])]
    rel = [np.array([True, False, True, False])]
    assert E.mean_average_precision(r, rel) == 1.0


def test_map_single_relevant_at_two():
    r = [np.arange(4)]
    rel = [np.array([0, 1, 0, 0], bool)]
    assert E.mean_average_precision(r, rel) == 0.5


@pytest.mark.parametrize("seed", range(3))
def test_map_matches_oracle(seed):
    r, rel = random_queries(100 + seed, 10, 20)
    expected = np.mean([ap_oracle(o.tolist(), x.tolist()) for o, x in zip(r, rel)])
    got = E.mean_average_precision(r, rel)
    assert abs(got - expected) <= 1e-12
    assert 0.0 <= got <= 1.0


# --- protocol ----------------------------------------------------------------------

def make_tracklets(seed=0, ids=5, cams=3, frames=4, dim=6):
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((ids, dim))
    out = []
    for c in range(1, cams + 1):
        for i in range(ids):
            fr = (centers[i] + 0.05 * rng.standard_normal((frames, dim))).astype(np.float32)
            out.append(TrackletRecord(len(out), c, i, i, 0.0, 1.0, np.zeros((frames, 2)),
                                      np.arange(frames, dtype=float), fr))
    return out


def test_embedding_is_frame_mean():
    p = M.init(M.ModelConfig(6, (5,), 3, ()), 0, dtype=np.float64)
    trs = make_tracklets()
    emb = E.embed_tracklets(p, trs)
    for tr, e in zip(trs, emb):
        np.testing.assert_allclose(e, M.forward(p, tr.frames).mean(axis=0), atol=1e-6)


def test_gallery_is_cross_camera_only():
    trs = make_tracklets()
    emb = np.stack([t.frames.mean(axis=0) for t in trs])
    cams = [t.camera_id for t in trs]
    ids = [t.identity_id for t in trs]
    rankings, relevance, galleries = E.retrieval(emb, cams, ids)
    for q, gal in enumerate(galleries):
        assert q not in gal
        assert all(cams[g] != cams[q] for g in gal)
        assert sorted(rankings[q].tolist()) == list(range(len(gal)))
        assert relevance[q].any()


def test_identical_copies_in_same_camera_not_matched():
    # a same-camera duplicate would be the nearest item if it were allowed
    trs = make_tracklets(ids=3, cams=2)
    emb = np.stack([t.frames.mean(axis=0) for t in trs])
    emb = np.concatenate([emb, emb[:1]])
    cams = [t.camera_id for t in trs] + [1]
    ids = [t.identity_id for t in trs] + [99]
    res = E.retrieval(emb, cams, ids)
    assert res[0][0][0] != len(emb) - 1
    assert len(emb) - 1 not in res[2][0]


def test_evaluate_read_only_and_separable():
    p = M.identity_init(6)
    trs = make_tracklets()
    before = p.digest()
    res = E.evaluate(p, trs, {"mode": "x", "seed": 1})
    assert p.digest() == before
    assert res.rank1 == 1.0 and res.map == 1.0
    assert len(res.cmc) == 10 and res.cmc[-1] == 1.0
    assert res.metadata == {"mode": "x", "seed": 1}


def test_result_rank_clamps():
    r = E.EvalResult(np.array([0.25, 0.5, 1.0]), 0.4)
    assert r.rank(1) == 0.25 and r.rank(20) == 1.0


def test_results_csv_layout():
    rs = [E.EvalResult(np.linspace(0.1, 1.0, 30), 0.123456, {"mode": m, "seed": s})
          for s in (1, 0) for m in ("taudl", "jcc")]
    text = E.results_csv(rs, "mode")
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["mode", "seed", "rank1", "rank5", "rank10", "rank20", "map"]
    assert [r[:2] for r in rows[1:]] == [["jcc", "0"], ["jcc", "1"], ["taudl", "0"],
                                         ["taudl", "1"]]
    assert rows[1][2] == "10.0000" and rows[1][-1] == "12.3456"
    assert E.results_csv(list(reversed(rs)), "mode") == text


def test_mean_rank1():
    rs = [E.EvalResult(np.array([a, 1.0]), 0.0, {"rate": r})
          for r, a in ((0.0, 0.5), (0.0, 0.7), (0.5, 0.2))]
    out = E.mean_rank1(rs, "rate")
    assert out[0.0] == pytest.approx(60.0) and out[0.5] == pytest.approx(20.0)


# --- runners -----------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_world():
    from tracklet_reid.world import WorldConfig, generate_world
    return generate_world(WorldConfig(num_cameras=2, num_identities=14, num_test_identities=6,
                                      appearance_dim=3, frame_dim=8, mean_dwell=6.0,
                                      dwell_std=1.0, sim_duration=200.0, arrival_rate=0.3,
                                      frag_rate=2.0, frame_rate=2.0, seed=2))


SMALL_TRAIN = dict(tracklets_per_camera=3, frames_per_tracklet=2, steps=15,
                   hidden_dims=(8,), feature_dim=6, learning_rate=1e-2)


def test_ablation_one_result_per_mode_and_seed(small_world):
    from tracklet_reid.sstt import SsttConfig
    from tracklet_reid.trainer import TrainConfig
    sstt = SsttConfig(small_world.config.max_dwell + 0.5)
    rs = E.run_ablation(small_world, sstt, TrainConfig(**SMALL_TRAIN), seeds=[0, 1])
    assert [(r.metadata["seed"], r.metadata["mode"]) for r in rs] == [
        (s, m) for s in (0, 1) for m in ("jcc", "pctd_only", "taudl")]


def test_robustness_rate_zero_is_plain_taudl(small_world):
    from tracklet_reid.sstt import SsttConfig
    from tracklet_reid.trainer import TrainConfig
    sstt = SsttConfig(small_world.config.max_dwell + 0.5)
    cfg = TrainConfig(**SMALL_TRAIN)
    rob = E.run_robustness(small_world, sstt, cfg, seeds=[3], rates=[0.0, 0.5])
    abl = E.run_ablation(small_world, sstt, cfg, seeds=[3], modes=["taudl"])
    assert np.array_equal(rob[0].cmc, abl[0].cmc) and rob[0].map == abl[0].map
    assert rob[0].metadata["duplication"] == 0.0
    assert rob[1].metadata["duplication"] > 0.0
    rows = list(csv.DictReader(io.StringIO(E.duplication_csv(rob))))
    assert [(r["rate"], r["camera"]) for r in rows] == [
        ("0.0", "1"), ("0.0", "2"), ("0.5", "1"), ("0.5", "2")]
    assert int(rows[0]["labels"]) == rob[0].metadata["label_counts"][1]
