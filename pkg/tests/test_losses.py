import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tracklet_reid import losses as L
from tracklet_reid import model as M

from conftest import central_diff, max_rel_error


# ---------------------------------------------------------------------------
# Independent oracles: plain Python loops, no shared code with the library.
# ---------------------------------------------------------------------------

def ce_oracle(logits, y):
    return -math.log(math.exp(logits[y - 1]) / sum(math.exp(v) for v in logits))


def ccta_oracle(points, cameras, ids, K, sigma, include_self=False):
    n = len(points)
    total = 0.0
    for i in range(n):
        d = [math.sqrt(sum((a - b) ** 2 for a, b in zip(points[i], points[j]))) for j in range(n)]
        cross = sorted((d[j], ids[j], j) for j in range(n) if cameras[j] != cameras[i])
        nbr = [j for _, _, j in cross[:K]]
        num = sum(math.exp(-d[j] / (2 * sigma ** 2)) for j in nbr)
        den = sum(math.exp(-d[j] / (2 * sigma ** 2)) for j in range(n) if include_self or j != i)
        total += -math.log(num / den)
    return total / n


def view_of(points, cameras, ids=None):
    points = np.asarray(points, dtype=float)
    ids = np.arange(len(points)) if ids is None else np.asarray(ids)
    return L.tracklet_view(points, np.asarray(cameras), ids)


def small_params(rng, d_in=4, hidden=(5,), d=3, classes=(3, 4), dtype=np.float64):
    cfg = M.ModelConfig(d_in, hidden, d, classes)
    p = M.init(cfg, int(rng.integers(1 << 30)), dtype=dtype)
    for k in p.tensors:
        if k.endswith("bias"):
            p.tensors[k] = rng.standard_normal(p.tensors[k].shape) * 0.1
    return p


def random_batch(rng, n_cams=2, tracklets=2, frames=2, d_in=4, classes=(3, 4)):
    cams, labels, tids = [], [], []
    tid = 0
    for c in range(1, n_cams + 1):
        for _ in range(tracklets):
            y = int(rng.integers(1, classes[c - 1] + 1))
            cams += [c] * frames
            labels += [y] * frames
            tids += [tid] * frames
            tid += 1
    return L.Batch(rng.standard_normal((len(cams), d_in)), np.array(cams), np.array(labels),
                   np.array(tids))


# ---------------------------------------------------------------------------
# Cross-entropy
# ---------------------------------------------------------------------------

def test_ce_uniform_logits_is_log_m():
    assert L.ce_loss(np.zeros(4), 2) == pytest.approx(math.log(4), abs=1e-12)


def test_ce_confident_matches_scalar_oracle():
    expected = ce_oracle([10.0, -10.0], 1)
    assert expected == pytest.approx(2.06e-9, rel=1e-2)
    assert L.ce_loss([10.0, -10.0], 1) == pytest.approx(expected, rel=1e-6)


def test_ce_large_logits_stay_finite():
    v = L.ce_loss([1000.0, 0.0], 1)
    assert math.isfinite(v) and v == pytest.approx(0.0, abs=1e-300)
    assert L.ce_loss([1000.0, 0.0], 2) == pytest.approx(1000.0)


def test_ce_rejects_bad_input():
    with pytest.raises(ValueError):
        L.ce_loss([np.nan, 1.0], 1)
    with pytest.raises(ValueError):
        L.ce_loss([0.0, 1.0], 3)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.data())
def test_ce_nonnegative(logits, data):
    y = data.draw(st.integers(1, len(logits)))
    assert L.ce_loss(logits, y) >= 0


def test_ce_gradient_finite_differences(rng):
    z = rng.standard_normal(5)
    _, g = L.ce_loss_grad(z, 3)
    num = central_diff(lambda: L.ce_loss(z, 3), z)
    assert max_rel_error(g, num) < 1e-4


# ---------------------------------------------------------------------------
# Per-camera discrimination
# ---------------------------------------------------------------------------

def test_pctd_single_sample_equals_ce(rng):
    p = small_params(rng)
    f = rng.standard_normal((1, 3))
    logits = M.branch_logits(p, f, 2)[0]
    assert L.pctd_loss(f, [2], [4], p) == pytest.approx(L.ce_loss(logits, 4), abs=1e-14)


def test_pctd_copies_equal_single(rng):
    p = small_params(rng)
    f = rng.standard_normal((1, 3))
    one = L.pctd_loss(f, [1], [2], p)
    many = L.pctd_loss(np.repeat(f, 5, axis=0), [1] * 5, [2] * 5, p)
    assert many == pytest.approx(one, abs=1e-14)


def test_pctd_matches_brute_force_sum(rng):
    p = small_params(rng)
    f = rng.standard_normal((6, 3))
    cams = [1, 1, 1, 2, 2, 2]
    labels = [1, 3, 2, 4, 1, 2]
    total = 0.0
    for row, c, y in zip(f, cams, labels):
        w = p.tensors[f"branch{c}.weight"]
        logits = [sum(row[a] * w[a, k] for a in range(3)) for k in range(w.shape[1])]
        total += ce_oracle(logits, y)
    assert L.pctd_loss(f, cams, labels, p) == pytest.approx(total / 6, abs=1e-12)


def test_pctd_empty_batch_errors(rng):
    p = small_params(rng)
    with pytest.raises(ValueError):
        L.pctd_loss(np.zeros((0, 3)), [], [], p)


def test_pctd_gradients_finite_differences(rng):
    p = small_params(rng)
    f = rng.standard_normal((6, 3))
    cams, labels = np.array([1, 1, 2, 2, 2, 1]), np.array([1, 3, 4, 1, 2, 2])
    _, d_f, d_b = L.pctd_loss_grad(f, cams, labels, p)
    fn = lambda: L.pctd_loss(f, cams, labels, p)
    assert max_rel_error(d_f, central_diff(fn, f)) < 1e-4
    for name in ("branch1.weight", "branch2.weight"):
        assert max_rel_error(d_b[name], central_diff(fn, p.tensors[name])) < 1e-4


# ---------------------------------------------------------------------------
# Cross-camera association
# ---------------------------------------------------------------------------

def test_ccta_two_singletons_is_zero():
    v = view_of([[0.0, 0.0], [1.0, 2.0]], [1, 2])
    assert L.ccta_loss(v, 1, 2.0) == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("T,per_cam,K", [(2, 2, 1), (3, 2, 1), (4, 3, 2), (3, 1, 2)])
def test_ccta_coincident_means(T, per_cam, K):
    n = T * per_cam
    cams = np.repeat(np.arange(1, T + 1), per_cam)
    v = view_of(np.ones((n, 3)) * 0.7, cams)
    assert L.ccta_loss(v, K, 2.0) == pytest.approx(-math.log(K / (n - 1)), abs=1e-9)


def test_ccta_three_tracklet_hand_example():
    # camera 1 at 0.0 and 4.0, camera 2 at 0.1; K=1, sigma=2 -> scale 8.
    e = lambda d: math.exp(-d / 8.0)
    a = -math.log(e(0.1) / (e(0.1) + e(4.0)))
    b = -math.log(e(3.9) / (e(4.0) + e(3.9)))
    c = -math.log(e(0.1) / (e(0.1) + e(3.9)))
    expected = (a + b + c) / 3
    v = view_of([[0.0], [4.0], [0.1]], [1, 1, 2])
    loss, d_means = L.ccta_loss_grad(v, 1, 2.0)
    assert loss == pytest.approx(expected, abs=1e-12)
    assert loss == pytest.approx(ccta_oracle([[0.0], [4.0], [0.1]], [1, 1, 2], [0, 1, 2], 1, 2.0),
                                 abs=1e-12)
    pts = v.means
    num = central_diff(lambda: L.ccta_loss(L.TrackletBatchView(pts, v.cameras, v.tracklet_ids,
                                                               v.counts, v.group), 1, 2.0), pts)
    assert max_rel_error(d_means, num) < 1e-4


@pytest.mark.parametrize("seed", range(6))
def test_ccta_matches_double_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 7))
    cams = rng.integers(1, 4, size=n)
    cams[:2] = [1, 2]
    pts = rng.standard_normal((n, int(rng.integers(1, 6)))) * 2
    ids = rng.permutation(100)[:n]
    K = int(rng.integers(1, 3))
    avail = min(int((cams != c).sum()) for c in cams)
    K = min(K, avail)
    v = view_of(pts, cams, ids)
    # the view reorders by (camera, id); the oracle works on the same order
    expected = ccta_oracle(v.means.tolist(), v.cameras.tolist(), v.tracklet_ids.tolist(), K, 2.0)
    assert L.ccta_loss(v, K, 2.0) == pytest.approx(expected, abs=1e-10)


def test_ccta_k_truncated_to_available():
    v = view_of([[0.0], [1.0], [5.0]], [1, 1, 2])
    # camera 2's anchor has two cross-view candidates, camera 1's only one
    assert L.ccta_loss(v, 5, 2.0) == pytest.approx(
        ccta_oracle([[0.0], [1.0], [5.0]], [1, 1, 2], [0, 1, 2], 5, 2.0), abs=1e-12)


def test_ccta_neighbour_ties_use_lower_tracklet_id():
    dist = np.array([[0.0, 1.0, 1.0], [1.0, 0.0, 2.0], [1.0, 2.0, 0.0]])
    nb = L.cross_view_neighbours(dist, np.array([1, 2, 2]), np.array([5, 9, 3]), 0, 1)
    assert nb.tolist() == [2]


def test_ccta_single_camera_errors():
    with pytest.raises(ValueError):
        L.ccta_loss(view_of([[0.0], [1.0]], [1, 1]), 1, 2.0)


def test_ccta_include_self_flag():
    pts, cams = [[0.0], [4.0], [0.1]], [1, 1, 2]
    v = view_of(pts, cams)
    assert L.ccta_loss(v, 1, 2.0, include_self=True) == pytest.approx(
        ccta_oracle(pts, cams, [0, 1, 2], 1, 2.0, include_self=True), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(-5, 5))
def test_ccta_translation_invariant_and_nonnegative(seed, shift):
    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((6, 3))
    cams = np.array([1, 1, 2, 2, 3, 3])
    a = L.ccta_loss(view_of(pts, cams), 1, 2.0)
    b = L.ccta_loss(view_of(pts + shift, cams), 1, 2.0)
    assert a >= 0
    assert b == pytest.approx(a, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_losses_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    p = small_params(rng)
    b = random_batch(rng)
    perm = rng.permutation(len(b))
    pb = L.Batch(b.frames[perm], b.cameras[perm], b.labels[perm], b.tracklet_ids[perm])
    cfg = L.LossConfig()
    x = L.joint_loss(p, b, cfg)
    y = L.joint_loss(p, pb, cfg)
    assert y.pctd == pytest.approx(x.pctd, abs=1e-12)
    assert y.ccta == pytest.approx(x.ccta, abs=1e-12)


# ---------------------------------------------------------------------------
# Joint objective
# ---------------------------------------------------------------------------

def test_joint_lambda_zero_is_pctd(rng):
    p = small_params(rng)
    b = random_batch(rng)
    out = L.joint_loss(p, b, L.LossConfig(lam=0.0))
    f = M.forward(p, b.frames)
    assert out.joint == L.pctd_loss(f, b.cameras, b.labels, p)


def test_joint_lambda_one_is_ccta_and_branch_grads_zero(rng):
    p = small_params(rng)
    b = random_batch(rng)
    out = L.joint_loss(p, b, L.LossConfig(lam=1.0))
    f = M.forward(p, b.frames)
    v = L.tracklet_view(f, b.cameras, b.tracklet_ids)
    assert out.joint == pytest.approx(L.ccta_loss(v, 1, 2.0), abs=1e-12)
    for name, g in out.grads.items():
        if name.startswith("branch"):
            assert not g.any()


def test_joint_weighting(rng):
    p = small_params(rng)
    b = random_batch(rng)
    out = L.joint_loss(p, b, L.LossConfig(lam=0.7))
    assert out.joint == pytest.approx(0.3 * out.pctd + 0.7 * out.ccta, abs=1e-12)


def test_joint_on_three_tracklet_example():
    # identity network so features are the frames themselves
    p = M.identity_init(1)
    p = M.ModelParams(M.ModelConfig(1, (), 1, (2, 1), "identity"),
                      {**p.tensors, "branch1.weight": np.array([[0.5, -0.25]]),
                       "branch2.weight": np.array([[1.5]])})
    b = L.Batch(np.array([[0.0], [4.0], [0.1]]), np.array([1, 1, 2]), np.array([1, 2, 1]),
                np.array([0, 1, 2]))
    cfg = L.LossConfig(lam=0.7, K=1)
    out = L.joint_loss(p, b, cfg)
    pctd = (ce_oracle([0.0, -0.0], 1) + ce_oracle([2.0, -1.0], 2) + ce_oracle([0.15], 1)) / 3
    ccta = ccta_oracle([[0.0], [4.0], [0.1]], [1, 1, 2], [0, 1, 2], 1, 2.0)
    assert out.joint == pytest.approx(0.3 * pctd + 0.7 * ccta, abs=1e-12)


@pytest.mark.parametrize("seed,lam", [(0, 0.7), (1, 0.3), (2, 1.0), (3, 0.0)])
def test_joint_gradients_finite_differences(seed, lam):
    rng = np.random.default_rng(seed)
    p = small_params(rng, d_in=4, hidden=(5,), d=3, classes=(3, 4, 2))
    b = random_batch(rng, n_cams=3, tracklets=2, frames=2, classes=(3, 4, 2))
    cfg = L.LossConfig(lam=lam)
    out = L.joint_loss(p, b, cfg)
    for name, t in p.tensors.items():
        num = central_diff(lambda: L.joint_loss(p, b, cfg).joint, t)
        assert max_rel_error(out.grads[name], num) < 1e-4, name


def test_joint_squared_variant_gradients(rng):
    p = small_params(rng)
    b = random_batch(rng)
    cfg = L.LossConfig(lam=0.5, squared=True, cross_view_denominator=True)
    out = L.joint_loss(p, b, cfg)
    for name, t in p.tensors.items():
        num = central_diff(lambda: L.joint_loss(p, b, cfg).joint, t)
        assert max_rel_error(out.grads[name], num) < 1e-4, name


def test_default_k():
    assert [L.default_k(t) for t in (1, 2, 3, 4, 5, 6)] == [1, 1, 1, 2, 2, 3]
