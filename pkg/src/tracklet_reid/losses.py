"""Per-camera discrimination, cross-camera association and the joint objective.

Labels are 1-based within each camera's label space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import model as M


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.7
    sigma: float = 2.0
    # None: max(1, T // 2).
    K: int | None = None
    # Association variants. Defaults: anchor excluded from the denominator,
    # same-camera tracklets included, unsquared distance in the exponent.
    include_self: bool = False
    cross_view_denominator: bool = False
    squared: bool = False

    def __post_init__(self):
        if not 0 <= self.lam <= 1:
            raise ValueError("lam must be in [0, 1]")
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.K is not None and self.K < 1:
            raise ValueError("K must be >= 1")

    def neighbours(self, num_cameras: int) -> int:
        return self.K if self.K is not None else default_k(num_cameras)


def default_k(num_cameras: int) -> int:
    return max(1, num_cameras // 2)


@dataclass
class Batch:
    """Column-wise batch samples: one row per frame."""
    frames: np.ndarray
    cameras: np.ndarray
    labels: np.ndarray
    tracklet_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.cameras)


@dataclass
class TrackletBatchView:
    means: np.ndarray          # (n, D)
    cameras: np.ndarray        # (n,)
    tracklet_ids: np.ndarray   # (n,)
    counts: np.ndarray         # frames per group
    group: np.ndarray          # sample -> group index

    @property
    def per_camera(self) -> dict[int, int]:
        cams, n = np.unique(self.cameras, return_counts=True)
        return dict(zip(cams.tolist(), n.tolist()))


def tracklet_view(features: np.ndarray, cameras, tracklet_ids) -> TrackletBatchView:
    """Group frame features by (camera, tracklet_id) and average them."""
    cameras = np.asarray(cameras)
    tracklet_ids = np.asarray(tracklet_ids)
    keys = np.stack([cameras, tracklet_ids], axis=1)
    uniq, group = np.unique(keys, axis=0, return_inverse=True)
    group = group.reshape(-1)
    counts = np.bincount(group, minlength=len(uniq))
    sums = np.zeros((len(uniq), features.shape[1]), dtype=features.dtype)
    np.add.at(sums, group, features)
    return TrackletBatchView(sums / counts[:, None], uniq[:, 0], uniq[:, 1], counts, group)


# ---------------------------------------------------------------------------
# Cross-entropy
# ---------------------------------------------------------------------------

def _ce_rows(logits: np.ndarray, idx: np.ndarray):
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(idx))
    loss = lse - z[rows, idx]
    prob = np.exp(z - lse[:, None])
    prob[rows, idx] -= 1.0
    return loss, prob


def ce_loss(logits, y: int) -> float:
    """Softmax cross-entropy of a single sample with 1-based label ``y``."""
    logits = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    if not 1 <= y <= len(logits):
        raise ValueError(f"label {y} outside 1..{len(logits)}")
    loss, _ = _ce_rows(logits[None, :], np.array([y - 1]))
    return float(loss[0])


def ce_loss_grad(logits, y: int) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=float)
    loss, grad = _ce_rows(logits[None, :], np.array([y - 1]))
    return float(loss[0]), grad[0]


# ---------------------------------------------------------------------------
# Per-camera tracklet discrimination
# ---------------------------------------------------------------------------

def pctd_loss_grad(features: np.ndarray, cameras, labels, params: M.ModelParams):
    """Mean per-sample CE, each sample scored in its own camera's label space.

    Returns ``(loss, d_features, d_branch)`` where ``d_branch`` maps branch
    tensor names to gradients.
    """
    cameras = np.asarray(cameras)
    labels = np.asarray(labels)
    n = len(cameras)
    if n == 0:
        raise ValueError("empty batch")
    total = 0.0
    d_feat = np.zeros_like(features)
    d_branch = {}
    for cam in np.unique(cameras):
        rows = np.flatnonzero(cameras == cam)
        f = features[rows]
        logits = M.branch_logits(params, f, int(cam))
        loss, g = _ce_rows(logits, labels[rows] - 1)
        if not np.all(np.isfinite(loss)):
            raise FloatingPointError("non-finite cross-entropy")
        total += float(loss.sum())
        g /= n
        w = params.tensors[f"branch{cam}.weight"]
        d_feat[rows] = g @ w.T
        d_branch[f"branch{cam}.weight"] = f.T @ g
        if f"branch{cam}.bias" in params.tensors:
            d_branch[f"branch{cam}.bias"] = g.sum(axis=0)
    return total / n, d_feat, d_branch


def pctd_loss(features, cameras, labels, params) -> float:
    return pctd_loss_grad(features, cameras, labels, params)[0]


# ---------------------------------------------------------------------------
# Cross-camera tracklet association
# ---------------------------------------------------------------------------

def cross_view_neighbours(dist: np.ndarray, cameras, tracklet_ids, i: int, K: int) -> np.ndarray:
    """Indices of the ``min(K, available)`` nearest tracklets from other cameras.

    Ties on distance go to the lower tracklet id.
    """
    cand = np.flatnonzero(np.asarray(cameras) != cameras[i])
    order = np.lexsort((np.asarray(tracklet_ids)[cand], dist[i, cand]))
    return cand[order[:K]]


def ccta_loss_grad(view: TrackletBatchView, K: int, sigma: float,
                   include_self: bool = False, cross_view_denominator: bool = False,
                   squared: bool = False) -> tuple[float, np.ndarray]:
    """Association loss over tracklet means; returns ``(loss, d_means)``.

    For each anchor, neighbours are its K nearest cross-camera tracklets and
    the loss is ``-log(sum_nbr exp(-d/2s^2) / sum_others exp(-d/2s^2))``
    with ``d`` the Euclidean distance. Averaged over anchors. Neighbour sets
    are treated as constant when differentiating.
    """
    s = view.means
    cams = np.asarray(view.cameras)
    ids = np.asarray(view.tracklet_ids)
    n = len(s)
    if len(np.unique(cams)) < 2:
        raise ValueError("association needs tracklets from at least two cameras")
    diff = s[:, None, :] - s[None, :, :]
    sq = (diff * diff).sum(axis=-1).astype(np.float64)
    dist = sq if squared else np.sqrt(sq)
    scale = 2.0 * sigma * sigma
    logits = -dist / scale

    cross = cams[:, None] != cams[None, :]
    order = np.lexsort((np.broadcast_to(ids, (n, n)), np.where(cross, dist, np.inf)), axis=-1)
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.broadcast_to(np.arange(n), (n, n)), axis=-1)
    k = np.minimum(K, cross.sum(axis=1))
    nbr = rank < k[:, None]

    den = ~np.eye(n, dtype=bool) if not include_self else np.ones((n, n), dtype=bool)
    if cross_view_denominator:
        den &= cross

    def masked_lse(mask):
        a = np.where(mask, logits, -np.inf)
        m = a.max(axis=1)
        return m + np.log(np.exp(a - m[:, None]).sum(axis=1))

    lse_n = masked_lse(nbr)
    lse_d = masked_lse(den)
    total = float((lse_d - lse_n).sum())
    # d loss_i / d dist_ij = (w_nbr - w_den) / scale
    coef = (np.where(nbr, np.exp(logits - lse_n[:, None]), 0.0)
            - np.where(den, np.exp(logits - lse_d[:, None]), 0.0)) / (scale * n)

    if squared:
        dd = 2.0 * coef
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            dd = np.where(dist > 0, coef / dist, 0.0)
    # d dist_ij / d s_i = +u_ij, d dist_ij / d s_j = -u_ij
    sym = dd + dd.T
    d_means = sym.sum(axis=1)[:, None] * s - sym @ s
    return total / n, d_means.astype(s.dtype, copy=False)


def ccta_loss(view: TrackletBatchView, K: int, sigma: float, **variants) -> float:
    return ccta_loss_grad(view, K, sigma, **variants)[0]


# ---------------------------------------------------------------------------
# Joint objective
# ---------------------------------------------------------------------------

@dataclass
class LossBreakdown:
    joint: float
    pctd: float
    ccta: float
    grads: dict[str, np.ndarray] = field(repr=False, default_factory=dict)


def joint_loss(params: M.ModelParams, batch: Batch, config: LossConfig,
               lam: float | None = None, need_ccta: bool = True,
               single_head: bool = False) -> LossBreakdown:
    """``(1 - lam) * pctd + lam * ccta`` on one batch, with parameter gradients.

    Both terms come from the same forward pass. Branch tensors only receive
    gradient through the discrimination term. With ``single_head`` every
    sample is scored by branch 1 and ``batch.labels`` must already be global.
    """
    lam = config.lam if lam is None else lam
    features, cache = M.forward(params, batch.frames, keep_cache=True)
    head_cams = np.ones_like(batch.cameras) if single_head else batch.cameras
    pctd, d_feat, d_branch = pctd_loss_grad(features, head_cams, batch.labels, params)
    d_feat = d_feat * (1.0 - lam)

    ccta = math.nan
    num_cams = len(np.unique(batch.cameras))
    if num_cams > 1 and (need_ccta or lam > 0):
        view = tracklet_view(features, batch.cameras, batch.tracklet_ids)
        K = config.neighbours(num_cams)
        ccta, d_means = ccta_loss_grad(view, K, config.sigma, config.include_self,
                                       config.cross_view_denominator, config.squared)
        if lam > 0:
            d_feat = d_feat + lam * (d_means / view.counts[:, None])[view.group]
    elif lam > 0:
        raise ValueError("association term needs at least two cameras in the batch")

    grads = params.zeros_like()
    for k, g in d_branch.items():
        grads[k] += (1.0 - lam) * g
    M.backward(params, cache, d_feat, grads)
    joint = (1.0 - lam) * pctd + (lam * ccta if lam > 0 else 0.0)
    return LossBreakdown(joint, pctd, ccta, grads)
