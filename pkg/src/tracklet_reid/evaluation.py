"""Cross-camera retrieval metrics and experiment runners."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import model as M
from .sstt import LabelledDataset, SsttConfig, duplication_rate, inject_duplication, label_world
from .trainer import TrainConfig, train
from .world import TrackletRecord, World

log = logging.getLogger(__name__)

RANKS = (1, 5, 10, 20)


@dataclass
class EvalResult:
    cmc: np.ndarray
    map: float
    metadata: dict = field(default_factory=dict)

    def rank(self, k: int) -> float:
        if len(self.cmc) == 0:
            return 0.0
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    @property
    def rank1(self) -> float:
        return self.rank(1)


def embed_tracklets(params: M.ModelParams, tracklets: Sequence[TrackletRecord]) -> np.ndarray:
    """Tracklet embedding: mean feature over all of its frames."""
    frames = np.concatenate([tr.frames for tr in tracklets])
    feats = M.forward(params, frames).astype(np.float64)
    counts = np.array([len(tr.frames) for tr in tracklets])
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return np.add.reduceat(feats, starts, axis=0) / counts[:, None]


def rank_gallery(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Gallery indices by ascending Euclidean distance; ties keep index order."""
    gallery = np.asarray(gallery, dtype=float)
    if len(gallery) == 0:
        raise ValueError("empty gallery")
    dist = np.sqrt(((gallery - np.asarray(query, dtype=float)[None, :]) ** 2).sum(axis=1))
    return np.argsort(dist, kind="stable")


def _valid(rankings, relevance):
    pairs = []
    for q, (order, rel) in enumerate(zip(rankings, relevance)):
        rel = np.asarray(rel, dtype=bool)
        if not rel.any():
            log.warning("query %d has no relevant gallery item; excluded", q)
            continue
        pairs.append((np.asarray(order), rel))
    return pairs


def cmc(rankings: Sequence[np.ndarray], relevance: Sequence[np.ndarray]) -> np.ndarray:
    """cmc[k-1] = fraction of queries whose first relevant hit is at rank <= k."""
    pairs = _valid(rankings, relevance)
    if not pairs:
        return np.zeros(0)
    length = max(len(order) for order, _ in pairs)
    hits = np.zeros(length)
    for order, rel in pairs:
        first = int(np.argmax(rel[order]))
        hits[first] += 1
    return np.cumsum(hits) / len(pairs)


def mean_average_precision(rankings, relevance) -> float:
    pairs = _valid(rankings, relevance)
    if not pairs:
        return 0.0
    aps = []
    for order, rel in pairs:
        hits = rel[order]
        pos = np.flatnonzero(hits) + 1
        aps.append(float(np.mean(np.arange(1, len(pos) + 1) / pos)))
    return float(np.mean(aps))


def retrieval(embeddings: np.ndarray, cameras, identities):
    """Every tracklet queries all tracklets from other cameras.

    Returns per-query ``(rankings, relevance)`` with relevance indexed in
    gallery order, plus the gallery index lists.
    """
    cameras = np.asarray(cameras)
    identities = np.asarray(identities)
    rankings, relevance, galleries = [], [], []
    for q in range(len(embeddings)):
        gal = np.flatnonzero(cameras != cameras[q])
        rankings.append(rank_gallery(embeddings[q], embeddings[gal]))
        relevance.append(identities[gal] == identities[q])
        galleries.append(gal)
    return rankings, relevance, galleries


def evaluate(params: M.ModelParams, tracklets: Sequence[TrackletRecord],
             metadata: dict | None = None) -> EvalResult:
    emb = embed_tracklets(params, tracklets)
    rankings, relevance, _ = retrieval(emb, [t.camera_id for t in tracklets],
                                       [t.identity_id for t in tracklets])
    return EvalResult(cmc(rankings, relevance), mean_average_precision(rankings, relevance),
                      dict(metadata or {}))


def run_ablation(world: World, sstt: SsttConfig, config: TrainConfig, seeds: Iterable[int],
                 modes: Sequence[str] = ("jcc", "pctd_only", "taudl")) -> list[EvalResult]:
    """Train and evaluate every mode on the same labelled data for each seed."""
    dataset = label_world(world, sstt)
    test = world.test_tracklets()
    out = []
    for seed in seeds:
        for mode in modes:
            cfg = dataclasses.replace(config, mode=mode, seed=seed)
            state = train(dataset, cfg)
            res = evaluate(state.params, test, {"mode": mode, "seed": seed})
            log.info("ablation seed=%d mode=%s rank1=%.4f map=%.4f", seed, mode,
                     res.rank1, res.map)
            out.append(res)
    return out


def run_robustness(world: World, sstt: SsttConfig, config: TrainConfig, seeds: Iterable[int],
                   rates: Sequence[float] = (0.0, 0.1, 0.2, 0.3, 0.5)) -> list[EvalResult]:
    """Full joint training per injected duplication rate, seeds shared across rates."""
    base = label_world(world, sstt)
    gt = world.ground_truth()
    test = world.test_tracklets()
    cfg_base = dataclasses.replace(config, mode="taudl")
    out = []
    for seed in seeds:
        for rate in rates:
            data, shortfall = inject_duplication(base, rate, world, seed)
            per_cam, realized = duplication_rate(data, gt)
            state = train(data, dataclasses.replace(cfg_base, seed=seed))
            res = evaluate(state.params, test, {
                "rate": rate, "seed": seed, "mode": "taudl",
                "duplication": realized, "duplication_per_camera": per_cam,
                "shortfall": sum(shortfall.values()),
                "label_counts": data.label_counts})
            log.info("robustness seed=%d rate=%.2f rank1=%.4f", seed, rate, res.rank1)
            out.append(res)
    return out


def results_csv(results: Sequence[EvalResult], key: str) -> str:
    """Table rows: ``key, seed, rank1, rank5, rank10, rank20, map`` in percent."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([key, "seed", "rank1", "rank5", "rank10", "rank20", "map"])
    rows = sorted(results, key=lambda r: (str(r.metadata.get(key)), r.metadata.get("seed", 0)))
    for r in rows:
        w.writerow([r.metadata.get(key), r.metadata.get("seed"),
                    *(f"{100 * r.rank(k):.4f}" for k in RANKS), f"{100 * r.map:.4f}"])
    return buf.getvalue()


def duplication_csv(results: Sequence[EvalResult]) -> str:
    """Per-camera rows ``rate, seed, camera, labels, duplication`` from robustness runs."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rate", "seed", "camera", "labels", "duplication"])
    rows = sorted(results, key=lambda r: (r.metadata["rate"], r.metadata.get("seed", 0)))
    for r in rows:
        m = r.metadata
        for cam in sorted(m["label_counts"]):
            w.writerow([m["rate"], m.get("seed"), cam, m["label_counts"][cam],
                        f"{m['duplication_per_camera'][cam]:.6f}"])
    return buf.getvalue()


def mean_rank1(results: Sequence[EvalResult], key: str) -> dict:
    groups: dict = {}
    for r in results:
        groups.setdefault(r.metadata[key], []).append(100 * r.rank1)
    return {k: float(np.mean(v)) for k, v in groups.items()}
