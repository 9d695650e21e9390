"""Sparse space-time tracklet sampling and per-camera label assignment."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .world import TrackletRecord, World

log = logging.getLogger(__name__)

DATASET_FORMAT = "tracklet-reid-dataset"
DATASET_VERSION = 1


@dataclass(frozen=True)
class SsttConfig:
    temporal_gap: float
    spatial_min_dist: float = 0.0
    # None: earliest tracklet start time.
    start_offset: float | None = None

    def __post_init__(self):
        if self.temporal_gap <= 0:
            raise ValueError("temporal_gap must be > 0")
        if self.spatial_min_dist < 0:
            raise ValueError("spatial_min_dist must be >= 0")

    def check_against_dwell(self, mean_dwell: float) -> None:
        if self.temporal_gap <= mean_dwell:
            log.warning("temporal gap %.3g <= mean dwell %.3g: expect ID duplication",
                        self.temporal_gap, mean_dwell)


@dataclass(frozen=True)
class LabelledTracklet:
    tracklet: TrackletRecord
    camera_id: int
    label: int


@dataclass
class LabelledDataset:
    per_camera: dict[int, list[LabelledTracklet]]

    def __post_init__(self):
        for cam, items in self.per_camera.items():
            if not items:
                raise ValueError(f"camera {cam} has no labelled tracklets")
            labels = sorted(it.label for it in items)
            if labels != list(range(1, len(items) + 1)):
                raise ValueError(f"camera {cam}: labels must be exactly 1..M_t")

    @property
    def num_cameras(self) -> int:
        return len(self.per_camera)

    @property
    def cameras(self) -> list[int]:
        return sorted(self.per_camera)

    @property
    def label_counts(self) -> dict[int, int]:
        return {cam: len(items) for cam, items in sorted(self.per_camera.items())}

    def items(self):
        for cam in self.cameras:
            yield from self.per_camera[cam]


def _earliest_start(tracklets_by_camera) -> float | None:
    starts = [tr.start_time for trs in tracklets_by_camera.values() for tr in trs]
    return min(starts) if starts else None


def temporal_sample(tracklets_by_camera: Mapping[int, Sequence[TrackletRecord]],
                    P: float, start_offset: float | None = None
                    ) -> dict[int, list[tuple[int, float, list[TrackletRecord]]]]:
    """Active tracklets at instants ``start_offset + i * P``, per camera.

    Returns ``{camera: [(i, S_i, active), ...]}`` keeping only instants with at
    least one active tracklet.
    """
    if P <= 0:
        raise ValueError("P must be > 0")
    if start_offset is None:
        start_offset = _earliest_start(tracklets_by_camera)
    if start_offset is None:
        return {}
    out = {}
    for cam, trs in sorted(tracklets_by_camera.items()):
        instants = {}
        for tr in trs:
            # Instants i with start <= S_i <= end.
            lo = max(0, math.ceil((tr.start_time - start_offset) / P - 1e-12))
            hi = math.floor((tr.end_time - start_offset) / P + 1e-12)
            for i in range(lo, hi + 1):
                s = start_offset + i * P
                if tr.start_time <= s <= tr.end_time:
                    instants.setdefault(i, []).append(tr)
        out[cam] = [(i, start_offset + i * P, sorted(instants[i], key=lambda t: t.tracklet_id))
                    for i in sorted(instants)]
    return out


def spatial_priority(tr: TrackletRecord):
    return (-len(tr), tr.start_time, tr.tracklet_id)


def spatial_filter(cooccurring: Sequence[TrackletRecord], d_min: float,
                   at_time: float | None = None) -> list[TrackletRecord]:
    """Greedy retention of mutually distant tracklets.

    Longest first (ties: earlier start, then lower id); a tracklet is kept if
    it is at least ``d_min`` from every tracklet already kept, measured at
    ``at_time`` (default: the latest common start time).
    """
    if d_min <= 0:
        return list(cooccurring)
    if at_time is None:
        at_time = max(tr.start_time for tr in cooccurring) if cooccurring else 0.0
    kept, kept_pos = [], []
    for tr in sorted(cooccurring, key=spatial_priority):
        p = tr.position_at(at_time)
        if all(np.linalg.norm(p - q) >= d_min for q in kept_pos):
            kept.append(tr)
            kept_pos.append(p)
    return kept


def sstt_sample(tracklets_by_camera, config: SsttConfig
                ) -> dict[int, list[list[TrackletRecord]]]:
    """Temporal sampling followed by the spatial filter at each instant."""
    sampled = temporal_sample(tracklets_by_camera, config.temporal_gap, config.start_offset)
    return {cam: [spatial_filter(active, config.spatial_min_dist, s) for _, s, active in inst]
            for cam, inst in sampled.items()}


def assign_labels(sampled_per_camera: Mapping[int, Sequence[Sequence[TrackletRecord]]]
                  ) -> LabelledDataset:
    """Labels 1..M_t per camera in instant order, first encounter wins."""
    per_camera = {}
    for cam in sorted(sampled_per_camera):
        seen = set()
        items = []
        for group in sampled_per_camera[cam]:
            for tr in group:
                if tr.tracklet_id in seen:
                    continue
                seen.add(tr.tracklet_id)
                items.append(LabelledTracklet(tr, cam, len(items) + 1))
        per_camera[cam] = items
    return LabelledDataset(per_camera)


def label_world(world: World, config: SsttConfig, tracklets=None) -> LabelledDataset:
    """SSTT over the world's training tracklets (or the given subset)."""
    config.check_against_dwell(world.config.mean_dwell)
    trs = world.train_tracklets() if tracklets is None else tracklets
    by_cam = world.tracklets_by_camera(trs)
    sampled = sstt_sample(by_cam, config)
    for cam in by_cam:
        sampled.setdefault(cam, [])
    return assign_labels(sampled)


def duplication_rate(dataset: LabelledDataset, ground_truth: Mapping[int, int] | None
                     ) -> tuple[dict[int, float], float]:
    """Per camera, fraction of identities holding two or more labels."""
    if ground_truth is None:
        raise ValueError("duplication_rate needs ground-truth identities")
    per_cam = {}
    for cam in dataset.cameras:
        labels_per_id: dict[int, set[int]] = {}
        for it in dataset.per_camera[cam]:
            labels_per_id.setdefault(ground_truth[it.tracklet.tracklet_id], set()).add(it.label)
        dup = sum(1 for labels in labels_per_id.values() if len(labels) >= 2)
        per_cam[cam] = dup / len(labels_per_id)
    return per_cam, float(np.mean(list(per_cam.values())))


def inject_duplication(dataset: LabelledDataset, rate: float, world: World, seed: int
                       ) -> tuple[LabelledDataset, dict[int, int]]:
    """Give ``ceil(rate * n_ids)`` identities per camera a second, fresh label.

    The extra tracklet is drawn from that identity's unlabelled tracklets in the
    same camera. Identities without one are skipped; the per-camera shortfall
    is returned alongside the new dataset.
    """
    if not 0 <= rate <= 1:
        raise ValueError("rate must be in [0, 1]")
    gt = world.ground_truth()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD0]))
    pool = world.tracklets_by_camera()
    per_camera = {}
    shortfall = {}
    for cam in dataset.cameras:
        items = list(dataset.per_camera[cam])
        used = {it.tracklet.tracklet_id for it in items}
        ids = sorted({gt[t] for t in used})
        n_dup = math.ceil(rate * len(ids) - 1e-9)
        chosen = rng.choice(len(ids), size=n_dup, replace=False) if n_dup else []
        short = 0
        for k in sorted(int(c) for c in chosen):
            pid = ids[k]
            spare = [tr for tr in pool[cam] if gt[tr.tracklet_id] == pid
                     and tr.tracklet_id not in used]
            if not spare:
                short += 1
                continue
            extra = spare[int(rng.integers(len(spare)))]
            used.add(extra.tracklet_id)
            items.append(LabelledTracklet(extra, cam, len(items) + 1))
        per_camera[cam] = items
        shortfall[cam] = short
        if short:
            log.warning("camera %d: %d identities had no spare tracklet to duplicate", cam, short)
    return LabelledDataset(per_camera), shortfall


def save_dataset(dataset: LabelledDataset, path, world_path: str | None = None,
                 report: dict | None = None) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": DATASET_FORMAT, "version": DATASET_VERSION,
                             "world": world_path, "label_counts":
                             {str(k): v for k, v in dataset.label_counts.items()},
                             "report": report or {}}, sort_keys=True) + "\n")
        for it in dataset.items():
            fh.write(json.dumps({"camera_id": it.camera_id, "label": it.label,
                                 "tracklet_id": it.tracklet.tracklet_id}) + "\n")
    return path


def load_dataset(path, world: World) -> LabelledDataset:
    path = Path(path)
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != DATASET_FORMAT:
            raise ValueError(f"{path}: not a labelled dataset file")
        if header.get("version") != DATASET_VERSION:
            raise ValueError(f"{path}: unsupported dataset version {header.get('version')}")
        rows = [json.loads(line) for line in fh]
    per_camera: dict[int, list[LabelledTracklet]] = {}
    for r in rows:
        tr = world.tracklet(r["tracklet_id"])
        if tr.camera_id != r["camera_id"]:
            raise ValueError(f"{path}: tracklet {tr.tracklet_id} camera mismatch")
        per_camera.setdefault(r["camera_id"], []).append(
            LabelledTracklet(tr, r["camera_id"], r["label"]))
    return LabelledDataset(per_camera)


def dataset_world_path(path) -> str | None:
    with open(path) as fh:
        return json.loads(fh.readline()).get("world")
