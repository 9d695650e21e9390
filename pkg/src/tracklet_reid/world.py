"""Seeded synthetic multi-camera world.

Identities carry a latent unit-norm appearance vector. Each camera sees an
identity through its own linear map plus offset, so a frame is

    x = transform_c @ appearance + offset_c + noise

Arrivals per camera follow a Poisson process; each arrival is bound to an
identity that is free at that time (an identity is never in two cameras at
once and, unless ``reappearance`` is enabled, never re-enters a camera it has
already visited). A trajectory's frames sit on a fixed per-config frame grid
and are split into tracklets by :func:`fragment`.

Fragment-count distribution: ``1 + Poisson(frag_rate - 1)``, capped at the
number of frames in the trajectory, so the mean is ``frag_rate`` whenever
trajectories carry enough frames.

Dwell distribution: normal with mean ``mean_dwell`` and std ``dwell_std``,
truncated symmetrically to ``mean_dwell +/- dwell_halfwidth`` so the mean is
exactly ``mean_dwell``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

WORLD_FORMAT = "tracklet-reid-world"
WORLD_VERSION = 1

# Stream tags for per-entity derived seeds.
_IDENTITY, _CAMERA, _ARRIVALS, _ASSIGN, _DWELL, _PATH, _FRAG, _RENDER = range(8)


@dataclass(frozen=True)
class WorldConfig:
    num_cameras: int = 4
    num_identities: int = 100
    appearance_dim: int = 8
    frame_dim: int = 16
    mean_dwell: float = 10.0
    dwell_std: float = 2.5
    sim_duration: float = 400.0
    arrival_rate: float = 0.6
    frag_rate: float = 2.0
    noise_sigma: float = 0.1
    scene_extent: tuple[float, float] = (20.0, 10.0)
    seed: int = 0
    frame_rate: float = 1.0
    # Identities with id >= num_identities - num_test_identities are held out.
    num_test_identities: int = 0
    # Re-entry into an already visited camera (off by default).
    reappearance: bool = False
    # Minimum time between leaving one camera and entering any camera.
    transit_gap: float = 5.0
    # Camera model: transform = shared + camera_variation * camera-specific.
    camera_variation: float = 0.3
    camera_offset_scale: float = 1.0
    max_frames_per_tracklet: int = 64

    def __post_init__(self):
        if self.num_cameras < 2:
            raise ValueError("num_cameras must be >= 2 for cross-camera association")
        if self.num_identities < 2:
            raise ValueError("num_identities must be >= 2 for cross-camera association")
        if self.mean_dwell <= 0:
            raise ValueError("mean_dwell must be > 0")
        if self.frag_rate < 1:
            raise ValueError("frag_rate must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.frame_dim < self.appearance_dim:
            raise ValueError("frame_dim must be >= appearance_dim (full column rank transform)")
        if self.appearance_dim < 1:
            raise ValueError("appearance_dim must be positive")
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be > 0")
        if not 0 <= self.num_test_identities < self.num_identities:
            raise ValueError("num_test_identities must leave at least one training identity")
        object.__setattr__(self, "scene_extent", tuple(float(v) for v in self.scene_extent))

    @property
    def dwell_halfwidth(self) -> float:
        return min(2.0 * self.dwell_std, 0.9 * self.mean_dwell)

    @property
    def max_dwell(self) -> float:
        return self.mean_dwell + self.dwell_halfwidth

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scene_extent"] = list(self.scene_extent)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown world config keys: {sorted(unknown)}")
        d = dict(d)
        if "scene_extent" in d:
            d["scene_extent"] = tuple(d["scene_extent"])
        return cls(**d)


@dataclass(frozen=True)
class Identity:
    id: int
    appearance: np.ndarray


@dataclass(frozen=True)
class CameraModel:
    camera_id: int
    transform: np.ndarray
    offset: np.ndarray


@dataclass(frozen=True)
class Trajectory:
    trajectory_id: int
    identity_id: int
    camera_id: int
    entry_time: float
    dwell: float
    # Positions at the frame grid times (rows: time, x, y).
    path: np.ndarray

    @property
    def exit_time(self) -> float:
        return self.entry_time + self.dwell

    @property
    def times(self) -> np.ndarray:
        return self.path[:, 0]


@dataclass(frozen=True)
class TrackletRecord:
    tracklet_id: int
    camera_id: int
    identity_id: int
    trajectory_id: int
    start_time: float
    end_time: float
    positions: np.ndarray
    times: np.ndarray
    frames: np.ndarray

    def __len__(self) -> int:
        return len(self.frames)

    def position_at(self, t: float) -> np.ndarray:
        if len(self.times) == 1:
            return self.positions[0]
        return np.array([
            np.interp(t, self.times, self.positions[:, 0]),
            np.interp(t, self.times, self.positions[:, 1]),
        ])


@dataclass
class World:
    config: WorldConfig
    identities: list[Identity]
    cameras: list[CameraModel]
    trajectories: list[Trajectory]
    tracklets: list[TrackletRecord]
    _by_id: dict = field(default_factory=dict, repr=False, compare=False)

    def camera(self, camera_id: int) -> CameraModel:
        return self.cameras[camera_id - 1]

    def tracklet(self, tracklet_id: int) -> TrackletRecord:
        if not self._by_id:
            self._by_id.update((tr.tracklet_id, tr) for tr in self.tracklets)
        return self._by_id[tracklet_id]

    @property
    def test_identity_ids(self) -> set[int]:
        n, k = self.config.num_identities, self.config.num_test_identities
        return set(range(n - k, n))

    def train_tracklets(self) -> list[TrackletRecord]:
        test = self.test_identity_ids
        return [tr for tr in self.tracklets if tr.identity_id not in test]

    def test_tracklets(self) -> list[TrackletRecord]:
        test = self.test_identity_ids
        return [tr for tr in self.tracklets if tr.identity_id in test]

    def ground_truth(self) -> dict[int, int]:
        """tracklet_id -> identity_id. Evaluation only."""
        return {tr.tracklet_id: tr.identity_id for tr in self.tracklets}

    def tracklets_by_camera(self, tracklets=None) -> dict[int, list[TrackletRecord]]:
        out = {c.camera_id: [] for c in self.cameras}
        for tr in self.tracklets if tracklets is None else tracklets:
            out[tr.camera_id].append(tr)
        return out


def _rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), *path]))


def _make_identities(cfg: WorldConfig) -> list[Identity]:
    out = []
    for i in range(cfg.num_identities):
        a = _rng(cfg.seed, _IDENTITY, i).standard_normal(cfg.appearance_dim)
        out.append(Identity(i, a / np.linalg.norm(a)))
    return out


def _make_cameras(cfg: WorldConfig) -> list[CameraModel]:
    da, dx = cfg.appearance_dim, cfg.frame_dim
    shared = _rng(cfg.seed, _CAMERA, 0).standard_normal((dx, da))
    # Orthonormal columns keep appearance geometry comparable across cameras.
    shared = np.linalg.qr(shared)[0] * math.sqrt(dx / da)
    cams = []
    for c in range(1, cfg.num_cameras + 1):
        rng = _rng(cfg.seed, _CAMERA, c)
        specific = rng.standard_normal((dx, da)) / math.sqrt(da)
        offset = rng.standard_normal(dx) * cfg.camera_offset_scale / math.sqrt(dx)
        transform = shared + cfg.camera_variation * specific
        if np.linalg.matrix_rank(transform) < da:
            raise RuntimeError("camera transform is rank deficient; change seed")
        cams.append(CameraModel(c, transform, offset))
    return cams


def sample_dwell(cfg: WorldConfig, rng: np.random.Generator) -> float:
    lo = cfg.mean_dwell - cfg.dwell_halfwidth
    hi = cfg.mean_dwell + cfg.dwell_halfwidth
    while True:
        d = cfg.mean_dwell + cfg.dwell_std * rng.standard_normal()
        if lo <= d <= hi and d > 0:
            return float(d)


def _sample_path(cfg: WorldConfig, entry: float, dwell: float, rng) -> np.ndarray:
    w, h = cfg.scene_extent
    start = rng.uniform((0, 0), (w, h))
    end = rng.uniform((0, 0), (w, h))
    n = 1 + int(math.floor(dwell * cfg.frame_rate + 1e-9))
    times = entry + np.arange(n) / cfg.frame_rate
    frac = (times - entry) / dwell if dwell > 0 else np.zeros(n)
    xy = start[None, :] + frac[:, None] * (end - start)[None, :]
    return np.column_stack([times, xy])


def _overlaps(busy: list[tuple[float, float]], lo: float, hi: float) -> bool:
    return any(lo < b_hi and b_lo < hi for b_lo, b_hi in busy)


def _schedule(cfg: WorldConfig) -> list[tuple[int, int, float, float]]:
    """Poisson arrivals per camera, bound to free identities.

    Returns (identity, camera, entry_time, dwell) tuples. Identities with the
    fewest visited cameras are preferred so that most identities cross
    several cameras; an arrival with no eligible identity is dropped.
    """
    arrivals = []
    for c in range(1, cfg.num_cameras + 1):
        rng = _rng(cfg.seed, _ARRIVALS, c)
        n = rng.poisson(cfg.arrival_rate * cfg.sim_duration)
        times = np.sort(rng.uniform(0.0, cfg.sim_duration, n))
        for k, t in enumerate(times):
            dwell = sample_dwell(cfg, _rng(cfg.seed, _DWELL, c, k))
            arrivals.append((float(t), c, dwell))
    arrivals.sort()

    rng = _rng(cfg.seed, _ASSIGN)
    busy: list[list[tuple[float, float]]] = [[] for _ in range(cfg.num_identities)]
    visited: list[set[int]] = [set() for _ in range(cfg.num_identities)]
    out = []
    gap = cfg.transit_gap

    def eligible(i, c, t, dwell):
        if not cfg.reappearance and c in visited[i]:
            return False
        return not _overlaps(busy[i], t - gap, t + dwell + gap)

    for t, c, dwell in arrivals:
        cands = [i for i in range(cfg.num_identities) if eligible(i, c, t, dwell)]
        if not cands:
            continue
        fewest = min(len(visited[i]) for i in cands)
        cands = [i for i in cands if len(visited[i]) == fewest]
        i = cands[int(rng.integers(len(cands)))]
        busy[i].append((t, t + dwell))
        visited[i].add(c)
        out.append((i, c, t, dwell))

    # Every identity gets at least one trajectory.
    for i in range(cfg.num_identities):
        if busy[i]:
            continue
        for _ in range(1000):
            c = int(rng.integers(1, cfg.num_cameras + 1))
            t = float(rng.uniform(0.0, cfg.sim_duration))
            dwell = sample_dwell(cfg, rng)
            if eligible(i, c, t, dwell):
                busy[i].append((t, t + dwell))
                visited[i].add(c)
                out.append((i, c, t, dwell))
                break
        else:
            raise RuntimeError(f"could not place identity {i}")
    out.sort(key=lambda r: (r[2], r[1], r[0]))
    return out


def fragment(trajectory: Trajectory, frag_rate: float, seed: int) -> list[tuple[int, int]]:
    """Split a trajectory's frame grid into contiguous, disjoint index ranges.

    Returns half-open ``(start, stop)`` frame-index ranges. A frame at each
    internal cut is dropped (a tracking loss), so spans never touch.
    """
    n_frames = len(trajectory.path)
    rng = _rng(seed, _FRAG, trajectory.trajectory_id)
    n = 1 + int(rng.poisson(frag_rate - 1.0)) if frag_rate > 1 else 1
    n = max(1, min(n, (n_frames + 1) // 2))
    if n == 1:
        return [(0, n_frames)]
    # Choose n-1 dropped frames among interior positions, non-adjacent.
    # Positions 1..n_frames-2; pick from a reduced range then spread out.
    k = n - 1
    picks = np.sort(rng.choice(n_frames - 2 - (k - 1), size=k, replace=False)) + np.arange(k) + 1
    ranges = []
    lo = 0
    for p in picks:
        ranges.append((lo, int(p)))
        lo = int(p) + 1
    ranges.append((lo, n_frames))
    return [(a, b) for a, b in ranges if b > a]


def render_frames(identity: Identity, camera: CameraModel, count: int,
                  noise_sigma: float, seed) -> np.ndarray:
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    clean = camera.transform @ identity.appearance + camera.offset
    noise = rng.standard_normal((count, len(clean))) * noise_sigma
    return clean[None, :] + noise


def generate_world(config: WorldConfig) -> World:
    identities = _make_identities(config)
    cameras = _make_cameras(config)
    trajectories = []
    for k, (i, c, t, dwell) in enumerate(_schedule(config)):
        path = _sample_path(config, t, dwell, _rng(config.seed, _PATH, k))
        trajectories.append(Trajectory(k, i, c, t, dwell, path))

    tracklets = []
    for traj in trajectories:
        for a, b in fragment(traj, config.frag_rate, config.seed):
            idx = np.arange(a, b)
            if len(idx) > config.max_frames_per_tracklet:
                idx = np.round(np.linspace(a, b - 1, config.max_frames_per_tracklet)).astype(int)
            tid = len(tracklets)
            frames = render_frames(
                identities[traj.identity_id], cameras[traj.camera_id - 1], len(idx),
                config.noise_sigma, _rng(config.seed, _RENDER, tid),
            ).astype(np.float32)
            pts = traj.path[idx]
            tracklets.append(TrackletRecord(
                tracklet_id=tid,
                camera_id=traj.camera_id,
                identity_id=traj.identity_id,
                trajectory_id=traj.trajectory_id,
                start_time=float(pts[0, 0]),
                end_time=float(pts[-1, 0]),
                positions=pts[:, 1:].copy(),
                times=pts[:, 0].copy(),
                frames=frames,
            ))
    return World(config, identities, cameras, trajectories, tracklets)


def separation_margin(world: World) -> float:
    """Smallest noise-free distance between two identities within one camera."""
    apps = np.stack([idt.appearance for idt in world.identities])
    best = math.inf
    for cam in world.cameras:
        clean = apps @ cam.transform.T
        d = np.linalg.norm(clean[:, None, :] - clean[None, :, :], axis=-1)
        d[np.diag_indices_from(d)] = np.inf
        best = min(best, float(d.min()))
    return best


def separable_noise_bound(world: World) -> float:
    """Noise std under which frames stay separable by identity within a camera.

    Each noise vector then has norm about margin / 8, well below the margin / 4
    needed for within-identity distances to stay under between-identity ones.
    """
    return separation_margin(world) / (8.0 * math.sqrt(world.config.frame_dim))


# ---------------------------------------------------------------------------
# Serialization: JSON-lines records + little-endian float32 sidecar.
#
# Sidecar layout: tracklet frame blocks concatenated in record order, each a
# row-major (n_frames, frame_dim) array of '<f4'. Tracklet records carry
# ``frame_offset`` (row index into the sidecar) and ``frame_count``.
# ---------------------------------------------------------------------------

def save_world(world: World, path) -> tuple[Path, Path]:
    path = Path(path)
    sidecar = path.with_suffix(".f32")
    cfg = world.config
    rows = 0
    with open(path, "w") as fh, open(sidecar, "wb") as fb:
        fh.write(json.dumps({"format": WORLD_FORMAT, "version": WORLD_VERSION,
                             "sidecar": sidecar.name, "config": cfg.to_dict()},
                            sort_keys=True) + "\n")
        for idt in world.identities:
            fh.write(json.dumps({"kind": "identity", "id": idt.id,
                                 "appearance": idt.appearance.tolist()}) + "\n")
        for cam in world.cameras:
            fh.write(json.dumps({"kind": "camera", "camera_id": cam.camera_id,
                                 "transform": cam.transform.tolist(),
                                 "offset": cam.offset.tolist()}) + "\n")
        for tr in world.trajectories:
            fh.write(json.dumps({"kind": "trajectory", "trajectory_id": tr.trajectory_id,
                                 "identity_id": tr.identity_id, "camera_id": tr.camera_id,
                                 "entry_time": tr.entry_time, "dwell": tr.dwell,
                                 "path": tr.path.tolist()}) + "\n")
        for tr in world.tracklets:
            fh.write(json.dumps({"kind": "tracklet", "tracklet_id": tr.tracklet_id,
                                 "camera_id": tr.camera_id, "identity_id": tr.identity_id,
                                 "trajectory_id": tr.trajectory_id,
                                 "start_time": tr.start_time, "end_time": tr.end_time,
                                 "positions": tr.positions.tolist(), "times": tr.times.tolist(),
                                 "frame_offset": rows, "frame_count": len(tr.frames)}) + "\n")
            fb.write(np.ascontiguousarray(tr.frames, dtype="<f4").tobytes())
            rows += len(tr.frames)
    return path, sidecar


def load_world(path) -> World:
    path = Path(path)
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != WORLD_FORMAT:
            raise ValueError(f"{path}: not a world file")
        if header.get("version") != WORLD_VERSION:
            raise ValueError(f"{path}: unsupported world version {header.get('version')}")
        cfg = WorldConfig.from_dict(header["config"])
        records = [json.loads(line) for line in fh]
    flat = np.fromfile(path.parent / header["sidecar"], dtype="<f4").reshape(-1, cfg.frame_dim)

    identities, cameras, trajectories, tracklets = [], [], [], []
    for r in records:
        kind = r["kind"]
        if kind == "identity":
            identities.append(Identity(r["id"], np.asarray(r["appearance"], dtype=float)))
        elif kind == "camera":
            cameras.append(CameraModel(r["camera_id"], np.asarray(r["transform"], dtype=float),
                                       np.asarray(r["offset"], dtype=float)))
        elif kind == "trajectory":
            trajectories.append(Trajectory(r["trajectory_id"], r["identity_id"], r["camera_id"],
                                           r["entry_time"], r["dwell"],
                                           np.asarray(r["path"], dtype=float).reshape(-1, 3)))
        elif kind == "tracklet":
            a = r["frame_offset"]
            tracklets.append(TrackletRecord(
                r["tracklet_id"], r["camera_id"], r["identity_id"], r["trajectory_id"],
                r["start_time"], r["end_time"],
                np.asarray(r["positions"], dtype=float).reshape(-1, 2),
                np.asarray(r["times"], dtype=float),
                flat[a:a + r["frame_count"]].astype(np.float32),
            ))
        else:
            raise ValueError(f"{path}: unknown record kind {kind!r}")
    return World(cfg, identities, cameras, trajectories, tracklets)


def world_digest(world: World) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(world.config.to_dict(), sort_keys=True).encode())
    for tr in world.tracklets:
        h.update(np.asarray([tr.tracklet_id, tr.camera_id, tr.identity_id], dtype="<i8").tobytes())
        h.update(np.asarray([tr.start_time, tr.end_time], dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(tr.frames, dtype="<f4").tobytes())
    return h.hexdigest()
