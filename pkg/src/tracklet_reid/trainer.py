"""Camera-balanced batches, Adam, and the training loop."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import losses as L
from . import model as M
from .sstt import LabelledDataset

log = logging.getLogger(__name__)

MODES = ("taudl", "pctd_only", "jcc")


@dataclass(frozen=True)
class TrainConfig:
    tracklets_per_camera: int = 8
    frames_per_tracklet: int = 4
    # None: num_cameras * tracklets_per_camera * frames_per_tracklet.
    batch_size: int | None = None
    steps: int = 300
    learning_rate: float = 3.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lam: float = 0.7
    sigma: float = 2.0
    K: int | None = None
    seed: int = 0
    mode: str = "taudl"
    hidden_dims: tuple[int, ...] = (64,)
    feature_dim: int = 64
    branch_bias: bool = False
    # Steps with the association weight held at zero.
    ccta_warmup_steps: int = 0
    # Step decay: lr *= lr_decay_gamma every lr_decay_every steps (0: constant).
    lr_decay_every: int = 0
    lr_decay_gamma: float = 0.1
    include_self: bool = False
    cross_view_denominator: bool = False
    squared_distance: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.frames_per_tracklet < 2:
            raise ValueError("frames_per_tracklet must be >= 2")
        if self.tracklets_per_camera < 1:
            raise ValueError("tracklets_per_camera must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")

    def loss_config(self) -> L.LossConfig:
        return L.LossConfig(self.lam, self.sigma, self.K, self.include_self,
                            self.cross_view_denominator, self.squared_distance)

    def samples_per_batch(self, num_cameras: int) -> int:
        per = num_cameras * self.tracklets_per_camera * self.frames_per_tracklet
        if self.batch_size is not None and self.batch_size != per:
            raise ValueError(f"batch_size {self.batch_size} must equal cameras x tracklets x "
                             f"frames = {per}")
        return per

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "hidden_dims" in d:
            d["hidden_dims"] = tuple(d["hidden_dims"])
        return cls(**d)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def adam_init(params: M.ModelParams) -> AdamState:
    return AdamState(params.zeros_like(), params.zeros_like())


def adam_step(params: M.ModelParams, grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam update."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.tensors.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)


@dataclass
class TrainState:
    params: M.ModelParams
    optimizer: AdamState
    step: int = 0
    metrics: list[dict] = field(default_factory=list)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, state: TrainState, batch: L.Batch):
        super().__init__(message)
        self.state = state
        self.batch = batch


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0xBA7C, step]))


def global_label_offsets(label_counts: dict[int, int]) -> dict[int, int]:
    """Camera -> offset added to its labels when concatenating label spaces."""
    offsets, acc = {}, 0
    for cam in sorted(label_counts):
        offsets[cam] = acc
        acc += label_counts[cam]
    return offsets


def build_batch(dataset: LabelledDataset, config: TrainConfig, step_seed) -> L.Batch:
    """Equal tracklet and frame counts from every camera.

    Tracklets are drawn without replacement within a camera (with replacement,
    and a warning, when a camera has too few). Frames are drawn uniformly,
    without replacement when the tracklet has enough of them.
    """
    rng = step_seed if isinstance(step_seed, np.random.Generator) else np.random.default_rng(step_seed)
    k, f = config.tracklets_per_camera, config.frames_per_tracklet
    config.samples_per_batch(dataset.num_cameras)
    frames, cams, labels, tids = [], [], [], []
    for cam in dataset.cameras:
        items = dataset.per_camera[cam]
        short = len(items) < k
        if short:
            log.warning("camera %d has %d tracklets < %d per batch; sampling with replacement",
                        cam, len(items), k)
        picks = rng.choice(len(items), size=k, replace=short)
        for p in picks:
            it = items[int(p)]
            fr = it.tracklet.frames
            idx = rng.choice(len(fr), size=f, replace=len(fr) < f)
            frames.append(fr[idx])
            cams.extend([cam] * f)
            labels.extend([it.label] * f)
            tids.extend([it.tracklet.tracklet_id] * f)
    return L.Batch(np.concatenate(frames), np.asarray(cams), np.asarray(labels),
                   np.asarray(tids))


def model_config_for(dataset: LabelledDataset, config: TrainConfig) -> M.ModelConfig:
    input_dim = next(iter(dataset.items())).tracklet.frames.shape[1]
    counts = dataset.label_counts
    classes = (sum(counts.values()),) if config.mode == "jcc" else tuple(counts.values())
    return M.ModelConfig(input_dim, config.hidden_dims, config.feature_dim, classes,
                         "tanh", config.branch_bias)


def _learning_rate(config: TrainConfig, step: int) -> float:
    if config.lr_decay_every:
        return config.learning_rate * config.lr_decay_gamma ** (step // config.lr_decay_every)
    return config.learning_rate


def train(dataset: LabelledDataset, config: TrainConfig,
          on_step: Callable[[TrainState, dict], None] | None = None) -> TrainState:
    """Run ``config.steps`` optimisation steps and log per-step loss rows.

    Modes: ``taudl`` (joint objective), ``pctd_only`` (association weight
    zero), ``jcc`` (one head over concatenated label spaces, CE only). The
    association value is computed and logged in every mode when defined.
    """
    loss_cfg = config.loss_config()
    params = M.init(model_config_for(dataset, config), config.seed)
    state = TrainState(params, adam_init(params))
    single_head = config.mode == "jcc"
    offsets = global_label_offsets(dataset.label_counts)
    cross_view = len(dataset.cameras) > 1
    if not cross_view and config.mode == "taudl" and config.lam > 0:
        log.warning("single camera: no cross-view term, association weight forced to 0")

    for step in range(config.steps):
        batch = build_batch(dataset, config, _step_rng(config.seed, step))
        if single_head:
            batch.labels = batch.labels + np.array([offsets[c] for c in batch.cameras])
        lam = config.lam
        if config.mode != "taudl" or step < config.ccta_warmup_steps or not cross_view:
            lam = 0.0
        with np.errstate(invalid="ignore", over="ignore"):
            try:
                out = L.joint_loss(params, batch, loss_cfg, lam=lam, single_head=single_head)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"non-finite loss at step {step}: {exc}",
                                       state, batch) from exc
        if not math.isfinite(out.joint) or not all(np.all(np.isfinite(g))
                                                    for g in out.grads.values()):
            raise TrainingDiverged(f"non-finite loss at step {step}: joint={out.joint} "
                                   f"pctd={out.pctd} ccta={out.ccta}", state, batch)
        adam_step(params, out.grads, state.optimizer, _learning_rate(config, step),
                  config.beta1, config.beta2, config.eps)
        state.step = step + 1
        row = {"step": step, "pctd": out.pctd,
               "ccta": None if math.isnan(out.ccta) else out.ccta, "joint": out.joint}
        state.metrics.append(row)
        if on_step is not None:
            on_step(state, row)
    return state


def jcc_baseline(dataset: LabelledDataset, config: TrainConfig, **kw) -> TrainState:
    return train(dataset, dataclasses.replace(config, mode="jcc"), **kw)


def dump_diverged(err: TrainingDiverged, path) -> Path:
    """Write the parameters and offending batch of a diverged run."""
    path = Path(path)
    np.savez(path, **{f"param/{k}": v for k, v in err.state.params.tensors.items()},
             frames=err.batch.frames, cameras=err.batch.cameras, labels=err.batch.labels,
             tracklet_ids=err.batch.tracklet_ids, step=err.state.step)
    return path
