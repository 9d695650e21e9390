"""Command-line pipeline: generate -> sample -> train -> eval, plus sweeps and plots.

Every command reads one YAML config (a bundled name such as ``tiny`` or a
path), writes its outputs under ``--out`` and records them in a
``manifest.json``. Failures print a single JSON line on stderr and exit with
one of the codes in ``EXIT_CODES``.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import evaluation as E
from . import model as M
from . import sstt as S
from . import trainer as TR
from . import world as W

log = logging.getLogger(__name__)

OUT_ENV = "TRACKLET_REID_OUT"
BUNDLED = ("tiny", "desk", "stress")
MANIFEST_FORMAT = "tracklet-reid-manifest"
METRICS_FORMAT = "tracklet-reid-metrics"
RESULTS_FORMAT = "tracklet-reid-results"
SCHEMA_VERSION = 1

EXIT_CODES = {
    "ok": 0,
    "internal": 1,
    "usage": 2,
    "missing_file": 3,
    "invalid_input": 4,
    "hash_mismatch": 5,
    "diverged": 6,
}


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


# --- configuration -------------------------------------------------------------

EVAL_DEFAULTS = {"seeds": [0, 1, 2], "rates": [0.0, 0.1, 0.2, 0.3, 0.5]}
RUN_DEFAULTS = {"checkpoint_every": 0}


@dataclass
class RunConfig:
    world: W.WorldConfig
    sstt: S.SsttConfig
    train: TR.TrainConfig
    seeds: list[int] = field(default_factory=lambda: list(EVAL_DEFAULTS["seeds"]))
    rates: list[float] = field(default_factory=lambda: list(EVAL_DEFAULTS["rates"]))
    checkpoint_every: int = 0

    def to_dict(self) -> dict:
        return {"world": self.world.to_dict(), "sstt": dataclasses.asdict(self.sstt),
                "train": self.train.to_dict(),
                "eval": {"seeds": list(self.seeds), "rates": list(self.rates)},
                "run": {"checkpoint_every": self.checkpoint_every}}


def canonical_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _section(raw: dict, name: str, allowed=None) -> dict:
    sec = raw.get(name) or {}
    if not isinstance(sec, dict):
        raise CliError("invalid_input", f"config section '{name}' must be a mapping")
    if allowed is not None:
        unknown = set(sec) - set(allowed)
        if unknown:
            raise CliError("invalid_input", f"unknown {name} config keys: {sorted(unknown)}")
    return sec


def parse_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise CliError("invalid_input", "config must be a mapping of sections")
    unknown = set(raw) - {"world", "sstt", "train", "eval", "run"}
    if unknown:
        raise CliError("invalid_input", f"unknown config sections: {sorted(unknown)}")
    try:
        world = W.WorldConfig.from_dict(_section(raw, "world"))
        sstt_raw = _section(raw, "sstt", [f.name for f in dataclasses.fields(S.SsttConfig)])
        if "temporal_gap" not in sstt_raw:
            raise CliError("invalid_input", "sstt.temporal_gap is required")
        sstt = S.SsttConfig(**sstt_raw)
        train = TR.TrainConfig.from_dict(_section(raw, "train"))
        ev = {**EVAL_DEFAULTS, **_section(raw, "eval", EVAL_DEFAULTS)}
        run = {**RUN_DEFAULTS, **_section(raw, "run", RUN_DEFAULTS)}
        return RunConfig(world, sstt, train, [int(s) for s in ev["seeds"]],
                         [float(r) for r in ev["rates"]], int(run["checkpoint_every"]))
    except (TypeError, ValueError) as exc:
        raise CliError("invalid_input", str(exc)) from exc


def load_config(ref: str) -> RunConfig:
    """Read a bundled config name, a YAML file, or a manifest.json."""
    if ref in BUNDLED:
        text = (resources.files("tracklet_reid") / "configs" / f"{ref}.yaml").read_text()
        return parse_config(yaml.safe_load(text))
    path = Path(ref)
    if not path.is_file():
        raise CliError("missing_file", f"config not found: {ref}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise CliError("invalid_input", f"{ref}: {exc}".replace("\n", " ")) from exc
    if isinstance(raw, dict) and raw.get("format") == MANIFEST_FORMAT:
        raw = raw["config"]
    return parse_config(raw)


# --- manifests and files ----------------------------------------------------------

def out_dir(args, command: str) -> Path:
    root = Path(args.out) if args.out else Path(os.environ.get(OUT_ENV, "runs")) / command
    root.mkdir(parents=True, exist_ok=True)
    return root


def write_manifest(out: Path, command: str, cfg: RunConfig, seeds, inputs: dict,
                   outputs: dict) -> Path:
    def describe(paths):
        return {k: {"path": str(p), "sha256": file_sha256(p)} for k, p in sorted(paths.items())}
    config = cfg.to_dict()
    doc = {"format": MANIFEST_FORMAT, "version": SCHEMA_VERSION, "tool_version": __version__,
           "command": command, "config": config, "config_hash": canonical_hash(config),
           "seeds": list(seeds), "inputs": describe(inputs), "outputs": describe(outputs)}
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _require(path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise CliError("missing_file", f"file not found: {path}")
    return path


def read_world(path) -> W.World:
    try:
        return W.load_world(_require(path))
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise CliError("invalid_input", f"{path}: {exc}") from exc


def read_dataset(path) -> tuple[S.LabelledDataset, W.World, Path]:
    """Load a labelled dataset and the world it points to, checking its digest."""
    path = _require(path)
    try:
        with open(path) as fh:
            header = json.loads(fh.readline())
    except json.JSONDecodeError as exc:
        raise CliError("invalid_input", f"{path}: {exc}") from exc
    ref = header.get("world")
    if not ref:
        raise CliError("invalid_input", f"{path}: dataset does not name its world file")
    world_path = (path.parent / ref).resolve()
    world = read_world(world_path)
    expected = header.get("report", {}).get("world_digest")
    if expected is not None and expected != W.world_digest(world):
        raise CliError("hash_mismatch", f"{world_path} does not match the digest in {path}")
    try:
        return S.load_dataset(path, world), world, world_path
    except (KeyError, ValueError) as exc:
        raise CliError("invalid_input", f"{path}: {exc}") from exc


def emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True))


def results_json(results, key: str) -> dict:
    curves = [{key: r.metadata.get(key), "seed": r.metadata.get("seed"),
               "cmc": [float(x) for x in r.cmc], "map": r.map}
              for r in results]
    curves.sort(key=lambda c: (str(c[key]), c["seed"] if c["seed"] is not None else -1))
    return {"format": RESULTS_FORMAT, "version": SCHEMA_VERSION, "key": key, "curves": curves}


# --- commands ----------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.world = dataclasses.replace(cfg.world, seed=args.seed)
    out = out_dir(args, "generate")
    world = W.generate_world(cfg.world)
    path, sidecar = W.save_world(world, out / "world.jsonl")
    write_manifest(out, "generate", cfg, [cfg.world.seed], {},
                   {"world": path, "frames": sidecar})
    emit({"world": str(path), "tracklets": len(world.tracklets),
          "trajectories": len(world.trajectories), "digest": W.world_digest(world)})
    return 0


def cmd_sample(args) -> int:
    cfg = load_config(args.config)
    world_path = _require(args.world)
    world = read_world(world_path)
    cfg.sstt.check_against_dwell(world.config.mean_dwell)
    out = out_dir(args, "sample")
    ds = S.label_world(world, cfg.sstt)
    per_cam, mean = S.duplication_rate(ds, world.ground_truth())
    report = {"duplication_per_camera": {str(k): v for k, v in per_cam.items()},
              "duplication_mean": mean, "world_digest": W.world_digest(world),
              "label_counts": {str(k): v for k, v in ds.label_counts.items()}}
    rel = os.path.relpath(world_path.resolve(), out.resolve())
    path = S.save_dataset(ds, out / "dataset.jsonl", world_path=rel, report=report)
    dup = out / "duplication.json"
    dup.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "sample", cfg, [], {"world": world_path},
                   {"dataset": path, "duplication": dup})
    emit({"dataset": str(path), "duplication": mean,
          "labels": sum(ds.label_counts.values())})
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.mode is not None:
        changes["mode"] = args.mode
    try:
        cfg.train = dataclasses.replace(cfg.train, **changes)
    except ValueError as exc:
        raise CliError("invalid_input", str(exc)) from exc
    dataset_path = _require(args.dataset)
    ds, _, world_path = read_dataset(dataset_path)
    out = out_dir(args, "train")
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    outputs = {"metrics": metrics_path}

    with open(metrics_path, "w") as fh:
        fh.write(json.dumps({"format": METRICS_FORMAT, "version": SCHEMA_VERSION,
                             "mode": cfg.train.mode, "seed": cfg.train.seed}) + "\n")

        def on_step(state, row):
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            k = cfg.checkpoint_every
            if k > 0 and state.step % k == 0:
                p = ckpt_dir / f"step_{state.step:06d}.ckpt"
                M.save_checkpoint(state.params, p)
                outputs[p.stem] = p

        try:
            state = TR.train(ds, cfg.train, on_step=on_step)
        except TR.TrainingDiverged as exc:
            dump = TR.dump_diverged(exc, out / "diverged.npz")
            raise CliError("diverged", f"{exc} (state written to {dump})") from exc
    final = out / "model.ckpt"
    M.save_checkpoint(state.params, final)
    outputs["model"] = final
    write_manifest(out, "train", cfg, [cfg.train.seed],
                   {"dataset": dataset_path, "world": world_path}, outputs)
    last = state.metrics[-1] if state.metrics else {}
    emit({"checkpoint": str(final), "steps": state.step, "final_joint": last.get("joint")})
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config) if args.config else None
    ckpt = _require(args.checkpoint)
    if args.world:
        world_path = _require(args.world)
        world = read_world(world_path)
    elif args.dataset:
        _, world, world_path = read_dataset(args.dataset)
    else:
        raise CliError("usage", "eval needs --world or --dataset")
    test = world.test_tracklets()
    if not test:
        raise CliError("invalid_input", "world has no held-out identities to evaluate")
    try:
        params = M.load_checkpoint(ckpt)
    except (ValueError, KeyError) as exc:
        raise CliError("invalid_input", f"{ckpt}: {exc}") from exc
    if params.config.input_dim != world.config.frame_dim:
        raise CliError("invalid_input", "checkpoint input size does not match the world")
    out = out_dir(args, "eval")
    mode = args.mode or "model"
    res = E.evaluate(params, test, {"mode": mode, "seed": args.seed})
    csv_path = out / "results.csv"
    csv_path.write_text(E.results_csv([res], "mode"))
    cmc_path = out / "cmc.json"
    cmc_path.write_text(json.dumps(results_json([res], "mode"), sort_keys=True) + "\n")
    if cfg is not None:
        write_manifest(out, "eval", cfg, [] if args.seed is None else [args.seed],
                       {"checkpoint": ckpt, "world": world_path},
                       {"results": csv_path, "cmc": cmc_path})
    emit({"results": str(csv_path), "rank1": res.rank1, "map": res.map,
          "queries": len(test), "chance": chance_rank1(test)})
    return 0


def chance_rank1(tracklets) -> float:
    """Mean over queries of 1 / gallery size under the cross-camera protocol."""
    cams = np.array([t.camera_id for t in tracklets])
    sizes = np.array([(cams != c).sum() for c in cams])
    return float(np.mean(1.0 / sizes[sizes > 0])) if (sizes > 0).any() else 0.0


def _sweep_setup(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.world = dataclasses.replace(cfg.world, seed=args.seed)
    if args.seeds:
        cfg.seeds = [int(s) for s in args.seeds.split(",")]
    return cfg, W.generate_world(cfg.world)


def _write_sweep(out: Path, name: str, key: str, cfg: RunConfig, results,
                 extra: dict | None = None) -> dict:
    csv_path = out / f"{name}.csv"
    csv_path.write_text(E.results_csv(results, key))
    json_path = out / f"{name}_cmc.json"
    json_path.write_text(json.dumps(results_json(results, key), sort_keys=True) + "\n")
    means = E.mean_rank1(results, key)
    write_manifest(out, name, cfg, cfg.seeds, {},
                   {"results": csv_path, "cmc": json_path, **(extra or {})})
    return {"results": str(csv_path), "mean_rank1": {str(k): v for k, v in means.items()}}


def cmd_ablation(args) -> int:
    cfg, world = _sweep_setup(args)
    modes = args.mode.split(",") if args.mode else ["jcc", "pctd_only", "taudl"]
    bad = set(modes) - set(TR.MODES)
    if bad:
        raise CliError("invalid_input", f"unknown modes: {sorted(bad)}")
    out = out_dir(args, "ablation")
    results = E.run_ablation(world, cfg.sstt, cfg.train, cfg.seeds, modes)
    for seed in cfg.seeds:
        by_mode = {r.metadata["mode"]: r.rank1 for r in results if r.metadata["seed"] == seed}
        if "taudl" in by_mode and "pctd_only" in by_mode:
            log.info("seed %d: taudl - pctd_only = %.4f", seed,
                     by_mode["taudl"] - by_mode["pctd_only"])
    emit(_write_sweep(out, "ablation", "mode", cfg, results))
    return 0


def cmd_robustness(args) -> int:
    cfg, world = _sweep_setup(args)
    if args.rates:
        try:
            cfg.rates = [float(r) for r in args.rates.split(",")]
        except ValueError as exc:
            raise CliError("usage", f"bad --rates: {args.rates}") from exc
    if any(not 0.0 <= r <= 1.0 for r in cfg.rates):
        raise CliError("invalid_input", "duplication rates must lie in [0, 1]")
    out = out_dir(args, "robustness")
    results = E.run_robustness(world, cfg.sstt, cfg.train, cfg.seeds, cfg.rates)
    dup = out / "duplication.csv"
    dup.write_text(E.duplication_csv(results))
    emit(_write_sweep(out, "robustness", "rate", cfg, results, {"duplication": dup}))
    return 0


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    out = out_dir(args, "plot")
    written = []
    for src in args.inputs:
        src = _require(src)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        if src.suffix == ".jsonl":
            rows = [json.loads(line) for line in src.read_text().splitlines()[1:]]
            steps = [r["step"] for r in rows]
            for key in ("joint", "pctd", "ccta"):
                ys = [np.nan if r[key] is None else r[key] for r in rows]
                ax.plot(steps, ys, label=key)
            ax.set_xlabel("step")
            ax.set_ylabel("loss")
        elif src.suffix == ".json":
            doc = json.loads(src.read_text())
            if doc.get("format") != RESULTS_FORMAT:
                raise CliError("invalid_input", f"{src}: not a results file")
            key = doc["key"]
            for c in doc["curves"]:
                ranks = np.arange(1, len(c["cmc"]) + 1)
                ax.plot(ranks, 100 * np.asarray(c["cmc"]), label=f"{key}={c[key]} s{c['seed']}")
            ax.set_xlabel("rank")
            ax.set_ylabel("matching rate (%)")
            ax.set_xlim(1, min(20, max(len(c["cmc"]) for c in doc["curves"])))
        elif src.suffix == ".csv":
            import csv
            rows = list(csv.DictReader(src.open()))
            if not rows or "rate" not in rows[0]:
                raise CliError("invalid_input", f"{src}: expected a robustness table")
            rates = sorted({float(r["rate"]) for r in rows})
            mean = [np.mean([float(r["rank1"]) for r in rows if float(r["rate"]) == x])
                    for x in rates]
            ax.plot(rates, mean, marker="o", label="mean rank-1")
            ax.set_xlabel("injected duplication rate")
            ax.set_ylabel("rank-1 (%)")
        else:
            raise CliError("invalid_input", f"{src}: unsupported input type")
        ax.legend(fontsize=7)
        fig.tight_layout()
        dest = out / f"{src.stem}.png"
        fig.savefig(dest, dpi=120)
        plt.close(fig)
        written.append(str(dest))
    emit({"figures": written})
    return 0


# --- entry point ---------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tracklet-reid", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required,
                        help=f"bundled name ({', '.join(BUNDLED)}), YAML file or manifest.json")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("generate", help="simulate a camera network")
    common(sp)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("sample", help="label a world's training tracklets")
    common(sp)
    sp.add_argument("--world", required=True)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("train", help="train on a labelled dataset")
    common(sp)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--mode", choices=TR.MODES)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="cross-camera retrieval on held-out identities")
    common(sp, config_required=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--world")
    sp.add_argument("--dataset")
    sp.add_argument("--mode", help="label for the result row")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablation", help="jcc / pctd_only / taudl on one world")
    common(sp)
    sp.add_argument("--mode", help="comma-separated subset of modes")
    sp.add_argument("--seeds", help="comma-separated training seeds")
    sp.set_defaults(func=cmd_ablation)

    sp = sub.add_parser("robustness", help="taudl under injected label duplication")
    common(sp)
    sp.add_argument("--rates", help="comma-separated duplication rates")
    sp.add_argument("--seeds", help="comma-separated training seeds")
    sp.set_defaults(func=cmd_robustness)

    sp = sub.add_parser("plot", help="figures from metrics.jsonl, *_cmc.json or robustness.csv")
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        return args.func(args)
    except CliError as exc:
        kind, message = exc.kind, str(exc)
    except OSError as exc:
        kind, message = "missing_file", str(exc)
    except Exception as exc:  # noqa: BLE001 - reported as one line, never a traceback
        kind, message = "internal", f"{type(exc).__name__}: {exc}"
    sys.stderr.write(json.dumps({"error": kind, "exit": EXIT_CODES[kind],
                                 "message": message.replace("\n", " ")}) + "\n")
    return EXIT_CODES[kind]


if __name__ == "__main__":
    sys.exit(main())
