"""Command-line entry point: reproducible experiment recipes.

Subcommands: synth, split, tabular, train, sweep, reconstruct, report.
Every command is a pure function of (config, input files, seed); reruns are
byte-identical.  Exit codes: 0 ok, 2 configuration error, 3 data error,
4 numerical failure; failures print the machine-readable error name on
stderr and remove partial outputs.  TOMOHEIGHT_THREADS caps internal
parallelism (BLAS pools and sweep workers).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fileio, hpo, metrics, recon, tabular
from .core import BandId, SplitLabel, parse_pols, pols_to_str
from .errors import BadConfigError, BadSpecError, TomoHeightError
from .geosplit import (
    SplitSpec,
    SplitStrategy,
    SwathOrientation,
    make_split,
)
from .synth import SceneParams, gen_cube, gen_height_field
from .trainer import TrainConfig, fit_scene_scaler, run_experiment
from .volnet import Backbone, CollapseKind, ModelSpec, load_model, save_model

CUBE_NAME = "cube.tcub"
CHM_NAME = "chm.chm"


class _OutputTracker:
    """Records files a command creates so failures leave no partial outputs."""

    def __init__(self):
        self.paths: list[Path] = []

    def add(self, path) -> Path:
        p = Path(path)
        self.paths.append(p)
        return p

    def cleanup(self):
        for p in self.paths:
            try:
                p.unlink(missing_ok=True)
            except OSError:
                pass


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise BadConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise BadConfigError(f"{path}: {exc}") from exc


_SCENE_KEYS = {
    "seed", "nx", "ny", "band", "pols", "height_range_m",
    "correlation_length_px", "ground_amp", "canopy_amp", "ground_sigma_m",
    "canopy_sigma_m", "noise_rel", "gap_fraction",
}
_CONFIG_SECTIONS = {"scene", "ingest", "split", "tabular", "cnn", "sweep", "outputs"}


def _validate_config(doc: dict) -> None:
    if not isinstance(doc, dict):
        raise BadConfigError("experiment config must be a JSON object")
    unknown = set(doc) - _CONFIG_SECTIONS
    if unknown:
        raise BadConfigError(f"unknown config sections: {sorted(unknown)}")
    scene = doc.get("scene", {})
    if not isinstance(scene, dict):
        raise BadConfigError("scene section must be an object")
    bad = set(scene) - _SCENE_KEYS
    if bad:
        raise BadConfigError(f"unknown scene keys: {sorted(bad)}")


def _scene_dir(path) -> tuple[Path, Path]:
    d = Path(path)
    cube_path, chm_path = d / CUBE_NAME, d / CHM_NAME
    return cube_path, chm_path


def _read_scene(path) -> fileio.AlignedScene:
    cube_path, chm_path = _scene_dir(path)
    return fileio.align(fileio.read_cube(cube_path), fileio.read_chm(chm_path))


# -- synth --------------------------------------------------------------------

def cmd_synth(args, out: _OutputTracker) -> None:
    doc = _load_json(args.config)
    _validate_config(doc)
    scene = dict(doc.get("scene", {}))
    if "nx" not in scene or "ny" not in scene:
        raise BadConfigError("scene config needs nx and ny")
    band = BandId(scene.pop("band", "P"))
    pols = parse_pols(scene.pop("pols", "HH+HV+VV"))
    if args.seed is not None:
        scene["seed"] = args.seed
    scene.setdefault("seed", 0)
    if "height_range_m" in scene:
        scene["height_range_m"] = tuple(scene["height_range_m"])
    try:
        params = SceneParams(**scene)
    except TypeError as exc:
        raise BadConfigError(str(exc)) from exc
    chm = gen_height_field(params)
    cube = gen_cube(chm, band, pols, params)
    os.makedirs(args.out, exist_ok=True)
    cube_path, chm_path = _scene_dir(args.out)
    fileio.write_cube(cube, out.add(cube_path))
    fileio.write_chm(chm, out.add(chm_path))
    print(f"wrote {cube_path} ({band.value}, {pols_to_str(pols)}, "
          f"{cube.nx}x{cube.ny}x{cube.nz}) and {chm_path}")


# -- split --------------------------------------------------------------------

def _parse_ratios(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) == 2:  # train,test shorthand (no val region)
        train, test = (float(p) for p in parts)
        return (train, 0.0, test)
    if len(parts) != 3:
        raise BadSpecError("ratios must be 'train,val,test'")
    train, val, test = (float(p) for p in parts)
    return (train, val, test)


def cmd_split(args, out: _OutputTracker) -> None:
    scene = _read_scene(args.scene)
    spec = SplitSpec(
        strategy=SplitStrategy(args.strategy),
        ratios=_parse_ratios(args.ratios),
        orientation=SwathOrientation(args.orientation),
        exact_quadrant_ratios=args.exact,
        seed=args.seed if args.seed is not None else 0,
    )
    assignment = make_split(scene.nx, scene.ny, spec)
    fileio.write_split(assignment, out.add(args.out))
    counts = assignment.counts()
    print(f"wrote {args.out}: " + " ".join(
        f"{lbl.name}={counts[lbl]}" for lbl in
        (SplitLabel.Train, SplitLabel.Val, SplitLabel.Test)))


# -- tabular ------------------------------------------------------------------

def _parse_bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise BadSpecError(f"expected true/false, got {text!r}")


def cmd_tabular(args, out: _OutputTracker) -> None:
    scene = _read_scene(args.scene)
    assignment = fileio.read_split(args.split)
    pols = parse_pols(args.pols) if args.pols else tuple(scene.cube.pols)
    seed = args.seed if args.seed is not None else 0
    scaler = fit_scene_scaler(scene, assignment, pols, args.db)
    settings = ([True, False] if args.include_xy == "both"
                else [_parse_bool(args.include_xy)])
    label = args.strategy_label or Path(args.split).stem
    rows = []
    for include_xy in settings:
        result = tabular.run_tabular_experiment(
            scene, assignment, pols, include_xy, seed=seed,
            scaler=scaler, use_db=args.db)
        rows.append((label, result))
        print(f"include_xy={include_xy}: selected {result.selected.name} "
              f"val_mae={result.val_mae:.3f} test_mae={result.test_mae:.3f} "
              f"(mean-baseline test {result.baseline_test_mae:.3f})")
    tabular.write_tabular_csv(rows, out.add(args.out))


# -- train --------------------------------------------------------------------

_BACKBONES = {"model1": Backbone.Model1, "model2": Backbone.Model2,
              "model3": Backbone.Model3}
_COLLAPSES = {"conv": CollapseKind.ConvZ, "gap": CollapseKind.GapZ,
              "progressive": CollapseKind.ProgressiveZ}


def cmd_train(args, out: _OutputTracker) -> None:
    scene = _read_scene(args.scene)
    assignment = fileio.read_split(args.split)
    pols = parse_pols(args.pols) if args.pols else tuple(scene.cube.pols)
    model_spec = ModelSpec(
        backbone=_BACKBONES[args.model],
        collapse=_COLLAPSES[args.collapse],
        in_channels=len(pols),
        base_width=args.base_width,
        dropout_rate=args.dropout,
        batch_norm=not args.no_batch_norm,
    )
    cfg = TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        max_epochs=args.max_epochs,
        patience_epochs=args.patience,
        seed=args.seed if args.seed is not None else 0,
        patch_w=args.W,
        train_stride=args.stride,
        use_db_transform=args.db,
    )
    result = run_experiment(scene, assignment, model_spec, cfg, pols)

    os.makedirs(args.out, exist_ok=True)
    from .trainer import write_history_csv

    save_model(result.model, out.add(Path(args.out) / "model.tmdl"))
    write_history_csv(result.history, out.add(Path(args.out) / "history.csv"))
    metrics.write_metrics_csv(
        [result.reports[lbl] for lbl in (SplitLabel.Train, SplitLabel.Val,
                                         SplitLabel.Test)],
        out.add(Path(args.out) / "metrics.csv"))
    with open(out.add(Path(args.out) / "scaler.json"), "w") as fh:
        json.dump({**metrics.scaler_to_json(result.scaler),
                   "use_db_transform": cfg.use_db_transform,
                   "pols": pols_to_str(pols)}, fh)
    with open(out.add(Path(args.out) / "config.json"), "w") as fh:
        json.dump(_train_config_doc(model_spec, cfg, args), fh, indent=2)
    test = result.reports[SplitLabel.Test]
    print(f"best epoch {result.history.best_epoch}: "
          f"val MAE {result.history.best_val_mae:.3f} m, "
          f"test MAE {test.mae_m:.3f} m (norm {test.normalized_mae:.3f})")


def _train_config_doc(model_spec: ModelSpec, cfg: TrainConfig, args) -> dict:
    return {
        "model": {
            "backbone": model_spec.backbone.value,
            "collapse": model_spec.collapse.value,
            "in_channels": model_spec.in_channels,
            "base_width": model_spec.base_width,
            "dropout_rate": model_spec.dropout_rate,
            "batch_norm": model_spec.batch_norm,
        },
        "train": {
            "learning_rate": cfg.learning_rate,
            "batch_size": cfg.batch_size,
            "max_epochs": cfg.max_epochs,
            "patience_epochs": cfg.patience_epochs,
            "seed": cfg.seed,
            "patch_w": cfg.patch_w,
            "train_stride": cfg.effective_train_stride,
            "eval_stride": cfg.effective_eval_stride,
            "use_db_transform": cfg.use_db_transform,
        },
        "split": {"file": str(args.split)},
    }


# -- sweep --------------------------------------------------------------------

@dataclass(frozen=True)
class _QuadraticObjective:
    """Analytic benchmark objective: (log10(x) - target)^2 on one dimension."""

    dim: str
    target: float

    def __call__(self, point: dict) -> float:
        import math

        return (math.log10(point[self.dim]) - self.target) ** 2


@dataclass(frozen=True)
class _CnnObjective:
    """Train a small CNN per trial; the objective is best validation MAE.

    Trial params map onto TrainConfig/ModelSpec fields by name
    (learning_rate, batch_size, dropout_rate, collapse, backbone,
    base_width).  Test data is never touched.
    """

    scene: fileio.AlignedScene
    assignment: object
    base: dict

    def __call__(self, point: dict) -> float:
        model_spec = ModelSpec(
            backbone=_BACKBONES[point.get("backbone", self.base["backbone"])],
            collapse=_COLLAPSES[point.get("collapse", self.base["collapse"])],
            in_channels=len(self.scene.cube.pols),
            base_width=int(point.get("base_width", self.base["base_width"])),
            dropout_rate=float(point.get("dropout_rate", 0.0)),
            batch_norm=True,
        )
        cfg = TrainConfig(
            learning_rate=float(point.get("learning_rate", 1e-4)),
            batch_size=int(point.get("batch_size", 4)),
            max_epochs=int(self.base["max_epochs"]),
            patience_epochs=int(self.base["patience_epochs"]),
            seed=int(self.base["seed"]),
            patch_w=int(self.base["patch_w"]),
        )
        result = run_experiment(self.scene, self.assignment, model_spec, cfg)
        return result.history.best_val_mae


def _build_objective(kind: dict, args):
    name = kind.get("kind", "quadratic_log10")
    if name == "quadratic_log10":
        return _QuadraticObjective(dim=kind.get("dim", "learning_rate"),
                                   target=float(kind.get("target", -3.0)))
    if name == "cnn":
        if not args.scene or not args.split:
            raise BadConfigError("cnn sweep objective needs --scene and --split")
        scene = _read_scene(args.scene)
        assignment = fileio.read_split(args.split)
        base = {
            "backbone": kind.get("backbone", "model2"),
            "collapse": kind.get("collapse", "gap"),
            "base_width": kind.get("base_width", 8),
            "max_epochs": kind.get("max_epochs", 10),
            "patience_epochs": kind.get("patience_epochs", 10),
            "patch_w": kind.get("patch_w", 16),
            "seed": args.seed if args.seed is not None else 0,
        }
        return _CnnObjective(scene=scene, assignment=assignment, base=base)
    raise BadConfigError(f"unknown sweep objective kind: {name!r}")


def cmd_sweep(args, out: _OutputTracker) -> None:
    space, objective_doc = hpo.load_space_file(args.space)
    objective = _build_objective(objective_doc, args)
    executor = None
    if args.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        executor = ProcessPoolExecutor(max_workers=args.jobs)
    try:
        best, trials = hpo.sweep(space, objective, budget=args.budget,
                                 seed=args.seed if args.seed is not None else 0,
                                 batch_size=max(1, args.jobs), executor=executor)
    finally:
        if executor is not None:
            executor.shutdown()
    os.makedirs(args.out, exist_ok=True)
    hpo.write_sweep_csv(space, trials, out.add(Path(args.out) / "sweep.csv"))
    with open(out.add(Path(args.out) / "best.json"), "w") as fh:
        json.dump({"trial_id": best.trial_id, "params": best.params,
                   "val_mae": best.value}, fh, indent=2)
    n_failed = sum(t.status == "failed" for t in trials)
    print(f"best trial {best.trial_id}: {best.params} -> {best.value:.6f} "
          f"({len(trials)} trials, {n_failed} failed)")


# -- reconstruct --------------------------------------------------------------

def cmd_reconstruct(args, out: _OutputTracker) -> None:
    scene = _read_scene(args.scene)
    model = load_model(args.checkpoint)
    scaler_path = args.scaler or Path(args.checkpoint).parent / "scaler.json"
    doc = _load_json(scaler_path)
    scaler = metrics.scaler_from_json(doc)
    use_db = bool(doc.get("use_db_transform", False))
    if "pols" in doc:
        pols = parse_pols(doc["pols"])
        if tuple(pols) != tuple(scene.cube.pols):
            from .trainer import _select_pols

            scene = _select_pols(scene, pols)

    rmap = recon.reconstruct(model, scene, args.W, args.stride, scaler, use_db)
    err, report = recon.error_map(rmap, scene.chm)
    os.makedirs(args.out, exist_ok=True)
    base = Path(args.out)
    pred_chm = fileio.CanopyHeightMap(
        heights_m=rmap.heights_m.astype(np.float32),
        az_spacing_m=scene.chm.az_spacing_m, rng_spacing_m=scene.chm.rng_spacing_m)
    fileio.write_chm(pred_chm, out.add(base / "pred.chm"), allow_negative=True)
    err_chm = fileio.CanopyHeightMap(
        heights_m=err.astype(np.float32),
        az_spacing_m=scene.chm.az_spacing_m, rng_spacing_m=scene.chm.rng_spacing_m)
    fileio.write_chm(err_chm, out.add(base / "error.chm"), allow_negative=True)
    recon.write_pgm(rmap.heights_m, out.add(base / "pred.pgm"))
    out.add(base / "pred_mask.pgm")
    recon.write_pgm(err, out.add(base / "error.pgm"))
    out.add(base / "error_mask.pgm")
    metrics.write_metrics_csv([report], out.add(base / "metrics.csv"))
    with open(out.add(base / "meta.json"), "w") as fh:
        json.dump({"patch_w": rmap.patch_w, "stride": rmap.stride,
                   "stitching": "overlap-average" if rmap.overlapping else "disjoint",
                   "uncovered_pixels": int(rmap.uncovered.sum()),
                   "band": rmap.band.value, "pols": pols_to_str(rmap.pols)}, fh)
    print(f"reconstructed {scene.nx}x{scene.ny}: MAE {report.mae_m:.3f} m over "
          f"{report.n_samples} pixels, {int(rmap.uncovered.sum())} uncovered")


# -- report -------------------------------------------------------------------

def cmd_report(args, out: _OutputTracker) -> None:
    reports = []
    for path in args.inputs:
        reports.extend(metrics.read_metrics_csv(path))
    rows = recon.band_report(reports)
    recon.write_band_report_csv(rows, out.add(args.out))
    for r in rows:
        print(f"{r.band.value:7s} {pols_to_str(r.pols):10s} "
              f"test MAE {r.test_mae:.3f} m, normalized {r.norm_test_mae:.3f}")


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tomoheight",
        description="Forest canopy height estimation from tomographic SAR cubes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene (cube + height map)")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--out", required=True, help="output scene directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="generate a geographic split map")
    p.add_argument("--scene", required=True)
    p.add_argument("--strategy", choices=[s.value for s in SplitStrategy],
                   default="quadrant")
    p.add_argument("--ratios", default="0.5,0.25,0.25",
                   help="train,val,test fractions (must sum to 1)")
    p.add_argument("--orientation", choices=[o.value for o in SwathOrientation],
                   default="along_range", help="swath stacking axis")
    p.add_argument("--exact", action="store_true",
                   help="rebalance quadrant val/test to hit the exact ratios")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output .smap path")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("tabular", help="single-pixel baselines with model selection")
    p.add_argument("--scene", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--include-xy", default="both",
                   help="true, false, or both (runs the ablation)")
    p.add_argument("--pols", default=None, help="e.g. HH or HH+HV+VV")
    p.add_argument("--db", action="store_true", help="apply the dB transform")
    p.add_argument("--strategy-label", default=None,
                   help="strategy column value in the report")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_tabular)

    p = sub.add_parser("train", help="train a volumetric CNN regressor")
    p.add_argument("--scene", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--model", choices=sorted(_BACKBONES), default="model2")
    p.add_argument("--collapse", choices=sorted(_COLLAPSES), default="gap")
    p.add_argument("--W", type=int, default=16, choices=(16, 32, 64),
                   help="patch width")
    p.add_argument("--base-width", type=int, default=None,
                   help="channel width (default: backbone budget width)")
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--no-batch-norm", action="store_true")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--max-epochs", type=int, default=150)
    p.add_argument("--patience", type=int, default=15)
    p.add_argument("--stride", type=int, default=None,
                   help="training window stride (default W/2)")
    p.add_argument("--db", action="store_true", help="apply the dB transform")
    p.add_argument("--pols", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="Bayesian hyperparameter search")
    p.add_argument("--space", required=True, help="sweep spec JSON")
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--jobs", type=int, default=1,
                   help="parallel trials per synchronous batch")
    p.add_argument("--scene", default=None, help="scene for cnn objectives")
    p.add_argument("--split", default=None, help="split map for cnn objectives")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("reconstruct", help="stitch a full-scene height map")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--W", type=int, default=16, choices=(16, 32, 64))
    p.add_argument("--stride", type=int, default=None,
                   help="tiling stride (default W: disjoint)")
    p.add_argument("--scaler", default=None,
                   help="scaler JSON (default: next to the checkpoint)")
    p.add_argument("--out", required=True, help="output map directory")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("report", help="combine run metrics into a band table")
    p.add_argument("--inputs", nargs="+", required=True, help="metrics.csv files")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_report)

    return parser


def _apply_thread_cap() -> None:
    cap = os.environ.get("TOMOHEIGHT_THREADS")
    if not cap:
        return
    try:
        n = max(1, int(cap))
    except ValueError:
        raise BadConfigError(f"TOMOHEIGHT_THREADS must be an integer, got {cap!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=n)
    except ImportError:
        pass


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "reconstruct" and args.stride is None:
        args.stride = args.W
    out = _OutputTracker()
    try:
        _apply_thread_cap()
        args.func(args, out)
    except TomoHeightError as exc:
        out.cleanup()
        print(f"{exc.name}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, KeyError, OSError) as exc:
        out.cleanup()
        kind = "BadConfig" if isinstance(exc, (ValueError, KeyError)) else "DataError"
        print(f"{kind}: {exc}", file=sys.stderr)
        return 2 if kind == "BadConfig" else 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
