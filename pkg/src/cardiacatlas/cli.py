"""Command-line entry point wiring the full pipeline.

Subcommands: ``gen-data``, ``train``, ``export-atlas``, ``extract-features``,
``fit-classifier``, ``evaluate``, ``grid``, ``report``.

Every subcommand accepts ``--seed``, ``--deterministic/--no-deterministic``
(default on), ``--out-dir`` (falling back to the ``ATLAS_ISTN_OUT``
environment variable, then ``./runs``), and ``--config FILE`` — a YAML
key/value file whose keys are the flag names with underscores; explicit flags
override config values. Exit codes: 0 success, 1 usage error, 2 runtime
failure. Failures print a one-line JSON error record to stderr.

Each run writes ``run_manifest_<command>.json`` into the out-dir recording
the command, its resolved parameters, content hashes of file inputs, and
paths+hashes of outputs (relative to the out-dir). Under the determinism
switch the timestamp is zeroed, so identical invocations produce identical
manifests.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import yaml

from . import __version__

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

_RUN_MANIFEST_VERSION = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; the contract here is 1."""

    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}".rstrip())


def _hash_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _rel(path: Path, root: Path) -> str:
    try:
        return Path(path).resolve().relative_to(root.resolve()).as_posix()
    except ValueError:
        return str(path)


def _write_run_manifest(out_dir: Path, command: str, params: dict,
                        inputs: list, outputs: list, deterministic: bool) -> Path:
    created = ("1970-01-01T00:00:00Z" if deterministic
               else datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ"))
    payload = {
        "format_version": _RUN_MANIFEST_VERSION,
        "package_version": __version__,
        "command": command,
        "params": params,
        "inputs": {str(p): _hash_file(p) for p in sorted(map(str, inputs))},
        "outputs": {
            _rel(p, out_dir): _hash_file(p)
            for p in sorted(outputs, key=lambda q: _rel(q, out_dir))
        },
        "created": created,
    }
    path = out_dir / f"run_manifest_{command.replace('-', '_')}.json"
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return path


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as e:
        raise UsageError(f"malformed config file {p}: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise UsageError(f"config file {p} must be a key/value mapping")
    return data


_GLOBAL_KEYS = {"seed", "deterministic", "out_dir"}


def _effective(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags, with unknown keys rejected."""
    config = _load_config_file(getattr(args, "config", None))
    known = set(defaults) | _GLOBAL_KEYS
    unknown = set(config) - known
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}; "
                         f"known keys: {sorted(known)}")
    merged = dict(defaults)
    merged.update({k: v for k, v in config.items() if k not in _GLOBAL_KEYS})
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            merged[key] = val
    return merged


def _global_value(args, config: dict, key: str, fallback):
    val = getattr(args, key, None)
    if val is not None:
        return val
    if key in config:
        return config[key]
    return fallback


def _resolve_globals(args) -> tuple[int, bool, Path]:
    config = _load_config_file(getattr(args, "config", None))
    seed = int(_global_value(args, config, "seed", 0))
    deterministic = bool(_global_value(args, config, "deterministic", True))
    out = _global_value(args, config, "out_dir",
                        os.environ.get("ATLAS_ISTN_OUT", "runs"))
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    return seed, deterministic, out_dir


def _floats_csv(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in str(text).split(","))
    except ValueError as e:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from e


def _print_summary(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

_GEN_DEFAULTS = {
    "n": 100, "hlhs_fraction": 0.1, "height": 112, "width": 144,
    "speckle_strength": 0.25, "shadowing": False,
    "rotation_jitter": 8.0, "translation_jitter": 6.0, "scale_jitter": 0.1,
    "lv_shrink_range": "0.15,0.45", "split_fractions": "0.70,0.15,0.15",
    "wh_excludes_chambers": True,
}


def _cmd_gen_data(args) -> int:
    from . import phantom
    seed, deterministic, out_dir = _resolve_globals(args)
    p = _effective(args, _GEN_DEFAULTS)
    cfg = phantom.PhantomConfig(
        n_samples=int(p["n"]), image_height=int(p["height"]),
        image_width=int(p["width"]), hlhs_fraction=float(p["hlhs_fraction"]),
        lv_shrink_range=_floats_csv(p["lv_shrink_range"]),
        rotation_jitter=float(p["rotation_jitter"]),
        translation_jitter=float(p["translation_jitter"]),
        scale_jitter=float(p["scale_jitter"]),
        speckle_strength=float(p["speckle_strength"]),
        shadowing=bool(p["shadowing"]),
        wh_excludes_chambers=bool(p["wh_excludes_chambers"]),
        split_fractions=_floats_csv(p["split_fractions"]),
        seed=seed,
    )
    manifest = phantom.generate_dataset(cfg, out_dir)
    outputs = [out_dir / "manifest.json"]
    outputs += [out_dir / e.image for e in manifest.samples]
    outputs += [out_dir / e.label for e in manifest.samples]
    params = {**{k: p[k] for k in sorted(_GEN_DEFAULTS)}, "seed": seed}
    _write_run_manifest(out_dir, "gen-data", params, [], outputs, deterministic)
    _print_summary({
        "command": "gen-data", "n": cfg.n_samples,
        "manifest": str(out_dir / "manifest.json"),
        "splits": {s: len(manifest.ids_for_split(s))
                   for s in ("train", "val", "test")},
        "hlhs": sum(e.hlhs for e in manifest.samples),
    })
    return EXIT_OK


_TRAIN_DEFAULTS = {
    "manifest": None, "variant": "atlas_istn", "epochs": 20, "batch_size": 8,
    "lr": 1e-3, "atlas_lr": 1e-2, "omega": 1.0, "lam": 1.0, "gamma": 1.0,
    "warmup_epochs": 2, "ssn_rank": 5, "exp_steps": 6, "velocity_scale": 1.0,
    "seg_loss": "mse", "mc_samples": 10, "checkpoint_interval": 0,
    "resume_from": None,
}


def _train_config(p: dict, seed: int, deterministic: bool, out_dir: Path):
    from . import training
    if not p["manifest"]:
        raise UsageError("--manifest is required")
    return training.TrainConfig(
        manifest=str(p["manifest"]), out_dir=str(out_dir),
        variant=str(p["variant"]), epochs=int(p["epochs"]),
        batch_size=int(p["batch_size"]), learning_rate=float(p["lr"]),
        atlas_learning_rate=float(p["atlas_lr"]),
        weights={"omega": float(p["omega"]), "lam": float(p["lam"]),
                 "gamma": float(p["gamma"])},
        warmup_epochs=int(p["warmup_epochs"]), ssn_rank=int(p["ssn_rank"]),
        exp_steps=int(p["exp_steps"]), velocity_scale=float(p["velocity_scale"]),
        seg_loss=str(p["seg_loss"]), mc_samples=int(p["mc_samples"]),
        checkpoint_interval=int(p["checkpoint_interval"]),
        resume_from=p["resume_from"], seed=seed, deterministic=deterministic,
    )


def _cmd_train(args) -> int:
    from . import training
    seed, deterministic, out_dir = _resolve_globals(args)
    p = _effective(args, _TRAIN_DEFAULTS)
    cfg = _train_config(p, seed, deterministic, out_dir)
    result = training.train(cfg)
    outputs = [result.checkpoint_best, result.checkpoint_last, result.log_path]
    params = {**{k: p[k] for k in sorted(_TRAIN_DEFAULTS)}, "seed": seed}
    _write_run_manifest(out_dir, "train", params, [Path(cfg.manifest)],
                        outputs, deterministic)
    _print_summary({
        "command": "train", "variant": cfg.variant,
        "best_val_dice": round(result.best_val_dice, 6),
        "best_epoch": result.best_epoch,
        "epochs_run": result.epochs_run,
        "param_count": result.param_count,
        "checkpoint_best": str(result.checkpoint_best),
        "checkpoint_last": str(result.checkpoint_last),
    })
    return EXIT_OK


_EXPORT_DEFAULTS = {"checkpoint": None, "compare_with": None}


def _cmd_export_atlas(args) -> int:
    from . import training
    seed, deterministic, out_dir = _resolve_globals(args)
    p = _effective(args, _EXPORT_DEFAULTS)
    if not p["checkpoint"]:
        raise UsageError("--checkpoint is required")
    export = training.export_atlas(p["checkpoint"], out_dir)
    summary = {
        "command": "export-atlas",
        "atlas_probs": str(export.probs_path),
        "atlas_label": str(export.label_path),
        "atlas_intensity": str(export.intensity_path),
    }
    inputs = [Path(p["checkpoint"])]
    if p["compare_with"]:
        summary["mean_abs_diff"] = training.atlas_difference(
            p["checkpoint"], p["compare_with"])
        inputs.append(Path(p["compare_with"]))
    outputs = [export.probs_path, export.label_path,
               export.intensity_path, export.meta_path]
    params = {**{k: p[k] for k in sorted(_EXPORT_DEFAULTS)}, "seed": seed}
    _write_run_manifest(out_dir, "export-atlas", params, inputs, outputs,
                        deterministic)
    _print_summary(summary)
    return EXIT_OK


_EXTRACT_DEFAULTS = {
    "manifest": None, "checkpoint": None, "split": "all",
    "wh_excludes_chambers": True,
}
_SPLITS = ("train", "val", "test")


def _cmd_extract_features(args) -> int:
    from . import features as feat
    from . import networks, training
    from .evaluation import _feature_rows_from_maps
    seed, deterministic, out_dir = _resolve_globals(args)
    p = _effective(args, _EXTRACT_DEFAULTS)
    if not p["manifest"]:
        raise UsageError("--manifest is required")
    split = str(p["split"])
    if split not in (*_SPLITS, "all"):
        raise UsageError(f"--split must be one of {_SPLITS} or 'all'")
    splits = _SPLITS if split == "all" else (split,)

    model = None
    source = "expert_gt"
    inputs = [Path(p["manifest"])]
    if p["checkpoint"]:
        model, _ = networks.load_checkpoint(p["checkpoint"])
        source = "seg_prediction"
        inputs.append(Path(p["checkpoint"]))

    outputs = []
    counts = {}
    for sp in splits:
        data = training.load_split_tensors(p["manifest"], sp)
        if model is None:
            maps = data.labelmaps.numpy()
        else:
            maps = training.predict_labelmaps(model, data.images)
        rows = _feature_rows_from_maps(
            data.ids, maps, data.hlhs, source,
            wh_excludes_chambers=bool(p["wh_excludes_chambers"]))
        path = out_dir / f"features_{sp}.csv"
        feat.write_features_csv(path, rows)
        outputs.append(path)
        counts[sp] = len(rows)
    params = {**{k: p[k] for k in sorted(_EXTRACT_DEFAULTS)}, "seed": seed}
    _write_run_manifest(out_dir, "extract-features", params, inputs, outputs,
                        deterministic)
    _print_summary({"command": "extract-features", "source": source,
                    "rows": counts,
                    "files": [str(o) for o in outputs]})
    return EXIT_OK


_FIT_DEFAULTS = {
    "features": None, "model": None, "l2": 1.0, "balanced": True,
    "optimize": True, "sigma_f": 1.0, "length": 1.0,
}


def _cmd_fit_classifier(args) -> int:
    import numpy as np

    from . import classifiers as clf
    from . import features as feat
    seed, deterministic, out_dir = _resolve_globals(args)
    p = _effective(args, _FIT_DEFAULTS)
    if not p["features"]:
        raise UsageError("--features is required")
    kind = p["model"]
    if kind not in ("logistic", "gp"):
        raise UsageError("--model must be 'logistic' or 'gp'")
    rows = feat.read_features_csv(p["features"])
    X, y, _ = feat.feature_matrix(rows)
    if kind == "logistic":
        model = clf.fit_logistic(X, y, l2=float(p["l2"]),
                                 balanced=bool(p["balanced"]))
        info = {"n_iter": model.n_iter}
    else:
        model = clf.fit_gp(X, y, optimize=bool(p["optimize"]),
                           sigma_f=float(p["sigma_f"]),
                           length=float(p["length"]))
        info = {"lml": round(model.lml, 6),
                "sigma_f": round(float(np.exp(model.log_sigma_f)), 6),
                "length": round(float(np.exp(model.log_length)), 6)}
    model_path = out_dir / f"model_{kind}.json"
    clf.save_model(model_path, model)
    params = {**{k: p[k] for k in sorted(_FIT_DEFAULTS)}, "seed": seed}
    _write_run_manifest(out_dir, "fit-classifier", params,
                        [Path(p["features"])], [model_path], deterministic)
    _print_summary({"command": "fit-classifier", "kind": kind,
                    "n_train": int(y.size), "model": str(model_path), **info})
    return EXIT_OK


_EVAL_DEFAULTS = {
    "manifest": None, "split": "test", "checkpoint": None,
    "classifier_model": None, "disease_head": False, "variant_name": None,
    "wh_excludes_chambers": True,
}


def _cmd_evaluate(args) -> int:
    import numpy as np

    from . import classifiers as clf
    from . import evaluation as ev
    from . import features as feat
    from . import networks, training
    seed, deterministic, out_dir = _resolve_globals(args)
    p = _effective(args, _EVAL_DEFAULTS)
    if not p["manifest"]:
        raise UsageError("--manifest is required")
    if not p["classifier_model"] and not p["disease_head"]:
        raise UsageError("need --classifier-model and/or --disease-head")
    if p["disease_head"] and not p["checkpoint"]:
        raise UsageError("--disease-head requires --checkpoint")
    split = str(p["split"])
    if split not in _SPLITS:
        raise UsageError(f"--split must be one of {_SPLITS}")

    data = training.load_split_tensors(p["manifest"], split)
    inputs = [Path(p["manifest"])]

    omega = lam = gamma = 0.0
    if p["checkpoint"]:
        model, payload = networks.load_checkpoint(p["checkpoint"])
        inputs.append(Path(p["checkpoint"]))
        variant = p["variant_name"] or model.cfg.variant
        weights = payload.get("train_config", {}).get("weights", {})
        omega = weights.get("omega", 0.0)
        lam = weights.get("lam", 0.0)
        gamma = weights.get("gamma", 0.0)
        maps = training.predict_labelmaps(model, data.images)
        dice_matrix = np.stack([
            ev.dice_per_class(pm, gt)
            for pm, gt in zip(maps, data.labelmaps.numpy())])
        source = "seg_prediction"
    else:
        model = None
        variant = p["variant_name"] or "expert"
        maps = data.labelmaps.numpy()
        dice_matrix = None
        source = "expert_gt"

    rows = ev._feature_rows_from_maps(
        data.ids, maps, data.hlhs, source,
        wh_excludes_chambers=bool(p["wh_excludes_chambers"]))
    X, y, ids = feat.feature_matrix(rows)

    columns = []
    if p["classifier_model"]:
        cmodel = clf.load_model(p["classifier_model"])
        inputs.append(Path(p["classifier_model"]))
        probs, _ = clf.predict(cmodel, X)
        columns.append((cmodel.kind, probs))
    if p["disease_head"]:
        columns.append(("disease_head",
                        training.predict_disease_probs(model, data.images)))

    outputs = []
    summary_reports = []
    provenance = {
        "manifest": str(p["manifest"]), "split": split, "seed": seed,
        "checkpoint": p["checkpoint"], "feature_source": source,
    }
    for kind, probs in columns:
        report = ev.build_report(
            variant=variant, classifier=kind, omega=omega, lam=lam,
            gamma=gamma, dice_matrix=dice_matrix, labels=y, probs=probs,
            provenance=provenance)
        rpath = out_dir / f"report_{variant}_{kind}.json"
        report.save(rpath)
        ppath = out_dir / f"predictions_{kind}.csv"
        ev._write_predictions_csv(ppath, ids, probs)
        cpath = ev.render_confusion(report.confusion,
                                    out_dir / f"{variant}_{kind}_confusion.png",
                                    title=f"{variant} / {kind}")
        outputs += [rpath, ppath, cpath]
        summary_reports.append({"report": str(rpath), "classifier": kind,
                                "auc": report.auc})
    params = {**{k: p[k] for k in sorted(_EVAL_DEFAULTS)}, "seed": seed}
    _write_run_manifest(out_dir, "evaluate", params, inputs, outputs,
                        deterministic)
    _print_summary({"command": "evaluate", "variant": variant,
                    "reports": summary_reports})
    return EXIT_OK


_GRID_DEFAULTS = {
    "manifest": None, "variants": "expert,unet,ssn,atlas",
    "classifiers": "logistic,gp", "epochs": 20, "batch_size": 8,
}


def _cmd_grid(args) -> int:
    from . import evaluation as ev
    seed, deterministic, out_dir = _resolve_globals(args)
    p = _effective(args, _GRID_DEFAULTS)
    if not p["manifest"]:
        raise UsageError("--manifest is required")
    variants = [v.strip() for v in str(p["variants"]).split(",") if v.strip()]
    kinds = [c.strip() for c in str(p["classifiers"]).split(",") if c.strip()]
    for kind in kinds:
        if kind not in ("logistic", "gp"):
            raise UsageError(f"unknown classifier {kind!r}")
    try:
        ev.expand_variants(variants)
    except ValueError as e:
        raise UsageError(str(e)) from e
    result = ev.run_experiment_grid(
        p["manifest"], out_dir, variants=variants, classifier_kinds=kinds,
        epochs=int(p["epochs"]), seed=seed, deterministic=deterministic,
        train_overrides={"batch_size": int(p["batch_size"])})
    params = {**{k: p[k] for k in sorted(_GRID_DEFAULTS)}, "seed": seed}
    _write_run_manifest(out_dir, "grid", params, [Path(p["manifest"])],
                        list(result.report_paths) + [result.summary_path],
                        deterministic)
    _print_summary({"command": "grid",
                    "reports": [str(r) for r in result.report_paths],
                    "summary": str(result.summary_path)})
    return EXIT_OK


_REPORT_DEFAULTS = {"reports": None}


def _cmd_report(args) -> int:
    from . import evaluation as ev
    seed, deterministic, out_dir = _resolve_globals(args)
    p = _effective(args, _REPORT_DEFAULTS)
    root = Path(p["reports"]) if p["reports"] else out_dir
    if not root.exists():
        raise FileNotFoundError(f"reports directory not found: {root}")
    report_paths = sorted(root.rglob("report_*.json"))
    if not report_paths:
        raise FileNotFoundError(f"no report_*.json files under {root}")
    summary_path = ev.summarize_reports(report_paths, out_dir)
    outputs = [summary_path, out_dir / "summary.md"]
    for rpath in report_paths:
        report = ev.MetricsReport.load(rpath)
        png = out_dir / f"{report.variant}_{report.classifier}_confusion.png"
        ev.render_confusion(report.confusion, png,
                            title=f"{report.variant} / {report.classifier}")
        outputs.append(png)
    params = {**{k: p[k] for k in sorted(_REPORT_DEFAULTS)}, "seed": seed}
    _write_run_manifest(out_dir, "report", params, report_paths, outputs,
                        deterministic)
    _print_summary({"command": "report", "n_reports": len(report_paths),
                    "summary": str(summary_path)})
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser assembly and dispatch
# ---------------------------------------------------------------------------

def _add_common(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--seed", type=int, default=None,
                    help="root seed for all derived randomness (default 0)")
    sp.add_argument("--deterministic", default=None,
                    action=argparse.BooleanOptionalAction,
                    help="bit-reproducible mode (default on)")
    sp.add_argument("--out-dir", default=None,
                    help="output directory (default: $ATLAS_ISTN_OUT or ./runs)")
    sp.add_argument("--config", default=None,
                    help="YAML key/value file; flags override its values")


def build_parser() -> _Parser:
    parser = _Parser(prog="cardiac-atlas",
                     description="Synthetic cardiac phantoms, joint "
                                 "segmentation/registration training, and "
                                 "shape-based disease classification.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a phantom dataset")
    _add_common(p)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--hlhs-fraction", type=float, default=None)
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--speckle-strength", type=float, default=None)
    p.add_argument("--shadowing", default=None,
                   action=argparse.BooleanOptionalAction)
    p.add_argument("--rotation-jitter", type=float, default=None)
    p.add_argument("--translation-jitter", type=float, default=None)
    p.add_argument("--scale-jitter", type=float, default=None)
    p.add_argument("--lv-shrink-range", default=None,
                   help="min,max area shrink factor for diseased hearts")
    p.add_argument("--split-fractions", default=None, help="train,val,test")
    p.add_argument("--wh-excludes-chambers", default=None,
                   action=argparse.BooleanOptionalAction)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model variant")
    _add_common(p)
    p.add_argument("--manifest", default=None)
    p.add_argument("--variant", default=None,
                   choices=("unet", "ssn", "atlas_istn"))
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--atlas-lr", type=float, default=None)
    p.add_argument("--omega", type=float, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--warmup-epochs", type=int, default=None)
    p.add_argument("--ssn-rank", type=int, default=None)
    p.add_argument("--exp-steps", type=int, default=None)
    p.add_argument("--velocity-scale", type=float, default=None)
    p.add_argument("--seg-loss", default=None, choices=("mse", "mc"))
    p.add_argument("--mc-samples", type=int, default=None)
    p.add_argument("--checkpoint-interval", type=int, default=None)
    p.add_argument("--resume-from", default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("export-atlas", help="export a checkpoint's atlas")
    _add_common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--compare-with", default=None,
                   help="second checkpoint; prints mean abs atlas difference")
    p.set_defaults(func=_cmd_export_atlas)

    p = sub.add_parser("extract-features",
                       help="area-ratio features from expert labels or a checkpoint")
    _add_common(p)
    p.add_argument("--manifest", default=None)
    p.add_argument("--checkpoint", default=None,
                   help="segment with this model; omit for expert labels")
    p.add_argument("--split", default=None,
                   choices=("train", "val", "test", "all"))
    p.add_argument("--wh-excludes-chambers", default=None,
                   action=argparse.BooleanOptionalAction)
    p.set_defaults(func=_cmd_extract_features)

    p = sub.add_parser("fit-classifier", help="fit a classifier on features")
    _add_common(p)
    p.add_argument("--features", default=None, help="training features CSV")
    p.add_argument("--model", default=None, choices=("logistic", "gp"))
    p.add_argument("--l2", type=float, default=None)
    p.add_argument("--balanced", default=None,
                   action=argparse.BooleanOptionalAction)
    p.add_argument("--optimize", default=None,
                   action=argparse.BooleanOptionalAction,
                   help="GP: maximize marginal likelihood (default on)")
    p.add_argument("--sigma-f", type=float, default=None)
    p.add_argument("--length", type=float, default=None)
    p.set_defaults(func=_cmd_fit_classifier)

    p = sub.add_parser("evaluate", help="metrics report for one variant")
    _add_common(p)
    p.add_argument("--manifest", default=None)
    p.add_argument("--split", default=None, choices=_SPLITS)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--classifier-model", default=None)
    p.add_argument("--disease-head", default=None,
                   action=argparse.BooleanOptionalAction)
    p.add_argument("--variant-name", default=None)
    p.add_argument("--wh-excludes-chambers", default=None,
                   action=argparse.BooleanOptionalAction)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("grid", help="train and evaluate the full variant grid")
    _add_common(p)
    p.add_argument("--manifest", default=None)
    p.add_argument("--variants", default=None,
                   help="comma list: expert,unet,ssn,atlas or specific rows")
    p.add_argument("--classifiers", default=None, help="comma list: logistic,gp")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.set_defaults(func=_cmd_grid)

    p = sub.add_parser("report", help="render tables and plots from reports")
    _add_common(p)
    p.add_argument("--reports", default=None,
                   help="directory searched recursively for report_*.json")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            parser.print_usage(sys.stderr)
            print("error: a subcommand is required", file=sys.stderr)
            return EXIT_USAGE
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # runtime failure: one-line parsable record
        record = {"error": type(e).__name__, "message": str(e)}
        extra = getattr(e, "checkpoint_path", None)
        if extra is not None:
            record["checkpoint"] = str(extra)
        print(json.dumps(record), file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
