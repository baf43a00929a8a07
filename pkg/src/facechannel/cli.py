"""``facechannel`` command line.

Every command accepts ``--config`` (a JSON file) whose keys mirror the long
flags (``manifest``, ``val_manifest``, ``seed`` ...) plus optional ``model``
and ``train`` sections with ModelConfig / TrainConfig fields. Flags given
on the command line win over the file.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .dataset import PreprocessConfig, load_image, parse_manifest
from .errors import FaceChannelError
from .hpo import SearchSpace, apply_trial, run_hpo
from .masking import MaskTemplate, generate_masked_dataset
from .metrics import evaluate, render_report
from .model import (
    FreezeScheme,
    ModelConfig,
    analytic_parameter_count,
    build_model,
    count_parameters,
    load_weights,
    save_weights,
)
from .saliency import export_heatmap, input_gradient_saliency, last_conv_activation_map
from .training import TrainConfig, finetune, train

logger = logging.getLogger("facechannel")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def load_model(weights: str):
    """Indirection point so tests can swap in stub models."""
    return load_weights(weights)


# configuration


def _read_config(path) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file {p} does not exist")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {p} is not valid JSON: {exc}") from None


def _merged(args) -> dict:
    """File config overlaid with every flag the user actually set."""
    cfg = _read_config(getattr(args, "config", None))
    merged = {k: v for k, v in cfg.items() if k not in ("model", "train")}
    for key, value in vars(args).items():
        if key in ("command", "func", "config"):
            continue
        if value is not None and value is not False and value != []:
            merged[key] = value
        else:
            merged.setdefault(key, value)
    merged["model"] = dict(cfg.get("model", {}))
    merged["train"] = dict(cfg.get("train", {}))
    if args.seed is None:
        merged["seed"] = cfg.get("seed", 0)
    if getattr(args, "jobs", None) is None:
        merged["jobs"] = cfg.get("jobs", 1)
    return merged


def _model_config(run: dict) -> ModelConfig:
    try:
        return ModelConfig.from_dict(run["model"])
    except (FaceChannelError, TypeError) as exc:
        raise UsageError(f"invalid model config: {exc}") from None


def _train_config(run: dict) -> TrainConfig:
    fields = dict(run["train"])
    for flag, key in (("epochs", "max_epochs"), ("lr", "learning_rate"), ("optimizer", "optimizer"),
                      ("batch_size", "batch_size"), ("patience", "early_stop_patience")):
        if run.get(flag) is not None:
            fields[key] = run[flag]
    fields["seed"] = run["seed"]
    try:
        return TrainConfig.from_dict(fields)
    except (FaceChannelError, TypeError) as exc:
        raise UsageError(f"invalid train config: {exc}") from None


def _require(run: dict, *keys):
    for key in keys:
        if not run.get(key):
            raise UsageError(f"--{key.replace('_', '-')} is required")


def _require_paths(run: dict, *keys):
    """Fail fast: every referenced input must exist before work starts."""
    for key in keys:
        values = run.get(key)
        if not values:
            continue
        for value in values if isinstance(values, list) else [values]:
            if not Path(value).exists():
                raise UsageError(f"--{key.replace('_', '-')}: {value} does not exist")


def _config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()


def _write_run_manifest(out: Path, command: str, run: dict, artifacts: list, extra: dict | None = None) -> Path:
    config = {k: v for k, v in run.items() if k not in ("out",)}
    payload = {
        "command": command,
        "version": __version__,
        "seed": run.get("seed"),
        "config_hash": _config_hash(config),
        "config": config,
        "artifacts": sorted(str(Path(a).relative_to(out)) if Path(a).is_relative_to(out) else str(a)
                            for a in artifacts),
    }
    if extra:
        payload.update(extra)
    path = out / "run_manifest.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str))
    return path


# commands


def cmd_generate_masked(run: dict) -> int:
    _require(run, "manifest", "mask_template", "anchors", "out")
    _require_paths(run, "manifest", "mask_template", "anchors", "keypoints")
    manifest = parse_manifest(run["manifest"])
    template = MaskTemplate.load(run["mask_template"], run["anchors"])
    out = Path(run["out"])
    masked, report = generate_masked_dataset(manifest, template, out, sidecar=run.get("keypoints"), jobs=run["jobs"])
    print(json.dumps(report.to_dict()))
    artifacts = [out / "manifest.csv", out / "report.json"] + [s.image_path for s in masked]
    _write_run_manifest(out, "generate-masked", run, artifacts, {"report": report.to_dict()})
    if report.skipped and not run.get("allow_skips"):
        logger.error("%d sample(s) skipped; pass --allow-skips to accept", report.skipped)
        return EXIT_FAILURE
    return EXIT_OK


def _train_common(run: dict, scheme: FreezeScheme, command: str) -> int:
    _require(run, "manifest", "out")
    _require_paths(run, "manifest", "val_manifest", "weights")
    train_config = _train_config(run)
    if scheme is FreezeScheme.SCRATCH:
        model = build_model(_model_config(run), seed=train_config.seed)
    else:
        model = load_model(run["weights"])
    cfg = model.config
    pre = PreprocessConfig(cfg.input_size, cfg.input_channels)
    manifest = parse_manifest(run["manifest"])
    val = parse_manifest(run["val_manifest"], "validation") if run.get("val_manifest") else None

    from .dataset import load_dataset

    train_set = load_dataset(manifest, pre, jobs=run["jobs"])
    val_set = load_dataset(val, pre, jobs=run["jobs"]) if val is not None else None
    out = Path(run["out"])
    out.mkdir(parents=True, exist_ok=True)
    history_path = out / "history.jsonl"
    if scheme is FreezeScheme.SCRATCH:
        model, history = train(model, train_set, val_set, train_config, history_path)
    else:
        model, history = finetune(model, scheme, train_set, val_set, train_config, history_path)
    weights_dir = save_weights(model, out / "weights")
    summary = {"best_epoch": history.best_epoch, "best_val_ccc": history.best_val_ccc, "steps": history.steps}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    artifacts = [history_path, out / "summary.json", weights_dir / "index.json"]
    _write_run_manifest(out, command, {**run, "scheme": scheme.value, "model": cfg.to_dict(),
                                       "train": train_config.to_dict()}, artifacts)
    print(json.dumps(summary))
    return EXIT_OK


def _scheme(run: dict, default: str) -> FreezeScheme:
    try:
        return FreezeScheme.parse(run.get("scheme") or default)
    except ValueError:
        raise UsageError(f"unknown scheme {run.get('scheme')!r}") from None


def cmd_train(run: dict) -> int:
    scheme = _scheme(run, "scratch")
    if scheme is not FreezeScheme.SCRATCH and not run.get("weights"):
        raise UsageError(f"--scheme {scheme.value} requires --weights")
    return _train_common(run, scheme, "train")


def cmd_finetune(run: dict) -> int:
    scheme = _scheme(run, "all-layers")
    if scheme is FreezeScheme.SCRATCH:
        raise UsageError("finetune needs --scheme last-conv or all-layers (use `train` for scratch)")
    if not run.get("weights"):
        raise UsageError(f"--scheme {scheme.value} requires --weights")
    return _train_common(run, scheme, "finetune")


def _experiment_name(weights: str) -> str:
    p = Path(weights).resolve()
    return p.parent.name if p.name == "weights" else p.name


def _dataset_name(manifest: str) -> str:
    p = Path(manifest).resolve()
    return p.parent.name if p.stem == "manifest" else p.stem


def cmd_evaluate(run: dict) -> int:
    _require(run, "weights", "manifest", "out")
    weights = run["weights"] if isinstance(run["weights"], list) else [run["weights"]]
    manifests = run["manifest"] if isinstance(run["manifest"], list) else [run["manifest"]]
    _require_paths(run, "weights", "manifest")
    out = Path(run["out"])
    out.mkdir(parents=True, exist_ok=True)
    reports, artifacts = [], []
    parsed = {m: parse_manifest(m, "validation") for m in manifests}
    for w in weights:
        model = load_model(w)
        exp = run.get("experiment") if len(weights) == 1 and run.get("experiment") else _experiment_name(w)
        for m, manifest in parsed.items():
            report = evaluate(model, manifest, experiment=exp, dataset=_dataset_name(m), jobs=run["jobs"])
            reports.append(report)
            path = out / f"{report.experiment}__{report.dataset}.json".replace("/", "_").replace(" ", "_")
            path.write_text(json.dumps(report.to_dict(), indent=2))
            artifacts.append(path)
    table, payload = render_report(reports)
    (out / "table.txt").write_text(table + "\n")
    (out / "reports.json").write_text(payload)
    artifacts += [out / "table.txt", out / "reports.json"]
    _write_run_manifest(out, "evaluate", run, artifacts)
    print(table)
    return EXIT_OK


def cmd_hpo(run: dict) -> int:
    _require(run, "manifest", "out")
    _require_paths(run, "manifest", "val_manifest")
    trials = int(run.get("trials") or 20)
    if trials < 1:
        raise UsageError("--trials must be >= 1")
    base_model, base_train = _model_config(run), _train_config(run)
    pre = PreprocessConfig(base_model.input_size, base_model.input_channels)

    from .dataset import load_dataset

    train_set = load_dataset(parse_manifest(run["manifest"]), pre, jobs=run["jobs"])
    val_set = (load_dataset(parse_manifest(run["val_manifest"], "validation"), pre, jobs=run["jobs"])
               if run.get("val_manifest") else None)

    def objective(trial_config: dict) -> float:
        model_cfg, train_cfg = apply_trial(trial_config, base_model, base_train)
        model = build_model(model_cfg, seed=train_cfg.seed)
        _, history = train(model, train_set, val_set, train_cfg)
        return history.best_val_ccc

    out = Path(run["out"])
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "trials.jsonl"
    best, records = run_hpo(SearchSpace(), trials, objective, seed=run["seed"], log_path=log_path)
    best_record = max((r for r in records if r.status == "ok"), key=lambda r: r.objective)
    (out / "best.json").write_text(json.dumps({"config": best, "objective": best_record.objective}, indent=2))
    _write_run_manifest(out, "hpo", run, [log_path, out / "best.json"])
    print(json.dumps({"best": best, "objective": best_record.objective}))
    return EXIT_OK


def cmd_saliency(run: dict) -> int:
    _require(run, "weights", "out")
    if not run.get("manifest") and not run.get("image"):
        raise UsageError("saliency needs --manifest or --image")
    _require_paths(run, "weights", "manifest", "image")
    head = run.get("head") or "combined"
    method = run.get("method") or "input-gradient"
    model = load_model(run["weights"] if not isinstance(run["weights"], list) else run["weights"][0])
    cfg = model.config
    pre = PreprocessConfig(cfg.input_size, cfg.input_channels)
    paths = []
    for m in run.get("manifest") or []:
        paths += [s.image_path for s in parse_manifest(m)]
    paths += [Path(p) for p in run.get("image") or []]
    out = Path(run["out"])
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    for path in paths:
        image = load_image(path, pre)
        if method == "input-gradient":
            smap = input_gradient_saliency(model, image, head)
        else:
            smap = last_conv_activation_map(model, image)
        png = export_heatmap(smap, path, out / f"{Path(path).stem}.saliency.png")
        side = out / f"{Path(path).stem}.saliency.json"
        side.write_text(json.dumps({"image": str(path), "method": smap.method, "head": smap.head,
                                    "stats": smap.stats()}, indent=2))
        artifacts += [png, side]
    _write_run_manifest(out, "saliency", run, artifacts)
    print(f"wrote {len(paths)} saliency map(s) to {out}")
    return EXIT_OK


def cmd_params(run: dict) -> int:
    if run.get("weights"):
        _require_paths(run, "weights")
        model = load_model(run["weights"])
    else:
        model = build_model(_model_config(run), seed=run["seed"])
    total = count_parameters(model)
    if hasattr(model, "config") and total != analytic_parameter_count(model.config):
        logger.error("parameter count %d disagrees with the analytic count", total)
        return EXIT_FAILURE
    print(total)
    if run.get("out"):
        out = Path(run["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "params.json").write_text(json.dumps({"parameters": total, "model": model.config.to_dict()}, indent=2))
        _write_run_manifest(out, "params", run, [out / "params.json"])
    return EXIT_OK


COMMANDS = {
    "generate-masked": cmd_generate_masked,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "hpo": cmd_hpo,
    "saliency": cmd_saliency,
    "params": cmd_params,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="facechannel", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifest_many=False, weights_many=False):
        p.add_argument("--config")
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int)
        if manifest_many:
            p.add_argument("--manifest", action="append")
        else:
            p.add_argument("--manifest")
        if weights_many:
            p.add_argument("--weights", action="append")
        else:
            p.add_argument("--weights")
        return p

    p = common(sub.add_parser("generate-masked", help="composite a mask onto every face of a manifest"))
    p.add_argument("--mask-template", dest="mask_template")
    p.add_argument("--anchors")
    p.add_argument("--keypoints", help="keypoint sidecar JSON for samples without keypoint columns")
    p.add_argument("--allow-skips", dest="allow_skips", action="store_true")

    for name, helptext in (("train", "train from scratch (or fine-tune with --scheme/--weights)"),
                           ("finetune", "fine-tune pretrained weights")):
        p = common(sub.add_parser(name, help=helptext))
        p.add_argument("--val-manifest", dest="val_manifest")
        p.add_argument("--scheme", choices=[s.value for s in FreezeScheme])
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--optimizer", choices=["sgd", "adam"])
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--patience", type=int)

    p = common(sub.add_parser("evaluate", help="CCC of one or more models on one or more manifests"),
               manifest_many=True, weights_many=True)
    p.add_argument("--experiment", help="experiment id (single --weights only)")

    p = common(sub.add_parser("hpo", help="TPE search over dense head, learning rate and optimiser"))
    p.add_argument("--val-manifest", dest="val_manifest")
    p.add_argument("--trials", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--patience", type=int)

    p = common(sub.add_parser("saliency", help="export saliency heatmaps"), manifest_many=True)
    p.add_argument("--image", action="append")
    p.add_argument("--head", choices=["arousal", "valence", "combined"])
    p.add_argument("--method", choices=["input-gradient", "last-conv-activation"])

    common(sub.add_parser("params", help="print the model's parameter count"))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handler = COMMANDS[args.command]
    try:
        run = _merged(args)
        return handler(run)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"facechannel {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FaceChannelError, OSError, ValueError) as exc:
        logger.error("%s", exc)
        print(f"facechannel {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
