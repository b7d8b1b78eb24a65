"""``fmpn`` command-line entry point.

Every command reads an optional JSON config (``--config``), then applies
explicit flags and trailing ``key=value`` overrides on top. Dotted keys reach
into nested sections, e.g. ``train.lr_rest=1e-3`` or ``arch.fmg_channels=[16,32]``.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataset import AlignedFace, load_aligned, load_manifest
from .estimator import FMPNClassifier
from .evaluation import EvalReport, cross_validate, predict, run_ablation, transfer_masks
from .exceptions import ConfigError, FMPNError, ValidationError
from .maskgen import generate_mask_bank, load_bank, save_bank
from .networks import VARIANTS, ArchConfig, load_checkpoint, save_checkpoint
from .synthdata import SynthSpec, generate
from .training import TrainConfig, write_history

log = logging.getLogger("fmpn")

COMMANDS = ("synth", "gen-masks", "train", "eval", "ablate", "transfer", "predict")

DEFAULTS = {
    "out": "fmpn_out",
    "seed": None,
    "manifest": None,
    "bank": None,
    "folds": 10,
    "variant": "full",
    "class_map": None,
    "spec": "default",
    "checkpoint": None,
    "crop_size": None,
    "train": {},
    "arch": {},
    "synth": {},
}

REQUIRED = {
    "gen-masks": ("manifest",),
    "train": ("manifest",),
    "eval": ("manifest",),
    "ablate": ("manifest",),
    "transfer": ("bank", "manifest"),
    "predict": ("checkpoint", "manifest"),
}

# flags that map one-to-one onto top-level config keys
FLAGS = ("out", "seed", "manifest", "bank", "folds", "variant", "class_map", "spec", "checkpoint")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fmpn", description="Facial motion prior network pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}", parser_class=_Parser)
    helps = {
        "synth": "generate a synthetic corpus",
        "gen-masks": "build the per-class mask bank of a manifest",
        "train": "train on a whole manifest and write a checkpoint",
        "eval": "subject-independent cross-validation",
        "ablate": "cross-validate the full, no_lG and baseline_cnn variants",
        "transfer": "cross-validate a target corpus with masks from another bank",
        "predict": "classify the faces of a manifest with a checkpoint",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--manifest")
        p.add_argument("--bank", help="mask bank directory")
        p.add_argument("--folds", type=int)
        p.add_argument("--variant", choices=VARIANTS)
        p.add_argument("--class-map", dest="class_map", help="JSON file mapping target to source class names")
        p.add_argument("--spec", help="'default' or a SynthSpec JSON file")
        p.add_argument("--checkpoint")
        p.add_argument("overrides", nargs="*", metavar="key=value")
    return parser


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_dotted(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-section")
    node[parts[-1]] = value


def resolve_config(args: argparse.Namespace) -> tuple[dict, dict]:
    """Merge defaults < config file < flags < overrides; return config and key sources."""
    cfg = copy.deepcopy(DEFAULTS)
    source = {k: "default" for k in cfg}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            loaded = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        for k, v in loaded.items():
            cfg[k] = v
            source[k] = "config"
        # relative paths in a config file are relative to the file
        for k in ("manifest", "bank", "class_map", "checkpoint", "out"):
            if k in loaded and isinstance(cfg[k], str) and not Path(cfg[k]).is_absolute():
                cfg[k] = str(path.parent / cfg[k])
        if isinstance(loaded.get("spec"), str) and loaded["spec"] != "default" \
                and not Path(loaded["spec"]).is_absolute():
            cfg["spec"] = str(path.parent / loaded["spec"])
    for k in FLAGS:
        v = getattr(args, k)
        if v is not None:
            cfg[k] = v
            source[k] = "flag"
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not key=value")
        if key.split(".")[0] not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        _set_dotted(cfg, key, _parse_value(value))
        source[key.split(".")[0]] = "override"
    return cfg, source


def _log_config(cfg: dict, source: dict) -> None:
    log.info("config precedence: override > flag > config file > default")
    for k in sorted(cfg):
        log.info("  %s = %s (%s)", k, json.dumps(cfg[k], default=str), source.get(k, "default"))


def _train_config(cfg: dict) -> TrainConfig:
    train = dict(cfg["train"])
    if cfg["seed"] is not None:
        train["seed"] = cfg["seed"]
    return TrainConfig.desk(**train)


def _arch(cfg: dict) -> ArchConfig:
    return ArchConfig.from_dict(cfg["arch"]) if cfg["arch"] else ArchConfig()


def _require(cfg: dict, key: str) -> str:
    if not cfg.get(key):
        raise ConfigError(f"--{key.replace('_', '-')} is required for this command")
    return cfg[key]


def _bank_for(cfg: dict, manifest, variant: str):
    if variant == "baseline_cnn":
        return None
    if cfg.get("bank"):
        return load_bank(cfg["bank"])
    log.info("no --bank given; building masks from the manifest")
    return generate_mask_bank(manifest, provenance=str(manifest.root))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_synth(cfg: dict, out: Path) -> None:
    spec_arg = cfg["spec"]
    if isinstance(spec_arg, dict):
        base = dict(spec_arg)
    elif spec_arg in (None, "default"):
        base = {}
    else:
        base = json.loads(Path(spec_arg).read_text(encoding="utf-8"))
    base.update(cfg["synth"])
    if cfg["seed"] is not None:
        base["seed"] = cfg["seed"]
    spec = SynthSpec.from_dict(base)
    manifest = generate(spec, out)
    log.info("wrote %d expressive faces of %d subjects to %s", len(manifest.samples), spec.subjects, out)


def cmd_gen_masks(cfg: dict, out: Path) -> None:
    manifest = load_manifest(_require(cfg, "manifest"))
    bank = generate_mask_bank(manifest, provenance=str(Path(cfg["manifest"]).resolve()))
    save_bank(bank, out)
    log.info("wrote %d masks to %s", len(bank), out)


def cmd_train(cfg: dict, out: Path) -> None:
    manifest = load_manifest(_require(cfg, "manifest"))
    variant = cfg["variant"]
    data = load_aligned(manifest)
    bank = _bank_for(cfg, manifest, variant)
    tc = _train_config(cfg)
    est = FMPNClassifier(mask_bank=bank, variant=variant, train_config=tc, arch=_arch(cfg),
                         crop_size=cfg["crop_size"], n_classes=manifest.n_classes)
    est.fit(data.rgb, data.labels)
    write_history(est.history_, out / "history.csv")
    header = {"arch": est.arch_.to_dict(), "seed": tc.seed, "epoch": len(est.history_),
              "train": est.config_.to_dict(), "class_names": manifest.class_names}
    save_checkpoint(out / "checkpoint.npz", est.model_, header)
    acc = float(np.mean(est.predict(data.rgb) == data.labels))
    _write_json(out / "train_summary.json", {"variant": variant, "train_accuracy": acc,
                                             "epochs": len(est.history_)})
    log.info("training accuracy %.4f; checkpoint at %s", acc, out / "checkpoint.npz")


def _cv_kwargs(cfg: dict) -> dict:
    return {"k": cfg["folds"], "arch": _arch(cfg), "crop_size": cfg["crop_size"]}


def _report(report: EvalReport, out: Path) -> None:
    report.save(out)
    log.info("mean accuracy %.4f over folds %s", report.mean_accuracy,
             ", ".join(f"{a:.3f}" for a in report.per_fold_accuracy))


def cmd_eval(cfg: dict, out: Path) -> None:
    manifest = load_manifest(_require(cfg, "manifest"))
    variant = cfg["variant"]
    bank = _bank_for(cfg, manifest, variant)
    _report(cross_validate(load_aligned(manifest), bank, _train_config(cfg), variant=variant,
                           **_cv_kwargs(cfg)), out)


def cmd_ablate(cfg: dict, out: Path) -> None:
    manifest = load_manifest(_require(cfg, "manifest"))
    data = load_aligned(manifest)
    bank = _bank_for(cfg, manifest, "full")
    summary = {}
    for variant in VARIANTS:
        rep = run_ablation(data, bank, _train_config(cfg), variant, **_cv_kwargs(cfg))
        _report(rep, out / variant)
        summary[variant] = rep.mean_accuracy
    _write_json(out / "ablation.json", summary)


def _load_class_map(arg) -> Optional[dict]:
    if arg is None or isinstance(arg, dict):
        return arg
    path = Path(arg)
    if not path.is_file():
        raise ConfigError(f"class map {path} does not exist")
    mapping = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(mapping, dict):
        raise ConfigError("class map must be a JSON object of target -> source names")
    return mapping


def cmd_transfer(cfg: dict, out: Path) -> None:
    source = load_bank(_require(cfg, "bank"))
    target = load_manifest(_require(cfg, "manifest"))
    _report(transfer_masks(source, load_aligned(target), _train_config(cfg),
                           class_map=_load_class_map(cfg["class_map"]), **_cv_kwargs(cfg)), out)


def cmd_predict(cfg: dict, out: Path) -> None:
    model, header = load_checkpoint(_require(cfg, "checkpoint"))
    manifest = load_manifest(_require(cfg, "manifest"))
    names = header.get("class_names") or manifest.class_names
    data = load_aligned(manifest)
    rows = []
    for i in range(len(data)):
        pred = predict(model, AlignedFace.from_rgb(data.rgb[i]))
        rows.append((data.paths[i] if data.paths else str(i), names[pred], manifest.class_names[data.labels[i]]))
    with (out / "predictions.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_path", "predicted", "label"])
        writer.writerows(rows)
    log.info("accuracy %.4f on %d faces", float(np.mean([r[1] == r[2] for r in rows])), len(rows))


HANDLERS = {
    "synth": cmd_synth,
    "gen-masks": cmd_gen_masks,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "transfer": cmd_transfer,
    "predict": cmd_predict,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Execute one command; returns 0 on success, 1 on invalid input, 2 on runtime failure."""
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] not in COMMANDS and not argv[0].startswith("-"):
        parser.print_usage(sys.stderr)
        if argv:
            print(f"fmpn: error: unknown command {argv[0]!r}", file=sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg, source = resolve_config(args)
        _log_config(cfg, source)
        for key in REQUIRED.get(args.command, ()):
            _require(cfg, key)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](cfg, out)
    except ValidationError as exc:
        log.error("%s", exc)
        return 1
    except (FMPNError, OSError, RuntimeError, ArithmeticError, KeyError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
