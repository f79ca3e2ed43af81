"""Command-line entry points: ``gen-synth``, ``train``, ``eval``, ``inspect``.

Configuration is a flat UTF-8 text file of ``key = value`` lines with ``#``
comments. ``--set key=value`` overrides are applied after the file is parsed.
Unknown keys are rejected, and the fully resolved configuration is written
next to every run's outputs.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O error,
3 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import formats
from .backbone import BackboneParams, ModelConfig, init_params, load_weights, save_weights
from .data import gen_synthetic, load_dataset, save_dataset
from .diagnostics import (
    DEFAULT_EPSILON,
    attention_snapshot,
    export_attention,
    rank_reports,
    write_features,
    write_matrix_csv,
    write_rank_report,
)
from .model import VARIANTS, check_phi, forward, init_phi
from .numerics import ContractError
from .objective import NumericAbort, TrainConfig, evaluate, train_loop
from .tcpa import MaskMode, MatchDirection, TcpaConfig, verify_mask

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(ValueError):
    """Bad configuration key or value."""


# ---------------------------------------------------------------------------
# Configuration schema
# ---------------------------------------------------------------------------


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text

    return parse


def _path(text: str) -> str:
    return text


@dataclass(frozen=True)
class Key:
    section: str
    parse: Callable[[str], Any]
    default: Any


_MODEL, _TCPA, _TRAIN = ModelConfig(), TcpaConfig(), TrainConfig()

SCHEMA: dict[str, Key] = {
    # backbone
    "image_h": Key("model", int, _MODEL.image_h),
    "image_w": Key("model", int, _MODEL.image_w),
    "channels": Key("model", int, _MODEL.channels),
    "patch_h": Key("model", int, _MODEL.patch_h),
    "patch_w": Key("model", int, _MODEL.patch_w),
    "embed_dim": Key("model", int, _MODEL.embed_dim),
    "num_layers": Key("model", int, _MODEL.num_layers),
    "num_heads": Key("model", int, _MODEL.num_heads),
    "ffn_dim": Key("model", int, _MODEL.ffn_dim),
    "backbone_seed": Key("run", int, 0),
    # prompts
    "prompt_len": Key("tcpa", int, _TCPA.prompt_len),
    "cls_pool_size": Key("tcpa", int, _TCPA.cls_pool_size),
    "img_pool_size": Key("tcpa", int, _TCPA.img_pool_size),
    "cls_top_k": Key("tcpa", int, _TCPA.cls_top_k),
    "img_top_k": Key("tcpa", int, _TCPA.img_top_k),
    "match_direction": Key("tcpa", _choice(*(m.value for m in MatchDirection)), _TCPA.match_direction.value),
    "mask_mode": Key("tcpa", _choice(*(m.value for m in MaskMode)), _TCPA.mask_mode.value),
    # training
    "lambda_i": Key("train", float, _TRAIN.lambda_i),
    "lambda_c": Key("train", float, _TRAIN.lambda_c),
    "epochs": Key("train", int, _TRAIN.epochs),
    "learning_rate": Key("train", float, _TRAIN.learning_rate),
    "weight_decay": Key("train", float, _TRAIN.weight_decay),
    "batch_size": Key("train", int, _TRAIN.batch_size),
    "seed": Key("train", int, _TRAIN.seed),
    "schedule": Key("train", _choice("cosine_annealing"), _TRAIN.schedule),
    "optimizer": Key("train", _choice("adamw", "sgd"), _TRAIN.optimizer),
    # paths and modes
    "dataset": Key("run", _path, ""),
    "backbone": Key("run", _path, ""),
    "out_dir": Key("run", _path, "runs"),
    "variant": Key("run", _choice(*VARIANTS), "tcpa"),
    "epsilon": Key("run", float, DEFAULT_EPSILON),
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw ``key -> value`` strings from ``key = value`` lines."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


def resolve_config(raw: dict[str, str]) -> dict[str, Any]:
    """Validate keys and values against the schema and fill in defaults."""
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    resolved = {}
    for key, entry in SCHEMA.items():
        if key not in raw:
            resolved[key] = entry.default
            continue
        try:
            resolved[key] = entry.parse(raw[key])
        except ValueError as exc:
            raise ConfigError(f"invalid value for {key!r}: {raw[key]!r} ({exc})") from None
    build_configs(resolved)  # surfaces cross-field violations now
    return resolved


def load_config(path: str | None, overrides: Sequence[str] = ()) -> dict[str, Any]:
    raw: dict[str, str] = {}
    if path:
        raw = parse_config_text(Path(path).read_text(encoding="utf-8"), path)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        raw[key] = value
    return resolve_config(raw)


def format_config(resolved: dict[str, Any]) -> str:
    return "".join(f"{key} = {resolved[key]}\n" for key in SCHEMA)


def _section(resolved: dict[str, Any], name: str) -> dict[str, Any]:
    return {k: resolved[k] for k, entry in SCHEMA.items() if entry.section == name}


def build_configs(resolved: dict[str, Any]) -> tuple[ModelConfig, TcpaConfig, TrainConfig]:
    try:
        return (
            ModelConfig(**_section(resolved, "model")),
            TcpaConfig(**_section(resolved, "tcpa")),
            TrainConfig(**_section(resolved, "train")),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def make_run_dir(out_dir: str | Path, seed: int, tag: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(out_dir) / f"{tag}-{stamp}-seed{seed}"
    path, n = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}-{n}")
        n += 1
    path.mkdir(parents=True)
    return path


def _require(resolved: dict[str, Any], key: str) -> Path:
    if not resolved[key]:
        raise ConfigError(f"config key {key!r} is required for this command")
    path = Path(resolved[key])
    if not path.exists():
        raise FileNotFoundError(f"{key} file not found: {path}")
    return path


def _backbone(resolved: dict[str, Any], model_cfg: ModelConfig) -> BackboneParams:
    if resolved["backbone"]:
        params = load_weights(_require(resolved, "backbone"))
        if params.config != model_cfg:
            raise ConfigError(f"backbone file was built for {params.config}, config asks for {model_cfg}")
        return params
    return init_params(model_cfg, resolved["backbone_seed"])


def _load_trained(resolved: dict[str, Any], weights: str):
    """Backbone and Phi for ``weights`` (a run directory or a Phi file)."""
    model_cfg, tcpa_cfg, _ = build_configs(resolved)
    wpath = Path(weights)
    if wpath.is_dir():
        phi_path = wpath / "phi.tcpw"
        bb_path = wpath / "backbone.tcpw"
        backbone = load_weights(bb_path) if bb_path.exists() else _backbone(resolved, model_cfg)
    else:
        phi_path = wpath
        backbone = _backbone(resolved, model_cfg)
    if backbone.config != model_cfg:
        raise ConfigError(f"backbone was built for {backbone.config}, config asks for {model_cfg}")
    phi = formats.load_arrays(phi_path)
    try:
        check_phi(phi, model_cfg, tcpa_cfg, resolved["variant"])
    except ValueError as exc:
        raise ConfigError(f"weights do not fit the configured model: {exc}") from None
    return backbone, phi, tcpa_cfg


def _dataset(resolved: dict[str, Any], model_cfg: ModelConfig):
    ds = load_dataset(_require(resolved, "dataset"))
    try:
        ds.check_config(model_cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return ds


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_synth(args: argparse.Namespace) -> int:
    if args.noise < 0:
        raise ConfigError("--noise must be non-negative")
    if args.classes < 2:
        raise ConfigError("--classes must be at least 2")
    if args.per_class < 1:
        raise ConfigError("--per-class must be at least 1")
    resolved = load_config(args.config, args.set)
    model_cfg, _, _ = build_configs(resolved)
    ds = gen_synthetic(args.classes, args.per_class, args.noise, args.seed, model_cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    print(f"wrote {len(ds)} samples ({ds.num_classes} classes) to {out}")
    return EXIT_OK


def run_training(resolved: dict[str, Any], run_dir: Path, progress=None) -> dict[str, Any]:
    """Train, write all artifacts into ``run_dir`` and return the summary."""
    model_cfg, tcpa_cfg, train_cfg = build_configs(resolved)
    variant = resolved["variant"]
    ds = _dataset(resolved, model_cfg)
    backbone = _backbone(resolved, model_cfg)
    (run_dir / "config.txt").write_text(format_config(resolved), encoding="utf-8")
    save_weights(backbone, run_dir / "backbone.tcpw")
    phi0 = init_phi(model_cfg, tcpa_cfg, ds.num_classes, train_cfg.seed, variant)
    state, log = train_loop(backbone, phi0, ds, tcpa_cfg, train_cfg, variant,
                            log_path=run_dir / "metrics.csv", progress=progress)
    formats.save_arrays(state.phi, run_dir / "phi.tcpw")
    ev = evaluate(backbone, state.phi, ds, tcpa_cfg, variant)
    summary = {
        "variant": variant,
        "epochs": train_cfg.epochs,
        "steps": state.step,
        "samples": len(ds),
        "train_accuracy": ev.accuracy,
        "train_loss": ev.mean_loss,
        "final_step_loss": log[-1]["loss"] if log else None,
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def cmd_train(args: argparse.Namespace) -> int:
    resolved = load_config(args.config, args.set)
    _require(resolved, "dataset")
    run_dir = Path(args.run_dir) if args.run_dir else make_run_dir(resolved["out_dir"], resolved["seed"], "train")
    run_dir.mkdir(parents=True, exist_ok=True)

    def progress(row):
        if args.verbose:
            print(f"epoch {row['epoch']} step {row['step']} loss {row['loss']:.6f} acc {row['acc']:.3f}", flush=True)

    summary = run_training(resolved, run_dir, progress)
    print(f"run directory: {run_dir}")
    print(f"train accuracy: {summary['train_accuracy']:.6f}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    resolved = load_config(args.config, args.set)
    model_cfg, _, _ = build_configs(resolved)
    backbone, phi, tcpa_cfg = _load_trained(resolved, args.weights)
    ds = _dataset(resolved, model_cfg)
    if len(phi["head.bias"]) != ds.num_classes:
        raise ConfigError(f"head has {len(phi['head.bias'])} classes, dataset has {ds.num_classes}")
    ev = evaluate(backbone, phi, ds, tcpa_cfg, resolved["variant"])
    correct = int(np.sum(ev.predictions == ds.labels))
    print(f"accuracy: {ev.accuracy:.6f}")
    print(json.dumps({"accuracy": ev.accuracy, "correct": correct, "samples": len(ds),
                      "mean_loss": ev.mean_loss, "variant": resolved["variant"], "weights": str(args.weights)}))
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    resolved = load_config(args.config, args.set)
    model_cfg, _, _ = build_configs(resolved)
    backbone, phi, tcpa_cfg = _load_trained(resolved, args.weights)
    ds = _dataset(resolved, model_cfg)
    if not 0 <= args.sample < len(ds):
        raise ConfigError(f"sample index {args.sample} outside [0, {len(ds)})")
    variant = resolved["variant"]
    out = Path(args.out) if args.out else make_run_dir(resolved["out_dir"], resolved["seed"], "inspect")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(resolved), encoding="utf-8")

    res = forward(backbone, phi, ds.images[args.sample:args.sample + 1], tcpa_cfg, variant, capture=True)
    n = model_cfg.num_patches
    layout = tcpa_cfg.slot_layout(n) if variant != "linear" else [("cls", 0, 1), ("patches", 1, 1 + n)]
    snap = attention_snapshot(res.records, 0)
    export_attention(snap, out, layout)
    problems = []
    for rec in res.records:
        if rec.mask is None:
            continue
        mask = rec.mask.mask[0]
        write_matrix_csv(out / f"mask_layer{rec.layer}.csv", mask)
        for p in verify_mask(mask, tcpa_cfg, n, rec.cls_match.selected_indices[0], rec.img_match.selected_indices[0]):
            problems.append(f"layer {rec.layer}: {p}")
    reports = rank_reports(snap, resolved["epsilon"])
    write_rank_report(out / "rank_report.csv", reports)

    feats = []
    for s in range(0, len(ds), 64):
        feats.append(forward(backbone, phi, ds.images[s:s + 64], tcpa_cfg, variant).features.data)
    write_features(out / "features.csv", np.concatenate(feats), ds.labels)

    print(f"inspection written to {out}")
    if problems:
        for p in problems:
            print(f"mask check failed: {p}", file=sys.stderr)
        return EXIT_USAGE
    print(f"mask check passed for {sum(r.mask is not None for r in res.records)} layer(s)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit with 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tcpa", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="flat key = value configuration file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable, applied after --config)")

    p = sub.add_parser("gen-synth", help="write a synthetic dataset")
    common(p)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train prompts and head on a frozen backbone")
    common(p)
    p.add_argument("--run-dir", help="write outputs here instead of a fresh timestamped directory")
    p.add_argument("--verbose", action="store_true", help="print one line per step")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="report accuracy of trained weights")
    common(p)
    p.add_argument("--weights", required=True, help="run directory or Phi weight file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="export attention maps, masks and rank report")
    common(p)
    p.add_argument("--weights", required=True, help="run directory or Phi weight file")
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--out", help="output directory (default: fresh timestamped directory)")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        # Non-finite values are reported through NumericAbort; skip numpy's warnings.
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return args.func(args)
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, formats.FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
