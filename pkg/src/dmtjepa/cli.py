"""Command-line entry points: pretrain, probe, export, gradcheck, ablate.

Configuration resolves in layers: preset -> JSON config file -> repeated
``--set dotted.key=value`` overrides -> dedicated flags (--seed, --out).
Every run directory receives the resolved config; checkpoints embed it, so
probe/export commands restore the exact training-time settings.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointFormatError, load_checkpoint
from .config import PRESETS, ConfigError, RunConfig, _parse_override_value
from .data import CorpusFormatError, DataSpecError, read_corpus
from .evaluation import export_attention_maps, export_similarity_map, write_probe_report
from .masking import MaskConfigError
from .optim import OptimStepError, ScheduleRangeError
from .tensor import TensorError
from .trainer import (
    TrainAbortError,
    build_train_dataset,
    gradcheck,
    probe_state,
    random_baseline_probe,
    run_ablation,
    run_pretrain,
    state_from_checkpoint,
)

_KNOWN_ERRORS = (
    ConfigError,
    TensorError,
    MaskConfigError,
    OptimStepError,
    ScheduleRangeError,
    TrainAbortError,
    CheckpointFormatError,
    DataSpecError,
    CorpusFormatError,
    FileNotFoundError,
)


def _add_config_args(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--preset", choices=PRESETS, default="tiny")
    sub.add_argument("--config", type=Path, default=None, help="JSON config file")
    sub.add_argument("--seed", type=int, default=None, help="RNG seed override")
    sub.add_argument("--out", type=str, default=None, help="output directory override")
    sub.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY.PATH=VALUE",
        help="dotted config override (JSON value); repeatable",
    )


def _build_config(args) -> RunConfig:
    return RunConfig.from_sources(
        preset=args.preset,
        config_path=args.config,
        overrides=args.overrides,
        seed=args.seed,
        out_dir=args.out,
    )


def _cmd_pretrain(args) -> int:
    config = _build_config(args)
    result = run_pretrain(config, verbose=not args.quiet)
    print(
        f"done: {result['steps']} steps, final loss {result['final_loss']:.6f}, "
        f"outputs in {result['out_dir']}"
    )
    return 0


def _apply_dotted_overrides(config: RunConfig, overrides: list[str]) -> RunConfig:
    tree = json.loads(config.to_json())
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key.path=value")
        dotted, _, value = item.partition("=")
        node = tree
        parts = dotted.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config key: {dotted}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key: {dotted}")
        node[parts[-1]] = _parse_override_value(value)
    return RunConfig.from_json(json.dumps(tree))


def _cmd_probe(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    state = state_from_checkpoint(ckpt)
    config = state.config
    if args.overrides:
        config = _apply_dotted_overrides(config, args.overrides)
    if args.source == "context":
        params = {name: state.params[name] for name in state.target_params}
        source = "context_encoder"
    else:
        params = state.target_params
        source = "target_encoder"
    report = probe_state(
        config, params, kind=args.kind, knn_k=args.knn_k,
        epochs=args.epochs, lr=args.lr, feature_source=source,
    )
    if args.baseline:
        baseline = random_baseline_probe(config, kind=args.kind, knn_k=args.knn_k)
        print(f"random_init_baseline_accuracy={baseline.accuracy:.6f}")
    out_dir = Path(args.out or config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"probe_{args.kind}.txt"
    write_probe_report(report, path)
    for line in report.lines():
        print(line)
    print(f"report written to {path}")
    return 0


def _load_export_image(args, config: RunConfig) -> np.ndarray:
    if args.image is not None:
        images = read_corpus(args.image)
        if not 0 <= args.index < images.shape[0]:
            raise ConfigError(f"--index {args.index} out of range for {images.shape[0]} records")
        return images[args.index]
    dataset = build_train_dataset(config)
    if not 0 <= args.index < len(dataset):
        raise ConfigError(f"--index {args.index} out of range for {len(dataset)} images")
    return dataset.images[args.index]


def _cmd_export(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    state = state_from_checkpoint(ckpt)
    config = state.config
    image = _load_export_image(args, config)
    out_dir = Path(args.out or config.out_dir) / "exports"
    if args.what == "attn":
        paths = export_attention_maps(
            state.target_params, state.enc_cfg, image, out_dir,
            layer=args.layer, queries=tuple(args.query or ()),
            gelu_mode=config.gelu_mode,
        )
        for key, path in paths.items():
            print(f"{key}: {path}")
    else:
        queries = args.query or [0]
        for q in queries:
            result = export_similarity_map(
                state.target_params, state.enc_cfg, image, q, out_dir,
                fraction=args.fraction, gelu_mode=config.gelu_mode,
            )
            print(f"query {q}: mask patches {result.selected().tolist()}")
        print(f"exports in {out_dir}")
    return 0


def _cmd_gradcheck(args) -> int:
    config = _build_config(args)
    report = gradcheck(config)
    for name, err in sorted(report["groups"].items()):
        print(f"group {name}: rel_err={err:.3e}")
    for name in report["skipped"]:
        print(f"group {name}: no gradient expected, skipped")
    status = "PASS" if report["passed"] else "FAIL"
    print(
        f"{status}: max rel err {report['max_rel_err']:.3e} "
        f"(threshold {report['threshold']:.0e}, {report['runtime_s']:.1f}s)"
    )
    return 0 if report["passed"] else 1


def _cmd_ablate(args) -> int:
    config = _build_config(args)
    matrix = json.loads(Path(args.matrix).read_text(encoding="utf-8"))
    if not isinstance(matrix, dict) or "axes" not in matrix or not isinstance(matrix["axes"], dict):
        raise ConfigError(f"{args.matrix}: expected an object with an 'axes' mapping")
    out_path = Path(args.out or config.out_dir) / "ablation.tsv"
    rows = run_ablation(config, matrix["axes"], out_path)
    ok = sum(1 for r in rows if r["status"] == "ok")
    print(f"{len(rows)} cells ({ok} ok); table written to {out_path}")
    for row in rows:
        print(f"{row['cell']}\t{row['status']}\tloss={row['final_loss']}\tknn={row['knn_accuracy']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dmtjepa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_pre = sub.add_parser("pretrain", help="run self-supervised pre-training")
    _add_config_args(p_pre)
    p_pre.add_argument("--quiet", action="store_true")
    p_pre.set_defaults(func=_cmd_pretrain)

    p_probe = sub.add_parser("probe", help="kNN/linear probe of a checkpoint")
    p_probe.add_argument("--checkpoint", type=Path, required=True)
    p_probe.add_argument("--kind", choices=("knn", "linear"), default="knn")
    p_probe.add_argument("--knn-k", type=int, default=10)
    p_probe.add_argument("--epochs", type=int, default=100, help="linear probe epochs")
    p_probe.add_argument("--lr", type=float, default=0.05, help="linear probe learning rate")
    p_probe.add_argument("--source", choices=("target", "context"), default="target")
    p_probe.add_argument("--baseline", action="store_true",
                         help="also report a random-init encoder baseline")
    p_probe.add_argument("--out", type=str, default=None)
    p_probe.add_argument("--set", dest="overrides", action="append", default=[])
    p_probe.set_defaults(func=_cmd_probe)

    p_exp = sub.add_parser("export", help="attention / similarity map export")
    p_exp.add_argument("--checkpoint", type=Path, required=True)
    p_exp.add_argument("--what", choices=("attn", "sim"), required=True)
    p_exp.add_argument("--image", type=Path, default=None, help="corpus file to read the image from")
    p_exp.add_argument("--index", type=int, default=0)
    p_exp.add_argument("--layer", type=int, default=-1)
    p_exp.add_argument("--query", type=int, action="append", default=None)
    p_exp.add_argument("--fraction", type=float, default=0.10)
    p_exp.add_argument("--out", type=str, default=None)
    p_exp.set_defaults(func=_cmd_export)

    p_grad = sub.add_parser("gradcheck", help="finite-difference check of the full objective")
    _add_config_args(p_grad)
    p_grad.set_defaults(func=_cmd_gradcheck)

    p_abl = sub.add_parser("ablate", help="run a config cross-product at desk scale")
    _add_config_args(p_abl)
    p_abl.add_argument("--matrix", type=Path, required=True,
                       help='JSON file: {"axes": {"dotted.key": [values, ...]}}')
    p_abl.set_defaults(func=_cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _KNOWN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
