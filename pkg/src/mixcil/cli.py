"""Command-line entry points.

Commands write their artifacts into the output directory: a manifest
holding the fully resolved configuration (rerunnable as-is), metrics as
JSON and CSV, confusion counts, a model checkpoint, and rendered
figures next to the delimited files.

Exit codes: 0 success, 2 configuration error, 3 runtime failure. Both
failure modes print a single diagnostic line to stderr.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import report
from .config import ConfigError, RunConfig, dataset_spec, load_config, render_config, with_overrides
from .encoder import load_checkpoint
from .protocol import COMPONENT_GRID, MIXTURE_GRID, run_protocol, sweep_delta
from .tensor import no_grad


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixcil", description="few-shot class-incremental learning engine")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="path to a key=value config file")
        p.add_argument("--out", help="output directory (overrides the config's out key)")
        p.add_argument("--seed", type=int, help="seed override")

    common(sub.add_parser("train", help="run the incremental protocol and write reports"))
    ablate = sub.add_parser("ablate", help="run a component or mixture grid")
    common(ablate)
    ablate.add_argument("--grid", choices=("components", "mixtures"), default="components")
    common(sub.add_parser("sweep-delta", help="rerun the protocol across mix coefficients"))
    export = sub.add_parser("export-embeddings", help="dump store embeddings for offline analysis")
    common(export)
    export.add_argument("--checkpoint", help="model checkpoint (default: <out>/checkpoint.bin)")
    return parser


def _resolve_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    if args.out is not None:
        overrides["out"] = args.out
    if args.seed is not None:
        overrides["seed"] = args.seed
    return with_overrides(config, **overrides) if overrides else config


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _load_baseline(config: RunConfig) -> list[float] | None:
    if not config.baseline:
        return None
    try:
        text = Path(config.baseline).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read baseline metrics {config.baseline}: {e.strerror}") from None
    return report.metrics_from_json(text).accuracies


def _cmd_train(config: RunConfig) -> None:
    from .encoder import save_checkpoint

    out = Path(config.out)
    result = run_protocol(config, baseline=_load_baseline(config))
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "manifest.cfg", render_config(config))
    _write(out / "metrics.json", report.metrics_json(result.report))
    _write(out / "metrics.csv", report.metrics_csv(result.report))
    _write(out / "confusion.csv", report.confusion_csv(result.confusion_classes, result.confusion))
    _write(out / "train_log.csv", report.train_log_csv(result.logs))
    save_checkpoint(result.state.params, out / "checkpoint.bin")
    report.save_session_curve(result.report.accuracies, out / "accuracy_by_session.png")
    report.save_confusion_heatmap(result.confusion_classes, result.confusion, out / "confusion_matrix.png")
    if result.logs:
        report.save_loss_curve(result.logs, out / "training_loss.png")
    print(f"wrote {out}/metrics.json (average_acc={result.report.average_acc:.2f})")


def _cmd_ablate(config: RunConfig, grid: str) -> None:
    from .protocol import provision_store

    out = Path(config.out)
    names = COMPONENT_GRID if grid == "components" else MIXTURE_GRID
    store = provision_store(config)
    rows = []
    baseline_accs: list[float] | None = None
    for name in names:
        if grid == "mixtures" and name != "ce":
            run_config = replace(config, ablation="full", mixture=name)
        else:
            run_config = replace(config, ablation=name, mixture="aug+aug")
        result = run_protocol(run_config, store=store)
        label = result.variant.label()
        if baseline_accs is None:
            baseline_accs = result.report.accuracies
        rows.append((label, result.report))
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "manifest.cfg", render_config(config))
    n_sessions = len(baseline_accs)
    header = "variant," + ",".join(f"s{i}" for i in range(n_sessions)) + ",average_acc,pd,delta_fi"
    lines = [header]
    for label, rep in rows:
        delta_fi = rep.accuracies[-1] - baseline_accs[-1]
        cells = [label] + [f"{a:.6f}" for a in rep.accuracies]
        cells += [f"{rep.average_acc:.6f}", f"{rep.pd:.6f}", f"{delta_fi:.6f}"]
        lines.append(",".join(cells))
    _write(out / "ablation.csv", "\n".join(lines) + "\n")
    report.save_variant_curves([(label, rep.accuracies) for label, rep in rows], out / "ablation_curves.png")
    print(f"wrote {out}/ablation.csv ({len(rows)} variants)")


def _cmd_sweep(config: RunConfig) -> None:
    from .protocol import provision_store

    out = Path(config.out)
    store = provision_store(config)
    rows = sweep_delta(config.sweep_deltas, config, store=store)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "manifest.cfg", render_config(config))
    lines = ["delta,final_accuracy"]
    lines += [f"{row.delta:.6f},{row.final_accuracy:.6f}" for row in rows]
    _write(out / "sweep.csv", "\n".join(lines) + "\n")
    report.save_sweep_curve(
        [row.delta for row in rows], [row.final_accuracy for row in rows], out / "delta_sweep.png"
    )
    print(f"wrote {out}/sweep.csv ({len(rows)} rows)")


def _session_of_labels(labels: np.ndarray, config: RunConfig) -> np.ndarray:
    spec = dataset_spec(config)
    session = np.zeros(labels.shape[0], dtype=np.int64)
    incremental = labels >= spec.base_classes
    session[incremental] = 1 + (labels[incremental] - spec.base_classes) // spec.ways
    return session


def _cmd_export(config: RunConfig, checkpoint: str | None) -> None:
    from .encoder import forward_features
    from .protocol import provision_store

    out = Path(config.out)
    ckpt_path = Path(checkpoint) if checkpoint else out / "checkpoint.bin"
    params = load_checkpoint(ckpt_path)
    store = provision_store(config)
    if store.input_dim != params.spec.input_dim:
        raise ConfigError(
            f"store width {store.input_dim} does not match checkpoint input_dim {params.spec.input_dim}"
        )
    sessions = _session_of_labels(store.labels, config)
    with no_grad():
        feats = forward_features(params, store.features).values
    lines = ["label,session," + ",".join(f"f{i}" for i in range(feats.shape[1]))]
    for label, sess, row in zip(store.labels, sessions, feats):
        lines.append(f"{int(label)},{int(sess)}," + ",".join(repr(float(v)) for v in row))
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "embeddings.csv", "\n".join(lines) + "\n")
    print(f"wrote {out}/embeddings.csv ({feats.shape[0]} rows)")


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = _resolve_config(args)
        if args.command == "train":
            _cmd_train(config)
        elif args.command == "ablate":
            _cmd_ablate(config, args.grid)
        elif args.command == "sweep-delta":
            _cmd_sweep(config)
        elif args.command == "export-embeddings":
            _cmd_export(config, args.checkpoint)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - single-line diagnostics by contract
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
