"""Command-line surface: gen-data, train, eval, plot, compare.

Every command resolves its output location under --out-dir (relative paths
land under the SYNCDG_OUT_ROOT environment variable when set), validates
configuration before any work starts, and exits 0 on success or non-zero
with a single-line diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import torch

from ._common import NonFiniteLossError, SequencingError, ValidationError, float_repr, write_text_atomic
from .domain_stream import (
    DRIFT_KINDS,
    DomainSequence,
    apply_drift_variant,
    generate_circle,
    generate_sine,
    load_sequence,
    save_sequence,
    split_domains,
)
from .evaluation import (
    compute_metrics,
    decision_boundary_grid,
    disentanglement_curve,
    load_grid,
    metrics_table,
    render_curve_png,
    render_grid_png,
    save_grid,
)
from .latent_model import load_checkpoint
from .predictor import predict_erm, predict_sequence
from .trainer import RunManifest, TrainConfig, load_erm_checkpoint, train, train_erm_baseline

OUT_ROOT_ENV = "SYNCDG_OUT_ROOT"

_GENERATORS = {"circle": generate_circle, "sine": generate_sine}

_CONFIG_EXTRA_KEYS = ("data", "out_dir")

_FLAG_CONFIG_FIELDS = (
    "batch_size",
    "epochs",
    "learning_rate",
    "alpha1",
    "alpha2",
    "mask_ratio",
    "latent_dim",
    "hidden_dim",
    "seed",
)


def _out_path(raw: str | None, default: str) -> Path:
    root = Path(os.environ.get(OUT_ROOT_ENV, "."))
    value = Path(raw) if raw is not None else Path(default)
    return value if value.is_absolute() else root / value


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    file = Path(path)
    if not file.exists():
        raise ValidationError(f"config file not found: {file}")
    try:
        values = json.loads(file.read_text())
    except json.JSONDecodeError as err:
        raise ValidationError(f"config file {file} is not valid JSON: {err}") from err
    if not isinstance(values, dict):
        raise ValidationError(f"config file {file} must hold a JSON object")
    allowed = set(TrainConfig.field_names()) | set(_CONFIG_EXTRA_KEYS)
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ValidationError(
            f"config file {file} has unknown keys: {', '.join(unknown)}; "
            f"allowed keys: {', '.join(sorted(allowed))}"
        )
    return values


def _resolve_config(sequence: DomainSequence, file_values: dict, args) -> TrainConfig:
    """Precedence: CLI flag > config file > built-in defaults for the dataset."""
    file_dataset = file_values.get("dataset")
    if file_dataset is not None and file_dataset != sequence.name:
        raise ValidationError(
            f"config file names dataset {file_dataset!r} but the data file holds {sequence.name!r}"
        )
    overrides = {
        k: v for k, v in file_values.items() if k in TrainConfig.field_names() and k != "dataset"
    }
    for name in _FLAG_CONFIG_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    return TrainConfig.for_dataset(sequence.name, **overrides)


def _load_data(path: str) -> DomainSequence:
    file = Path(path)
    if not file.exists():
        raise ValidationError(f"data file not found: {file}")
    return load_sequence(file)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file (flags override it)")
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--learning-rate", dest="learning_rate", type=float)
    parser.add_argument("--alpha1", type=float)
    parser.add_argument("--alpha2", type=float)
    parser.add_argument("--mask-ratio", dest="mask_ratio", type=float)
    parser.add_argument("--latent-dim", dest="latent_dim", type=int)
    parser.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    parser.add_argument("--seed", type=int)


def cmd_gen_data(args) -> int:
    if args.dataset not in _GENERATORS:
        raise ValidationError(f"unknown dataset {args.dataset!r}; choose from {sorted(_GENERATORS)}")
    sequence = _GENERATORS[args.dataset](args.domains, args.per_domain, seed=args.seed)
    if args.variant != "none":
        sequence = apply_drift_variant(
            sequence, args.variant, seed=args.seed, noise_scale=args.noise_scale
        )
    out = _out_path(args.out, f"{sequence.name}.txt")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_sequence(sequence, out)
    print(f"wrote {sequence.num_domains} domains ({sequence.total_samples()} samples) to {out}")
    return 0


def cmd_train(args) -> int:
    sequence = _load_data(args.data)
    file_values = _load_config_file(args.config)
    config = _resolve_config(sequence, file_values, args)
    source, intermediate, _ = split_domains(sequence)
    method = "erm" if args.erm else "sync"
    default_dir = args.out_dir or file_values.get("out_dir") or f"runs/{sequence.name}-{method}-s{config.seed}"
    out_dir = _out_path(args.out_dir or file_values.get("out_dir"), default_dir)
    runner = train_erm_baseline if args.erm else train
    result = runner(config, source, intermediate, out_dir=out_dir)
    best = result.manifest.epochs[result.manifest.best_epoch - 1]
    print(
        f"trained {method} on {sequence.name}: best epoch {result.manifest.best_epoch} "
        f"(intermediate avg {best['intermediate_avg']:.4f}); outputs in {out_dir}"
    )
    return 0


def _load_any_checkpoint(path: str):
    file = Path(path)
    if not file.exists():
        raise ValidationError(f"checkpoint not found: {file}")
    payload = torch.load(file, map_location="cpu", weights_only=True)
    kind = payload.get("kind")
    if kind == "sync":
        model, bank, config = load_checkpoint(file)
        return "sync", model, bank, config
    if kind == "erm":
        model, config = load_erm_checkpoint(file)
        return "erm", model, None, config
    raise ValidationError(f"checkpoint {file} has unknown kind {kind!r}")


def _predictions_csv(records) -> str:
    lines = ["domain,row,label,prediction"]
    for record in records:
        labels = record.labels.tolist() if record.labels is not None else [-1] * record.n_samples
        preds = record.predictions.tolist()
        for row, (label, pred) in enumerate(zip(labels, preds)):
            lines.append(f"{record.domain_index},{row},{label},{pred}")
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    kind, model, bank, _config = _load_any_checkpoint(args.checkpoint)
    sequence = _load_data(args.data)
    source, intermediate, target = split_domains(sequence)
    blocks = {"source": source, "intermediate": intermediate, "target": target}
    chosen = blocks[args.split]
    if kind == "sync":
        if args.split == "source":
            raise ValidationError(
                "the trained state bank sits after the source block; "
                "evaluate the intermediate or target split"
            )
        if bank is None or len(bank) == 0:
            raise ValidationError("checkpoint carries no state bank; re-train with outputs enabled")
        rolling = bank.clone()
        if args.split == "target":
            predict_sequence(model, rolling, intermediate, seed=args.seed)
        records = predict_sequence(model, rolling, chosen, seed=args.seed)
    else:
        records = predict_erm(model, chosen)
    report = compute_metrics(records, dataset=sequence.name, method=kind, seed=args.seed)

    out_dir = _out_path(args.out_dir, f"eval/{sequence.name}-{kind}-{args.split}-s{args.seed}")
    out_dir.mkdir(parents=True, exist_ok=True)
    write_text_atomic(out_dir / "predictions.csv", _predictions_csv(records))
    write_text_atomic(out_dir / "metrics.csv", metrics_table([report]))
    write_text_atomic(
        out_dir / "report.json", json.dumps(report.as_dict(), indent=2, sort_keys=True) + "\n"
    )
    print(
        f"{kind} on {sequence.name} [{args.split}]: worst {report.worst:.4f}, "
        f"average {report.average:.4f}; outputs in {out_dir}"
    )
    return 0


def cmd_plot(args) -> int:
    jobs = [bool(args.manifest), bool(args.grid), bool(args.checkpoint)]
    if sum(jobs) != 1:
        raise ValidationError("pass exactly one of --manifest, --grid, or --checkpoint")
    out_dir = _out_path(args.out_dir, "plots")
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.manifest:
        file = Path(args.manifest)
        if not file.exists():
            raise ValidationError(f"manifest not found: {file}")
        manifest = RunManifest.from_json(file.read_text())
        points = disentanglement_curve(manifest)
        out = out_dir / "disentanglement.png"
        render_curve_png(points, out, title=f"{manifest.dataset} ({manifest.method})")
        print(f"wrote {out}")
        return 0

    if args.grid:
        grid, bounds, domain_t = load_grid(args.grid)
        out = out_dir / f"boundary-d{domain_t}.png"
        render_grid_png(grid, bounds, out, title=f"domain {domain_t}")
        print(f"wrote {out}")
        return 0

    kind, model, bank, _config = _load_any_checkpoint(args.checkpoint)
    if kind != "sync":
        raise ValidationError("decision grids need a checkpoint of the sequential model")
    if args.domain is None:
        raise ValidationError("--domain is required when plotting from a checkpoint")
    bounds = tuple(args.bounds)
    grid = decision_boundary_grid(model, bank, bounds, args.resolution, args.domain, seed=args.seed)
    matrix_path = out_dir / f"boundary-d{args.domain}.txt"
    save_grid(matrix_path, grid, bounds, args.domain)
    png_path = out_dir / f"boundary-d{args.domain}.png"
    overlay_points = overlay_labels = None
    if args.data:
        sequence = _load_data(args.data)
        match = [d for d in sequence.domains if d.t == args.domain]
        if match:
            overlay_points, overlay_labels = match[0].features, match[0].labels
    render_grid_png(
        grid,
        bounds,
        png_path,
        title=f"domain {args.domain}",
        points=overlay_points,
        point_labels=overlay_labels,
    )
    print(f"wrote {matrix_path} and {png_path}")
    return 0


def cmd_compare(args) -> int:
    sequence = _load_data(args.data)
    file_values = _load_config_file(args.config)
    config = _resolve_config(sequence, file_values, args)
    source, intermediate, target = split_domains(sequence)
    out_dir = _out_path(args.out_dir, f"compare/{sequence.name}-s{config.seed}")

    sync_result = train(config, source, intermediate, out_dir=out_dir / "sync")
    rolling = sync_result.bank.clone()
    predict_sequence(sync_result.model, rolling, intermediate, seed=config.seed)
    sync_records = predict_sequence(sync_result.model, rolling, target, seed=config.seed)
    sync_report = compute_metrics(sync_records, dataset=sequence.name, method="sync", seed=config.seed)

    erm_result = train_erm_baseline(config, source, intermediate, out_dir=out_dir / "erm")
    erm_records = predict_erm(erm_result.model, target)
    erm_report = compute_metrics(erm_records, dataset=sequence.name, method="erm", seed=config.seed)

    write_text_atomic(out_dir / "metrics.csv", metrics_table([sync_report, erm_report]))
    header = f"{'method':<8}{'worst':>8}{'average':>10}"
    rows = [
        f"{'sync':<8}{100 * sync_report.worst:>8.1f}{100 * sync_report.average:>10.1f}",
        f"{'erm':<8}{100 * erm_report.worst:>8.1f}{100 * erm_report.average:>10.1f}",
    ]
    table = "\n".join([header, *rows])
    write_text_atomic(out_dir / "table.txt", table + "\n")
    print(f"{sequence.name}, seed {config.seed}, accuracy in percent over target domains:")
    print(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="syncdg",
        description="Drifting-domain benchmarks and sequential causal representation models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a drifting-domain dataset file")
    gen.add_argument("--dataset", required=True, help="circle or sine")
    gen.add_argument("--domains", type=int, default=30)
    gen.add_argument("--per-domain", dest="per_domain", type=int, default=256)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--variant", choices=("none",) + DRIFT_KINDS, default="none")
    gen.add_argument("--noise-scale", dest="noise_scale", type=float, default=0.15)
    gen.add_argument("--out", help="output file (default <name>.txt under the out root)")
    gen.set_defaults(func=cmd_gen_data)

    tr = sub.add_parser("train", help="train on the source block of a dataset file")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out-dir", dest="out_dir")
    tr.add_argument("--erm", action="store_true", help="train the pooled baseline instead")
    _add_config_flags(tr)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", choices=("source", "intermediate", "target"), default="target")
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--out-dir", dest="out_dir")
    ev.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plot", help="render curves or decision grids to PNG")
    pl.add_argument("--manifest", help="training manifest JSON -> disentanglement curve")
    pl.add_argument("--grid", help="saved grid matrix file -> boundary image")
    pl.add_argument("--checkpoint", help="model checkpoint -> compute and render a grid")
    pl.add_argument("--data", help="dataset file for a scatter overlay (with --checkpoint)")
    pl.add_argument("--domain", type=int, help="domain index for the grid (with --checkpoint)")
    pl.add_argument("--resolution", type=int, default=100)
    pl.add_argument(
        "--bounds",
        type=float,
        nargs=4,
        default=(-2.0, 2.0, -2.0, 2.0),
        metavar=("X_MIN", "X_MAX", "Y_MIN", "Y_MAX"),
    )
    pl.add_argument("--seed", type=int, default=0)
    pl.add_argument("--out-dir", dest="out_dir")
    pl.set_defaults(func=cmd_plot)

    cp = sub.add_parser("compare", help="train and score both methods on one dataset")
    cp.add_argument("--data", required=True)
    cp.add_argument("--out-dir", dest="out_dir")
    _add_config_flags(cp)
    cp.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (SequencingError, NonFiniteLossError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
