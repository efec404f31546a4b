"""Command-line surface: gen-data, train, eval, scan-lambda, scan-fraction.

All configs are JSON files; flags only override scalar fields (seed, jobs,
output directory). Every command that produces artifacts drops a manifest
with config snapshots and content hashes of its inputs and outputs, enough
to reproduce the run byte for byte. Exit codes: 0 success, 2 validation
error, 3 numerical failure.

No plotting happens here; outputs are plot-ready CSV/JSON.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    SyntheticConfig,
    generate_synthetic,
    read_events_csv,
    split,
    write_events_csv,
)
from .errors import ConfigError, TrainingDiverged
from .experiments import (
    EvalSettings,
    evaluate_model,
    lambda_scan,
    signal_fraction_scan,
)
from .metrics import purity_efficiency_curve, response_histogram
from .model import SOURCE, TARGET, DannConfig
from .training import TrainConfig, TrainedModel, train

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def _dump_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


class Manifest:
    """Reproducibility record written next to every command's outputs."""

    def __init__(self, command: str, seed, config_snapshot: dict):
        self.started = time.time()
        self.data = {
            "command": command,
            "tool_version": __version__,
            "seed": seed,
            "config": config_snapshot,
            "inputs": {},
            "outputs": {},
        }

    def add_input(self, path) -> None:
        self.data["inputs"][str(path)] = _sha256(Path(path))

    def add_output(self, path) -> None:
        self.data["outputs"][Path(path).name] = _sha256(Path(path))

    def write(self, out_dir: Path) -> None:
        self.data["wall_clock_seconds"] = round(time.time() - self.started, 3)
        _dump_json(self.data, out_dir / "manifest.json")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_dataset(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"data file not found: {path}")
    return read_events_csv(path)


def _split_domains(dataset, test_fraction, seed):
    test, train_part = split(dataset, test_fraction, seed)
    parts = {}
    for name, ds in (("test", test), ("train", train_part)):
        for dom, code in (("source", SOURCE), ("target", TARGET)):
            sub = ds.mask(domain=code)
            if not sub.any():
                raise ConfigError(f"no {dom} events in the {name} split")
            parts[f"{name}_{dom}"] = ds.select(sub)
    return parts


def _model_config(args, input_dim: int) -> DannConfig:
    raw = _load_json(args.model_config)
    raw.setdefault("input_dim", input_dim)
    cfg = DannConfig.from_dict(raw)
    if cfg.input_dim != input_dim:
        raise ConfigError(f"model config expects {cfg.input_dim} features, "
                          f"data has {input_dim}")
    if getattr(args, "grl_lambda", None) is not None:
        cfg = cfg.with_lambda(args.grl_lambda)
    return cfg


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.from_dict(_load_json(args.train_config))
    if args.seed is not None:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    return cfg


def _parse_grid(spec: str) -> list[float]:
    """Either a comma list ('0,0.5,2') or a log range 'lo:hi:n'."""
    spec = spec.strip()
    try:
        if ":" in spec:
            lo_s, hi_s, n_s = spec.split(":")
            lo, hi, n = float(lo_s), float(hi_s), int(n_s)
            if lo <= 0 or hi <= lo or n < 2:
                raise ConfigError(
                    "log range needs 0 < lo < hi and n >= 2 (use a comma "
                    "list to include 0)")
            return [float(v) for v in np.geomspace(lo, hi, n)]
        return [float(v) for v in spec.split(",") if v.strip() != ""]
    except ValueError:
        raise ConfigError(f"cannot parse grid spec {spec!r}") from None


def cmd_gen_data(args) -> int:
    config = SyntheticConfig.from_dict(_load_json(args.config))
    if args.seed is not None:
        config.seed = args.seed
        config.validate()
    out = _out_dir(args)
    manifest = Manifest("gen-data", config.seed, config.to_dict())
    manifest.add_input(args.config)
    dataset = generate_synthetic(config)
    data_path = out / "events.csv"
    write_events_csv(dataset, data_path)
    manifest.add_output(data_path)
    manifest.write(out)
    print(f"wrote {len(dataset)} events to {data_path}")
    for stratum, count in dataset.stratum_counts().items():
        print(f"  {stratum}: {count}")
    means = dataset.features.mean(axis=0)
    print("  feature means: " + " ".join(f"{m:.3f}" for m in means))
    return EXIT_OK


def cmd_train(args) -> int:
    dataset = _load_dataset(args.data)
    dann_cfg = _model_config(args, dataset.dim)
    train_cfg = _train_config(args)
    out = _out_dir(args)
    manifest = Manifest("train", train_cfg.seed, {
        "model": dann_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "test_fraction": args.test_fraction,
        "split_seed": args.split_seed,
    })
    manifest.add_input(args.data)
    manifest.add_input(args.model_config)
    manifest.add_input(args.train_config)
    parts = _split_domains(dataset, args.test_fraction, args.split_seed)
    try:
        model, record = train(parts["train_source"], parts["train_target"],
                              dann_cfg, train_cfg)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        if exc.record is not None:
            _dump_json(exc.record.to_dict(), out / "record.json")
            exc.record.to_csv(out / "losses.csv")
        return EXIT_NUMERICAL
    _dump_json(model.to_dict(), out / "checkpoint.json")
    _dump_json(record.to_dict(), out / "record.json")
    record.to_csv(out / "losses.csv")
    metrics = evaluate_model(
        model, parts["test_source"], parts["test_target"],
        EvalSettings(target_signal_fraction=train_cfg.target_signal_fraction))
    _dump_json(metrics, out / "metrics.json")
    for name in ("checkpoint.json", "record.json", "losses.csv", "metrics.json"):
        manifest.add_output(out / name)
    manifest.write(out)
    print(f"best epoch {record.best_epoch} of {record.n_epochs} "
          f"({record.stop_reason}); label loss {record.best_label_loss:.4f}")
    print("  " + " ".join(f"{k}={v:.4f}" for k, v in metrics.items()))
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise ConfigError(f"checkpoint not found: {ckpt_path}")
    model = TrainedModel.from_dict(_load_json(ckpt_path))
    dataset = _load_dataset(args.data)
    if dataset.dim != model.network.config.input_dim:
        raise ConfigError(
            f"checkpoint was trained on {model.network.config.input_dim} "
            f"features, data has {dataset.dim}")
    out = _out_dir(args)
    manifest = Manifest("eval", None, {
        "signal_fraction": args.signal_fraction, "bins": args.bins})
    manifest.add_input(ckpt_path)
    manifest.add_input(args.data)

    scores = model.signal_scores(dataset.features)
    src = dataset.mask(domain=SOURCE)
    tgt = dataset.mask(domain=TARGET)
    if not src.any() or not tgt.any():
        raise ConfigError("evaluation data must contain both domains")
    metrics = evaluate_model(
        model, dataset.select(src), dataset.select(tgt),
        EvalSettings(target_signal_fraction=args.signal_fraction,
                     n_bins=args.bins))
    _dump_json(metrics, out / "metrics.json")

    hist = response_histogram(scores, dataset.labels, dataset.domains,
                              dataset.weights, n_bins=args.bins)
    norm = hist.normalized()
    strata = sorted(hist.counts)
    with open(out / "response_histogram.csv", "w", encoding="utf-8") as fh:
        fh.write("bin_lo,bin_hi," + ",".join(strata) + ","
                 + ",".join(f"{s}_norm" for s in strata) + "\n")
        for i in range(args.bins):
            raw = ",".join(repr(float(hist.counts[s][i])) for s in strata)
            rel = ",".join(repr(float(norm.counts[s][i])) for s in strata)
            fh.write(f"{hist.bin_edges[i]!r},{hist.bin_edges[i + 1]!r},"
                     f"{raw},{rel}\n")
    with open(out / "ams_inputs.csv", "w", encoding="utf-8") as fh:
        fh.write("bin_lo,bin_hi,s,b,b_alt\n")
        for i in range(args.bins):
            fh.write(f"{hist.bin_edges[i]!r},{hist.bin_edges[i + 1]!r},"
                     f"{hist.counts['source_signal'][i]!r},"
                     f"{hist.counts['source_background'][i]!r},"
                     f"{hist.counts['target_background'][i]!r}\n")
    with open(out / "purity.csv", "w", encoding="utf-8") as fh:
        fh.write("domain,cut,efficiency,purity\n")
        for dom, code in (("source", SOURCE), ("target", TARGET)):
            m = dataset.mask(domain=code)
            curve = purity_efficiency_curve(
                scores[m], dataset.labels[m], dataset.weights[m],
                signal_fraction=args.signal_fraction)
            for c, e, p in zip(curve.cuts, curve.efficiency, curve.purity):
                fh.write(f"{dom},{float(c)!r},{float(e)!r},{float(p)!r}\n")
    for name in ("metrics.json", "response_histogram.csv", "ams_inputs.csv",
                 "purity.csv"):
        manifest.add_output(out / name)
    manifest.write(out)
    print(" ".join(f"{k}={v:.4f}" for k, v in metrics.items()))
    return EXIT_OK


def cmd_scan_lambda(args) -> int:
    dataset = _load_dataset(args.data)
    dann_cfg = _model_config(args, dataset.dim)
    train_cfg = _train_config(args)
    grid = _parse_grid(args.grid)
    out = _out_dir(args)
    seed = args.seed if args.seed is not None else train_cfg.seed
    manifest = Manifest("scan-lambda", seed, {
        "model": dann_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "grid": grid,
        "repeats": args.repeats,
        "test_fraction": args.test_fraction,
        "split_seed": args.split_seed,
        "ks_tolerance": args.ks_tolerance,
    })
    manifest.add_input(args.data)
    manifest.add_input(args.model_config)
    manifest.add_input(args.train_config)
    parts = _split_domains(dataset, args.test_fraction, args.split_seed)
    result = lambda_scan(
        parts["train_source"], parts["train_target"],
        parts["test_source"], parts["test_target"],
        grid, args.repeats, dann_cfg, train_cfg,
        master_seed=seed, jobs=args.jobs, ks_tolerance=args.ks_tolerance)
    _dump_json(result.to_dict(), out / "scan.json")
    result.to_csv(out / "scan.csv")
    manifest.add_output(out / "scan.json")
    manifest.add_output(out / "scan.csv")
    manifest.write(out)
    for p in result.points:
        agg = p.aggregates()
        print(f"lambda={p.grl_lambda:g} auc_source={agg['auc_source']['median']:.4f} "
              f"auc_target={agg['auc_target']['median']:.4f} "
              f"ks={agg['ks']['median']:.4f} ams={agg['ams']['median']:.3f} "
              f"diverged={p.n_diverged}")
    print(f"selected lambda: {result.selected_lambda:g}")
    return EXIT_OK


def cmd_scan_fraction(args) -> int:
    synth = SyntheticConfig.from_dict(_load_json(args.synth_config))
    dann_raw = _load_json(args.model_config)
    dann_raw.setdefault("input_dim", synth.dims)
    dann_cfg = DannConfig.from_dict(dann_raw)
    if getattr(args, "grl_lambda", None) is not None:
        dann_cfg = dann_cfg.with_lambda(args.grl_lambda)
    train_cfg = _train_config(args)
    fractions = [float(v) for v in args.fractions.split(",") if v.strip()]
    out = _out_dir(args)
    seed = args.seed if args.seed is not None else train_cfg.seed
    manifest = Manifest("scan-fraction", seed, {
        "model": dann_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "synthetic": synth.to_dict(),
        "mode": args.mode,
        "fractions": fractions,
        "repeats": args.repeats,
        "source_fraction": args.source_fraction,
    })
    manifest.add_input(args.synth_config)
    manifest.add_input(args.model_config)
    manifest.add_input(args.train_config)
    result = signal_fraction_scan(
        args.mode, fractions, args.repeats, dann_cfg, train_cfg, synth,
        master_seed=seed, jobs=args.jobs, source_fraction=args.source_fraction)
    _dump_json(result.to_dict(), out / "fraction_scan.json")
    result.to_csv(out / "fraction_scan.csv")
    manifest.add_output(out / "fraction_scan.json")
    manifest.add_output(out / "fraction_scan.csv")
    manifest.write(out)
    for p in result.points:
        agg = p.aggregates()
        print(f"fraction={p.fraction:g} "
              f"auc_target={agg['auc_target']['median']:.4f} "
              f"(band {agg['auc_target']['lo']:.4f}..{agg['auc_target']['hi']:.4f})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dann",
        description="Adversarially debiased signal/background classification")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic two-domain CSV")
    p.add_argument("--config", required=True, help="SyntheticConfig JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train once and write a checkpoint")
    p.add_argument("--data", required=True, help="events CSV")
    p.add_argument("--model-config", required=True)
    p.add_argument("--train-config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lambda", dest="grl_lambda", type=float, default=None,
                   help="override the coupling strength")
    p.add_argument("--test-fraction", type=float, default=0.5)
    p.add_argument("--split-seed", type=int, default=7)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--signal-fraction", type=float, default=0.05)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("scan-lambda", help="repeat trainings over a grid")
    p.add_argument("--data", required=True)
    p.add_argument("--model-config", required=True)
    p.add_argument("--train-config", required=True)
    p.add_argument("--grid", required=True,
                   help="comma list ('0,0.5,2') or log range 'lo:hi:n'")
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--test-fraction", type=float, default=0.5)
    p.add_argument("--split-seed", type=int, default=7)
    p.add_argument("--ks-tolerance", type=float, default=0.01)
    p.set_defaults(func=cmd_scan_lambda)

    p = sub.add_parser("scan-fraction",
                       help="target-AUC sensitivity to the signal fraction")
    p.add_argument("--mode", choices=("matched", "mismatched"), required=True)
    p.add_argument("--fractions", required=True, help="comma list in (0,1)")
    p.add_argument("--synth-config", required=True)
    p.add_argument("--model-config", required=True)
    p.add_argument("--train-config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--lambda", dest="grl_lambda", type=float, default=None)
    p.add_argument("--source-fraction", type=float, default=0.05)
    p.set_defaults(func=cmd_scan_fraction)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except TrainingDiverged as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
