"""Command-line entry point: ``nmiconf {gen,train,eval,report}``.

Configuration comes from an optional flat ``key = value`` file (``#`` starts a
comment). Keys are field names of the data, model or training configuration;
a bare name such as ``seed`` sets that field everywhere it exists, while a
qualified name such as ``data.seed`` targets one section. Command-line flags
override file values.

Exit codes: 0 success, 2 usage or validation error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import model as vae
from . import synthdata as sd
from . import trainer as tr
from .diffcore import ShapeError

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3

log = logging.getLogger("nmiconf")

# model fields that are fixed or derived from the data are not configurable
_MODEL_KEYS = ("hidden", "leaky_slope", "seed")
SECTIONS = {
    "data": (sd.DataConfig, tuple(f.name for f in fields(sd.DataConfig))),
    "model": (vae.ModelConfig, _MODEL_KEYS),
    "train": (tr.TrainConfig, tuple(f.name for f in fields(tr.TrainConfig))),
}


class UsageError(Exception):
    """Bad input from the user; reported on stderr with exit code 2."""


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------


def _convert(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [float(p) for p in raw.strip("()[] ").split(",")]
            if len(parts) != len(default):
                raise ValueError(raw)
            return tuple(parts)
    except ValueError:
        raise UsageError(f"invalid value for '{key}': {raw!r}") from None
    return raw


def _targets(key: str) -> list[tuple[str, str]]:
    if "." in key:
        section, name = key.split(".", 1)
        if section in SECTIONS and name in SECTIONS[section][1]:
            return [(section, name)]
        return []
    return [(s, key) for s, (_, names) in SECTIONS.items() if key in names]


def parse_config(text: str, source: str = "<config>") -> dict[str, dict]:
    """Parse ``key = value`` lines into per-section override dicts."""
    out: dict[str, dict] = {s: {} for s in SECTIONS}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected key = value")
        key, raw = (p.strip() for p in line.split("=", 1))
        targets = _targets(key)
        if not targets:
            raise UsageError(f"{source}:{lineno}: unknown config key '{key}'")
        for section, name in targets:
            cls = SECTIONS[section][0]
            out[section][name] = _convert(raw, getattr(cls(), name), key)
    return out


def load_config(path: str | None) -> dict[str, dict]:
    if path is None:
        return {s: {} for s in SECTIONS}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config not found: {path}")
    return parse_config(p.read_text(encoding="utf-8"), str(p))


def _build(section: str, values: dict):
    try:
        return SECTIONS[section][0](**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {section} configuration: {exc}") from None


def _flags(ns: argparse.Namespace, mapping: dict[str, str]) -> dict:
    return {field: getattr(ns, attr) for attr, field in mapping.items() if getattr(ns, attr) is not None}


def _load_batch(path: str) -> sd.Batch:
    try:
        samples = sd.read_samples(path)
    except FileNotFoundError:
        raise UsageError(f"data file not found: {path}") from None
    except sd.DataFormatError as exc:
        raise UsageError(f"{path}: {exc}") from None
    if not samples:
        raise UsageError(f"{path}: data file is empty")
    return sd.stack(samples)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(ns: argparse.Namespace) -> int:
    cfg = load_config(ns.config)
    data_cfg = _build("data", {**cfg["data"], **_flags(ns, {"n": "n_samples", "seed": "seed"})})
    try:
        n = sd.write_samples(ns.out, sd.generate_dataset(data_cfg))
    except OSError as exc:
        raise UsageError(f"cannot write {ns.out}: {exc.strerror}") from None
    print(f"wrote {n} samples (seed {data_cfg.seed}) to {ns.out}")
    return EXIT_OK


def cmd_train(ns: argparse.Namespace) -> int:
    cfg = load_config(ns.config)
    if ns.coverage is not None and not 0.0 < ns.coverage < 1.0:
        raise UsageError(f"--coverage must lie in (0, 1), got {ns.coverage}")
    train_cfg = _build("train", {**cfg["train"], **_flags(ns, {"epochs": "epochs", "coverage": "coverage", "seed": "seed"})})
    model_cfg = _build("model", {**cfg["model"], **_flags(ns, {"seed": "seed"})})
    data = _load_batch(ns.data)
    if len(data) < 2 * train_cfg.batch_size:
        raise UsageError(f"need at least {2 * train_cfg.batch_size} samples for batch_size {train_cfg.batch_size}, got {len(data)}")

    c = train_cfg.conformal
    log.info("coverage p=%.3f alpha_l=%.3f alpha_h=%.3f", c.p, c.alpha_l, c.alpha_h)
    try:
        result = tr.train(data, model_cfg, train_cfg)
    except tr.TrainingDiverged as exc:
        vae.save_checkpoint(ns.out_model, exc.model_config, exc.params)
        tr.write_metrics(ns.out_metrics, exc.metrics)
        print(f"training diverged: {exc}", file=sys.stderr)
        print(f"last good checkpoint written to {ns.out_model}", file=sys.stderr)
        return EXIT_DIVERGED
    vae.save_checkpoint(ns.out_model, result.model_config, result.params)
    tr.write_metrics(ns.out_metrics, result.metrics)
    last = result.metrics[-1] if result.metrics else None
    if last is not None:
        print(f"epochs {len(result.metrics)}  loss {last.total_loss:.4f}  val_coverage {last.val_coverage:.4f}  val_MAU {last.val_MAU:.4f}")
    print(f"model -> {ns.out_model}  metrics -> {ns.out_metrics}")
    return EXIT_OK


def cmd_eval(ns: argparse.Namespace) -> int:
    try:
        model_cfg, params = vae.load_checkpoint(ns.model)
    except FileNotFoundError:
        raise UsageError(f"model not found: {ns.model}") from None
    except vae.CheckpointError as exc:
        raise UsageError(str(exc)) from None
    data = _load_batch(ns.data)
    try:
        report = tr.evaluate(params, model_cfg, data)
    except ShapeError as exc:
        raise UsageError(f"checkpoint and data disagree: {exc}") from None
    doc = {**report.summary(), "objects": report.objects}
    Path(ns.report).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    s = report.summary()
    print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in s.items()))
    return EXIT_OK


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_report(ns: argparse.Namespace) -> int:
    try:
        rows = tr.read_metrics(ns.metrics)
    except FileNotFoundError:
        raise UsageError(f"metrics not found: {ns.metrics}") from None
    except tr.MetricsFormatError as exc:
        raise UsageError(f"{ns.metrics}: {exc}") from None
    out = Path(ns.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "uncertainty_vs_nmi.csv", ("epoch", "mean_U", "mean_NMI"),
               ([r.epoch, repr(r.mean_U), repr(r.mean_NMI)] for r in rows))
    _write_csv(out / "coverage.csv", ("epoch", "train_coverage", "val_coverage"),
               ([r.epoch, repr(r.train_coverage), repr(r.val_coverage)] for r in rows))
    r = tr.pearson_r([m.mean_U for m in rows], [m.mean_NMI for m in rows]) if len(rows) >= 2 else None
    if r is None:
        print("warning: a series has zero variance; correlation is undefined", file=sys.stderr)
        print("pearson_r(mean_U, mean_NMI) = undefined")
    else:
        print(f"pearson_r(mean_U, mean_NMI) = {r:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show defaults, except for optional values that fall back to the config file."""

    def _get_help_string(self, action):
        if action.default is None:
            return action.help
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = argparse.ArgumentParser(
        prog="nmiconf",
        description="NMI-calibrated conformal fusion on synthetic two-modality 3D boxes. "
        "Flags override values read from --config.",
        formatter_class=fmt,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_arg(p):
        p.add_argument("--config", default=None, help="flat key=value config file; flags take precedence (default: none)")

    p = sub.add_parser("gen", help="generate a synthetic dataset", formatter_class=fmt)
    config_arg(p)
    p.add_argument("--out", required=True, help="output line-delimited JSON file (required)")
    p.add_argument("--seed", type=int, default=None, help="data seed (default: config value, else 0)")
    p.add_argument("--n", type=int, default=None, help="number of samples (default: config value, else 5000)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model", formatter_class=fmt)
    config_arg(p)
    p.add_argument("--data", required=True, help="training data file (required)")
    p.add_argument("--epochs", type=int, default=None, help="epochs (default: config value, else 50)")
    p.add_argument("--coverage", type=float, default=None,
                   help="target coverage p; quantile levels become (1-p)/2 and 1-(1-p)/2 (default: config value, else 0.9)")
    p.add_argument("--seed", type=int, default=None, help="model and training seed (default: config value, else 0 and 1)")
    p.add_argument("--out-model", default="model.json", help="checkpoint output")
    p.add_argument("--out-metrics", default="metrics.csv", help="per-epoch metrics CSV output")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint", formatter_class=fmt)
    p.add_argument("--model", required=True, help="checkpoint file (required)")
    p.add_argument("--data", required=True, help="data file (required)")
    p.add_argument("--report", default="report.json", help="JSON report output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="emit plot-ready CSVs from a metrics file", formatter_class=fmt)
    p.add_argument("--metrics", required=True, help="metrics CSV from train (required)")
    p.add_argument("--out-dir", default=".", help="directory for uncertainty_vs_nmi.csv and coverage.csv")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(message)s")
    try:
        return ns.func(ns)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
