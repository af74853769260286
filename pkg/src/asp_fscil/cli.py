"""Command-line entry point.

    asp-fscil gen      --out data.aspd [--config cfg.json] [--seed 0]
    asp-fscil pretrain --out backbone.aspc [--data data.aspd]
    asp-fscil run      --seed 0 --out-dir runs/s0 [--config cfg.json] [--backbone backbone.aspc]
    asp-fscil ablate   --out-dir runs/ablate --seeds 0 1 2
    asp-fscil metrics  --checkpoint runs/s0/ckpt_task5.aspc
    asp-fscil report   runs/*/report.json --out-dir summary

Every RunConfig field is also a flag named ``--<section>-<field>``, for
example ``--optim-lr 0.02`` or ``--ablation-no-tsp true``.

Exit codes: 0 success, 1 I/O or other failure, 2 configuration error,
3 data-format error, 4 numeric error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import MISSING, fields
from typing import List, Optional, Sequence

import numpy as np

from . import checkpoint as ckpt
from . import data as aspd
from .exceptions import ConfigError, ContractError, DimensionError, FormatError, NumericError
from .learner import ABLATIONS, evaluate
from .metrics import MetricsReport, emit, load_report
from .runner import (_SECTIONS, DataSource, RunConfig, build_backbone, load_config, prepare_data,
                     run_ablations, run_experiment)

logger = logging.getLogger("asp_fscil")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_FORMAT, EXIT_NUMERIC = 0, 1, 2, 3, 4


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _parse_layers(text: str) -> List[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _field_parser(f):
    default = f.default if f.default is not MISSING else None
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, tuple):
        return _parse_layers
    return int  # Optional[int] fields


def _add_config_flags(p: argparse.ArgumentParser, seed_required: bool = False) -> None:
    p.add_argument("--config", help="JSON file with RunConfig sections")
    p.add_argument("--seed", type=int, required=seed_required)
    g = p.add_argument_group("run configuration overrides")
    for section, typ in _SECTIONS.items():
        for f in fields(typ):
            flag = f"--{section}-{f.name}".replace("_", "-")
            g.add_argument(flag, dest=f"cfg__{section}__{f.name}", type=_field_parser(f),
                           default=None, metavar=f.name.upper())


def config_from_args(args: argparse.Namespace) -> RunConfig:
    base = load_config(args.config).to_dict() if args.config else RunConfig().to_dict()
    for key, value in vars(args).items():
        if key.startswith("cfg__") and value is not None:
            _, section, name = key.split("__")
            base[section][name] = value
    if getattr(args, "ablation", None):
        if args.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {args.ablation!r}; choose from {sorted(ABLATIONS)}")
        base["ablation"] = args.ablation
    if args.seed is not None:
        base["seed"] = args.seed
    return RunConfig.from_dict(base)


def _load_dataset(cfg: RunConfig, path: Optional[str]):
    """Dataset from an ASPD file (checked against the config) or generated from the config."""
    if path is None:
        return prepare_data(cfg)
    dataset = aspd.load(path)
    s = cfg.split
    if dataset.num_classes < s.num_classes:
        raise ConfigError(f"{path}: has {dataset.num_classes} classes, config needs {s.num_classes}")
    side = aspd.split_path(path)
    dataset, stream = prepare_data(cfg, dataset)
    if os.path.exists(side):
        stored = aspd.load_split(side)
        if [t.classes for t in stored.tasks] != [t.classes for t in stream.tasks]:
            raise ConfigError(f"{side}: stored split does not match the configuration")
    return dataset, stream


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = config_from_args(args)
    dataset, stream = prepare_data(cfg)
    aspd.save(dataset, args.out)
    aspd.save_split(stream, aspd.split_path(args.out))
    print(f"wrote {len(dataset)} images ({dataset.num_classes} classes) to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = config_from_args(args)
    dataset, stream = _load_dataset(cfg, args.data)
    backbone, curve = build_backbone(cfg, dataset, stream)
    ckpt.save_backbone(backbone, args.out, extra={"config": cfg.to_dict(), "loss_curve": curve})
    print(f"pretrain loss {curve[0]:.4f} -> {curve[-1]:.4f}; wrote {args.out}" if curve
          else f"wrote {args.out}")
    return EXIT_OK


def _backbone_arg(path: Optional[str], cfg: RunConfig):
    if path is None:
        return None
    backbone, _ = ckpt.load_backbone(path)
    if backbone.config != cfg.vit:
        raise ConfigError(f"{path}: backbone geometry differs from the configuration")
    return backbone


def cmd_run(args) -> int:
    cfg = config_from_args(args)
    dataset, _ = _load_dataset(cfg, args.data)
    os.makedirs(args.out_dir, exist_ok=True)
    with open(os.path.join(args.out_dir, "config.json"), "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
    res = run_experiment(cfg, args.out_dir, dataset=dataset,
                         backbone=_backbone_arg(args.backbone, cfg), resume=not args.no_resume)
    r = res.report
    hacc = "n/a" if r.hacc is None else f"{100 * r.hacc:.1f}"
    print(f"A_avg {100 * r.a_avg:.1f}  PD {100 * r.pd:.1f}  HAcc {hacc}  -> {args.out_dir}")
    return EXIT_OK


def _summary(groups, out_dir: str) -> dict:
    summary = {}
    for name, reports in groups.items():
        haccs = [r.hacc for r in reports if r.hacc is not None]
        summary[name] = {
            "seeds": [r.seed for r in reports],
            "a_avg": float(np.mean([r.a_avg for r in reports])),
            "pd": float(np.mean([r.pd for r in reports])),
            "hacc": float(np.mean(haccs)) if haccs else None,
            "accuracies": np.mean([r.accuracies for r in reports], axis=0).tolist(),
        }
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "summary.csv"), "w") as fh:
        fh.write("name,A_avg,PD,HAcc\n")
        for name, s in summary.items():
            h = "" if s["hacc"] is None else f"{100 * s['hacc']:.1f}"
            fh.write(f"{name},{100 * s['a_avg']:.1f},{100 * s['pd']:.1f},{h}\n")
    return summary


def cmd_ablate(args) -> int:
    cfg = config_from_args(args)
    names = args.ablations or list(ABLATIONS)
    bad = [n for n in names if n not in ABLATIONS]
    if bad:
        raise ConfigError(f"unknown ablations {bad}; choose from {sorted(ABLATIONS)}")
    groups = run_ablations(cfg, names, args.seeds, args.out_dir)
    summary = _summary(groups, args.out_dir)
    for name, s in summary.items():
        h = "n/a" if s["hacc"] is None else f"{100 * s['hacc']:.1f}"
        print(f"{name:10s} A_avg {100 * s['a_avg']:.1f}  PD {100 * s['pd']:.1f}  HAcc {h}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    model, extra = ckpt.load(args.checkpoint)
    if "config" not in extra:
        raise FormatError(f"{args.checkpoint}: checkpoint carries no run configuration")
    cfg = RunConfig.from_dict(extra["config"])
    dataset, stream = _load_dataset(cfg, args.data)
    # earlier tasks are re-read from the stored trail; the final task is re-evaluated
    t = model.task_index
    accs, base, new = (list(extra.get(k, []))[:t] for k in
                       ("accuracies", "base_accuracies", "new_accuracies"))
    idx = stream.test_indices(t)
    res = evaluate(model, dataset.images[idx], dataset.labels[idx])
    accs.append(res.accuracy)
    base.append(res.base_accuracy)
    new.append(res.new_accuracy)
    report = MetricsReport(accs, base, new, cfg.config_hash(), cfg.seed, cfg.ablation.label)
    if args.out_dir:
        emit(report, args.out_dir)
    print(report.to_json())
    return EXIT_OK


def cmd_report(args) -> int:
    reports = []
    for path in args.reports:
        try:
            reports.append(load_report(path))
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise FormatError(f"{path}: not a metrics report ({e})") from None
    if len(reports) == 1:
        r = reports[0]
        if args.out_dir:
            emit(r, args.out_dir)
        print(r.to_csv() if args.format == "csv" else r.to_json(), end="")
        return EXIT_OK
    groups = {}
    for r in reports:
        groups.setdefault(r.label, []).append(r)
    summary = _summary(groups, args.out_dir or ".")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="asp-fscil", description=__doc__.split("\n")[0])
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset (ASPD) and its split sidecar")
    _add_config_flags(g)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    g = sub.add_parser("pretrain", help="pretrain and freeze a backbone")
    _add_config_flags(g)
    g.add_argument("--data")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_pretrain)

    g = sub.add_parser("run", help="full experiment: pretrain, base task, incremental tasks")
    _add_config_flags(g, seed_required=True)
    g.add_argument("--out-dir", required=True)
    g.add_argument("--data")
    g.add_argument("--backbone")
    g.add_argument("--ablation", choices=sorted(ABLATIONS))
    g.add_argument("--no-resume", action="store_true")
    g.set_defaults(func=cmd_run)

    g = sub.add_parser("ablate", help="run the ablation matrix over several seeds")
    _add_config_flags(g)
    g.add_argument("--out-dir", required=True)
    g.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    g.add_argument("--ablations", nargs="+")
    g.set_defaults(func=cmd_ablate)

    g = sub.add_parser("metrics", help="recompute the metrics report from a checkpoint")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--data")
    g.add_argument("--out-dir")
    g.set_defaults(func=cmd_metrics)

    g = sub.add_parser("report", help="emit JSON/CSV from report files; aggregates several")
    g.add_argument("reports", nargs="+")
    g.add_argument("--out-dir")
    g.add_argument("--format", choices=["json", "csv"], default="json")
    g.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse uses 2 for usage errors, which is also our config-error code
        return int(e.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, DimensionError) as e:
        print(f"data format error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ContractError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
