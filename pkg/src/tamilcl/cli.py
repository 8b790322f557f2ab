"""Run, sweep and inspect continual-learning experiments.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .engine import EvalMode, TrainConfig, run_stream
from .taskdata import SyntheticConfig, generate_synthetic, load_stream, write_stream

logger = logging.getLogger("tamilcl")

OUTPUT_ROOT_ENV = "TAMILCL_OUTPUT_ROOT"
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
_DATA_KEYS = {f.name for f in dataclasses.fields(SyntheticConfig)} - {"seed"}
_OTHER_KEYS = {"dataset_path", "data_seed", "output_dir", "seeds", "checkpoints"}
CONFIG_KEYS = _TRAIN_KEYS | _DATA_KEYS | _OTHER_KEYS


class ConfigError(ValueError):
    pass


def _default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    cfg = dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        cfg[key.strip()] = _parse_value(raw.strip())
    return cfg


def resolve_config(raw: dict) -> dict:
    """Validate a flat experiment config and fill every default."""
    unknown = sorted(set(raw) - CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    cfg = {k: raw[k] for k in raw}
    train_kw = {k: cfg[k] for k in _TRAIN_KEYS if k in cfg}
    try:
        train = TrainConfig(**train_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid training config: {exc}") from None
    out = train.to_dict()
    if cfg.get("dataset_path"):
        out["dataset_path"] = str(cfg["dataset_path"])
    else:
        data_kw = {k: cfg[k] for k in _DATA_KEYS if k in cfg}
        data_seed = cfg.get("data_seed")
        data_kw["seed"] = train.seed if data_seed is None else data_seed
        try:
            synth = SyntheticConfig(**data_kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid dataset config: {exc}") from None
        out.update({k: v for k, v in dataclasses.asdict(synth).items() if k != "seed"})
        out["dataset_path"] = None
    out["data_seed"] = cfg.get("data_seed")
    out["checkpoints"] = bool(cfg.get("checkpoints", False))
    out["output_dir"] = cfg.get("output_dir")
    seeds = cfg.get("seeds")
    if seeds is not None and (not isinstance(seeds, list) or not seeds):
        raise ConfigError("seeds must be a non-empty list")
    out["seeds"] = seeds
    return out


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**{k: cfg[k] for k in _TRAIN_KEYS})


def _load_data(cfg: dict):
    if cfg["dataset_path"]:
        return load_stream(cfg["dataset_path"])
    kw = {k: cfg[k] for k in _DATA_KEYS}
    seed = cfg["seed"] if cfg["data_seed"] is None else cfg["data_seed"]
    return generate_synthetic(SyntheticConfig(seed=seed, **kw))


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def accuracy_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    n = report["n_tasks"]
    w.writerow(["mode", "eval_task"] + [f"after_task_{j}" for j in range(n)])
    for mode in EvalMode:
        for i, row in enumerate(report["accuracy"][mode.value]["matrix"]):
            w.writerow([mode.value, i] + ["" if v is None else repr(v) for v in row])
    return buf.getvalue()


def execute(cfg: dict, out_dir: Path) -> dict:
    """Run one resolved config and write its artifacts into ``out_dir`` atomically."""
    stream = _load_data(cfg)
    train = _train_config(cfg)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=".staging-", dir=out_dir.parent))
    try:
        end_hook = None
        if cfg["checkpoints"]:
            ckpt = staging / "checkpoints"
            ckpt.mkdir()

            def end_hook(t, model, buf):
                model.save(ckpt / f"model_task{t}.json")
                if buf is not None:
                    buf.save(ckpt / f"buffer_task{t}.csv")

        _, report = run_stream(stream, train, on_task_end=end_hook)
        # the output location is not part of the experiment's provenance
        report["config"] = {k: v for k, v in cfg.items() if k != "output_dir"}
        (staging / "report.json").write_text(_dumps(report), encoding="utf-8")
        (staging / "accuracy_matrix.csv").write_text(accuracy_csv(report), encoding="utf-8")
        if out_dir.exists():
            shutil.rmtree(out_dir)
        staging.rename(out_dir)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    return report


def _read_json(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def _summary_line(report: dict) -> str:
    parts = []
    for mode in EvalMode:
        v = report["accuracy"][mode.value]["final_average"]
        parts.append(f"{mode.value}={v:.4f}" if v is not None else f"{mode.value}=n/a")
    return " ".join(parts)


def cmd_run(args) -> int:
    raw = _read_json(args.config) if args.config else {}
    raw = apply_overrides(raw, args.set or [])
    if args.seed is not None:
        raw["seed"] = args.seed
        raw.pop("seeds", None)
    if args.output_dir:
        raw["output_dir"] = args.output_dir
    cfg = resolve_config(raw)
    stem = Path(args.config).stem if args.config else "run"
    out_root = Path(cfg["output_dir"]) if cfg["output_dir"] else _default_output_root() / stem
    seeds = cfg["seeds"] or [cfg["seed"]]
    for s in seeds:
        one = dict(cfg, seed=int(s), seeds=None)
        out = out_root if len(seeds) == 1 else out_root / f"seed_{s}"
        report = execute(one, out)
        print(f"seed {s}: {_summary_line(report)} -> {out}")
    return 0


def _cell_name(cell: dict) -> str:
    return "_".join(f"{k}-{cell[k]}" for k in sorted(cell))


def _run_cell(args: tuple) -> tuple[str, int, dict | None, str | None]:
    name, seed, cfg, out = args
    try:
        return name, seed, execute(cfg, Path(out)), None
    except Exception as exc:  # recorded, sweep continues
        return name, seed, None, f"{type(exc).__name__}: {exc}"


def summarize(results: list[tuple[str, int, dict | None, str | None]], cell_names: list[str]) -> list[dict]:
    """Mean and population std of final averages per cell."""
    rows = []
    for name in cell_names:
        ok = [r for n, _, r, _ in results if n == name and r is not None]
        failed = [(s, e) for n, s, r, e in results if n == name and r is None]
        row = {"cell": name, "runs": len(ok), "failures": [f"seed {s}: {e}" for s, e in failed]}
        for mode in EvalMode:
            vals = [r["accuracy"][mode.value]["final_average"] for r in ok]
            vals = [v for v in vals if v is not None]
            row[f"{mode.value}_mean"] = float(np.mean(vals)) if vals else None
            row[f"{mode.value}_std"] = float(np.std(vals)) if vals else None
        rows.append(row)
    return rows


def cmd_ablate(args) -> int:
    sweep = _read_json(args.sweep)
    cells = sweep.get("cells") or []
    if not cells:
        raise ConfigError("sweep has no cells")
    base = dict(sweep.get("base", {}))
    seeds = sweep.get("seeds", [base.get("seed", 0)])
    out_root = Path(args.output_dir or sweep.get("output_dir") or _default_output_root() / Path(args.sweep).stem)
    jobs = []
    names = []
    for cell in cells:
        allowed = {"method", "use_tams", "tam_variant", "buffer_capacity"} | CONFIG_KEYS
        extra = set(cell) - allowed
        if extra:
            raise ConfigError(f"unknown cell keys {sorted(extra)}")
        name = _cell_name(cell)
        names.append(name)
        for s in seeds:
            try:
                cfg = resolve_config({**base, **cell, "seed": s})
            except ConfigError as exc:
                jobs.append((name, s, None, str(exc)))
                continue
            jobs.append((name, s, cfg, str(out_root / name / f"seed_{s}")))
    runnable = [j for j in jobs if j[2] is not None]
    results = [(n, s, None, f"ConfigError: {e}") for n, s, c, e in jobs if c is None]
    n_jobs = args.jobs or sweep.get("jobs", 1)
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results += list(pool.map(_run_cell, runnable))
    else:
        results += [_run_cell(j) for j in runnable]
    rows = summarize(results, names)
    out_root.mkdir(parents=True, exist_ok=True)
    (out_root / "summary.json").write_text(_dumps(rows), encoding="utf-8")
    with open(out_root / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        fields = ["cell", "runs"] + [f"{m.value}_{s}" for m in EvalMode for s in ("mean", "std")]
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for row in rows:
        m, sd = row["class_il_mean"], row["class_il_std"]
        stat = f"{100 * m:.2f} ± {100 * sd:.2f}" if m is not None else "failed"
        print(f"{row['cell']}: class-il {stat} ({row['runs']} runs)")
    return 0


def cmd_gen_data(args) -> int:
    raw = _read_json(args.config) if args.config else {}
    raw = apply_overrides(raw, args.set or [])
    try:
        cfg = SyntheticConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid synthetic config: {exc}") from None
    out = Path(args.out)
    if not out.parent.exists():
        raise OSError(f"output directory {out.parent} does not exist")
    write_stream(generate_synthetic(cfg), out)
    print(f"wrote {out}")
    return 0


def format_report(report: dict) -> str:
    lines = [f"method: {report['config'].get('method')}  seed: {report['seed']}  tasks: {report['n_tasks']}"]
    for mode in EvalMode:
        acc = report["accuracy"][mode.value]
        fa, fm = acc["final_average"], acc["forgetting_mean"]
        lines.append(
            f"  {mode.value:9s} final avg {'n/a' if fa is None else f'{100 * fa:6.2f}%'}"
            f"   forgetting {'n/a' if fm is None else f'{100 * fm:6.2f}%'}"
        )
    if "task_probabilities" in report:
        tp = " ".join(f"{p:.3f}" for p in report["task_probabilities"])
        lines.append(f"  task probabilities: {tp}")
        lines.append(f"  ECE: {report['ece']:.4f}")
    if report.get("routing_accuracy") is not None:
        lines.append(f"  routing accuracy: {report['routing_accuracy']:.4f}")
    p = report["parameters"]
    lines.append(f"  parameters: total {p['total']} (backbone {p['backbone']}, TAMs {sum(p['per_tam'])}, ema {p['ema']})")
    return "\n".join(lines)


def cmd_report(args) -> int:
    report = _read_json(args.path)
    print(format_report(report))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tamilcl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train and evaluate one configuration")
    p.add_argument("--config", help="flat JSON experiment config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="run a sweep of cells over several seeds")
    p.add_argument("sweep", help="sweep JSON: base, seeds, cells")
    p.add_argument("--output-dir")
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gen-data", help="write a synthetic stream as CSV")
    p.add_argument("--config", help="JSON with synthetic-stream keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("report", help="pretty-print a report.json")
    p.add_argument("path")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
