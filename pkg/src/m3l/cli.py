"""Command-line experiment runner.

Subcommands::

    m3l generate-data   write the synthetic domains of a config to a text table
    m3l train           train one config, write metrics.jsonl / result.json / checkpoint.npz
    m3l evaluate        re-evaluate a checkpoint on its held-out domain
    m3l grid            run a preset ablation grid over seeds, write a CSV table
    m3l plot            loss / metric curves for one or two runs

Every config key is also a flag (``--train.mode meta``, ``--data.shift 0.8``);
values are parsed as YAML. ``M3L_OUTPUT_ROOT`` overrides ``output_dir``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import itertools
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml
from scipy import stats

from . import synthdata
from .checkpoint import load_checkpoint
from .config import ConfigError, ExperimentConfig, from_dict, load_config
from .encoder import Encoder
from .evalkit import RetrievalSplit, evaluate
from .trainer import build_data, make_streams, train

log = logging.getLogger("m3l")

OUTPUT_ROOT_ENV = "M3L_OUTPUT_ROOT"
PRESETS = ("table3", "table4", "table5", "appendix-b", "lodo")


def output_root(config: ExperimentConfig) -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV) or config.output_dir)


def run_dir(config: ExperimentConfig) -> Path:
    return output_root(config) / f"{config.name}-{config.digest()}"


def run_experiment(config: ExperimentConfig, out_dir: str | Path | None = None) -> dict:
    """Train and evaluate one config; returns the final record plus its run directory."""
    config.validate()
    out = Path(out_dir) if out_dir is not None else run_dir(config)
    _, history = train(config, out_dir=out)
    return {**history[-1], "run_dir": str(out), "digest": config.digest(), "seed": config.seed}


# --------------------------------------------------------------------------- grids


@dataclass
class GridRow:
    name: str
    configs: list[ExperimentConfig]
    reference: str | None = None  # row the deltas are taken against


def check_seeds(rows: Sequence[GridRow]) -> list[int]:
    seed_sets = []
    for row in rows:
        seeds = [c.seed for c in row.configs]
        if not seeds:
            raise ConfigError(f"grid row {row.name!r} has no configs")
        if len(set(seeds)) != len(seeds):
            raise ConfigError(f"grid row {row.name!r} repeats a seed: {seeds}")
        seed_sets.append(sorted(seeds))
    if any(s != seed_sets[0] for s in seed_sets):
        raise ConfigError(f"grid rows use mismatched seeds: {dict(zip((r.name for r in rows), seed_sets))}")
    return seed_sets[0]


def run_ablation_grid(rows: Sequence[GridRow], table_path: str | Path | None = None, dry_run: bool = False) -> list[dict]:
    """Run every (row, seed) config and aggregate one table row per grid row.

    Rows must cover the same seeds so deltas can be paired seed by seed.
    Each row lists the run directories its numbers come from.
    """
    seeds = check_seeds(rows)
    names = [r.name for r in rows]
    if len(set(names)) != len(names):
        raise ConfigError("grid row names must be unique")
    for row in rows:
        if row.reference is not None and row.reference not in names:
            raise ConfigError(f"row {row.name!r} references unknown row {row.reference!r}")
        for c in row.configs:
            c.validate()
    if dry_run:
        for row in rows:
            print(f"{row.name}: {len(row.configs)} runs, digests {[c.digest() for c in row.configs]}")
        return []

    per_row: dict[str, dict[int, dict]] = {}
    for row in rows:
        per_row[row.name] = {}
        for c in sorted(row.configs, key=lambda c: c.seed):
            rec = run_experiment(c)
            log.info("%s seed=%d mAP=%.4f rank1=%.4f", row.name, c.seed, rec["mAP"], rec["rank1"])
            per_row[row.name][c.seed] = rec

    table = []
    for row in rows:
        recs = per_row[row.name]
        m_ap = np.array([recs[s]["mAP"] for s in seeds])
        r1 = np.array([recs[s]["rank1"] for s in seeds])
        entry = {
            "row": row.name,
            "n_seeds": len(seeds),
            "mAP": float(m_ap.mean()),
            "mAP_std": float(m_ap.std(ddof=1)) if len(seeds) > 1 else 0.0,
            "rank1": float(r1.mean()),
            "reference": row.reference or "",
            "delta_mAP": "",
            "delta_rank1": "",
            "p_paired": "",
            "runs": ";".join(recs[s]["run_dir"] for s in seeds),
        }
        if row.reference:
            ref = per_row[row.reference]
            ref_map = np.array([ref[s]["mAP"] for s in seeds])
            entry["delta_mAP"] = float((m_ap - ref_map).mean())
            entry["delta_rank1"] = float((r1 - np.array([ref[s]["rank1"] for s in seeds])).mean())
            if len(seeds) > 1 and np.any(m_ap != ref_map):
                entry["p_paired"] = float(stats.ttest_rel(m_ap, ref_map).pvalue)
        table.append(entry)
    if table_path is not None:
        write_table(table, table_path)
    return table


def write_table(table: list[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(table[0]))
        writer.writeheader()
        writer.writerows(table)
    return path


def format_table(table: list[dict]) -> str:
    lines = [f"{'row':<28}{'mAP':>8}{'R1':>8}{'dmAP':>9}{'p':>8}"]
    for e in table:
        d = f"{e['delta_mAP']:+.4f}" if e["delta_mAP"] != "" else ""
        p = f"{e['p_paired']:.3f}" if e["p_paired"] != "" else ""
        lines.append(f"{e['row']:<28}{e['mAP']:>8.4f}{e['rank1']:>8.4f}{d:>9}{p:>8}")
    return "\n".join(lines)


def _row(base: ExperimentConfig, seeds, name: str, reference: str | None = None, **overrides) -> GridRow:
    configs = [base.replace(seed=s, name=name.replace("/", "_"), **overrides) for s in seeds]
    return GridRow(name, configs, reference)


def preset_grid(preset: str, base: ExperimentConfig, seeds: Sequence[int]) -> list[GridRow]:
    m, c = "train.mode", "train.classifier"
    if preset == "table3":
        return [
            _row(base, seeds, "baseline", None, **{m: "baseline"}),
            _row(base, seeds, "meta", "baseline", **{m: "meta"}),
            _row(base, seeds, "meta+metabn", "baseline", **{m: "meta+metabn"}),
        ]
    if preset == "table4":
        rows = []
        for clf in ("fc_global", "fc_parallel", "memory"):
            rows.append(_row(base, seeds, f"{clf}/baseline", None, **{m: "baseline", c: clf}))
            rows.append(_row(base, seeds, f"{clf}/meta", f"{clf}/baseline", **{m: "meta", c: clf}))
        return rows
    if preset == "table5":
        everything = [d for d in range(base.data.n_domains) if d != base.held_out]
        full = "+".join(map(str, everything))
        rows = [_row(base, seeds, f"sources={full}", None, source_domains=everything)]
        for subset in itertools.combinations(everything, len(everything) - 1):
            name = "sources=" + "+".join(map(str, subset))
            rows.append(_row(base, seeds, name, f"sources={full}", source_domains=list(subset)))
        return rows
    if preset == "appendix-b":
        rows = []
        for ids in (16, 32, 50):
            for clf in ("fc_global", "fc_parallel", "memory"):
                rows.append(_row(base, seeds, f"ids={ids}/{clf}", None, **{"data.ids_per_domain": ids, c: clf}))
        return rows
    if preset == "lodo":
        rows = []
        for target in range(base.data.n_domains):
            rows.append(_row(base, seeds, f"target={target}/baseline", None, held_out=target, **{m: "baseline"}))
            rows.append(_row(base, seeds, f"target={target}/{base.train.mode}", f"target={target}/baseline", held_out=target))
        return rows
    raise ConfigError(f"unknown preset {preset!r}; choose from {PRESETS}")


# --------------------------------------------------------------------------- plots


def read_history(path: str | Path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / "metrics.jsonl"
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def plot_metrics(runs: Sequence[tuple[str, str, list[dict]]], out_dir: str | Path) -> list[Path]:
    """Write loss curves and, when any run has evaluations, metric curves.

    ``runs`` holds ``(label, config_digest, history)`` triples; two or more
    runs are overlaid on the same axes. File names derive from the digests,
    so the same runs always map to the same files.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not runs or not any(h for _, _, h in runs):
        raise ValueError("nothing to plot: empty history")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    key = runs[0][1] if len(runs) == 1 else hashlib.sha1("+".join(d for _, d, _ in runs).encode()).hexdigest()[:10]
    written = []

    fig, ax = plt.subplots(figsize=(6, 4))
    for label, _, hist in runs:
        it = [r for r in hist if r.get("type") == "iter"]
        x = [r["iteration"] for r in it]
        ax.plot(x, [r["L_mtr"] for r in it], label=f"{label} L_mtr", lw=0.8)
        if it and "L_mte" in it[0]:
            ax.plot(x, [r["L_mte"] for r in it], label=f"{label} L_mte", lw=0.8, ls="--")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = out_dir / f"loss-{key}.png"
    fig.savefig(path, dpi=100)
    plt.close(fig)
    written.append(path)

    if any(r.get("type") == "eval" for _, _, h in runs for r in h):
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, _, hist in runs:
            ev = [r for r in hist if r.get("type") == "eval"]
            ax.plot([r["epoch"] for r in ev], [r["mAP"] for r in ev], marker=".", label=f"{label} mAP")
            ax.plot([r["epoch"] for r in ev], [r["rank1"] for r in ev], marker=".", ls=":", label=f"{label} Rank-1")
        ax.set_xlabel("epoch")
        ax.set_ylabel("held-out score")
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / f"eval-{key}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)
    return written


# --------------------------------------------------------------------------- argument parsing


def _config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("config keys (values parsed as YAML)")
    default = ExperimentConfig()
    for f in dataclasses.fields(default):
        value = getattr(default, f.name)
        if dataclasses.is_dataclass(value):
            for sub in dataclasses.fields(value):
                key = f"{f.name}.{sub.name}"
                group.add_argument(f"--{key}", dest=key, type=yaml.safe_load, default=argparse.SUPPRESS, metavar="V")
        else:
            group.add_argument(f"--{f.name}", dest=f.name, type=yaml.safe_load, default=argparse.SUPPRESS, metavar="V")


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    base = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {k: v for k, v in vars(args).items() if k in _config_keys()}
    return base.replace(**overrides)


def _config_keys() -> set[str]:
    keys = set()
    default = ExperimentConfig()
    for f in dataclasses.fields(default):
        value = getattr(default, f.name)
        if dataclasses.is_dataclass(value):
            keys.update(f"{f.name}.{s.name}" for s in dataclasses.fields(value))
        else:
            keys.add(f.name)
    return keys


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="m3l", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--dry-run", action="store_true", help="validate and print the resolved plan, then exit")
        _config_flags(p)
        return p

    p = with_config(sub.add_parser("generate-data", help="write synthetic domains to a text table"))
    p.add_argument("--out", help="output file (default: <run dir>/domains.txt)")

    with_config(sub.add_parser("train", help="train one config"))

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on its held-out domain")
    p.add_argument("checkpoint")

    p = with_config(sub.add_parser("grid", help="run a preset ablation grid"))
    p.add_argument("--preset", choices=PRESETS, required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--table", help="CSV output path (default: <output root>/<preset>.csv)")

    p = sub.add_parser("plot", help="plot one run, or overlay several")
    p.add_argument("runs", nargs="+", help="run directories or metrics.jsonl files")
    p.add_argument("--out", help="output directory (default: first run directory)")
    return parser


def _cmd_generate(args) -> int:
    cfg = resolve_config(args).validate()
    out = Path(args.out) if args.out else run_dir(cfg) / "domains.txt"
    if args.dry_run:
        print(f"would write {cfg.data.n_domains} domains x {cfg.data.ids_per_domain} ids to {out}")
        return 0
    data = build_data(cfg, make_streams(cfg.seed))
    domains = sorted([*data.sources, data.heldout], key=lambda d: d.domain_id)
    out.parent.mkdir(parents=True, exist_ok=True)
    synthdata.save_domains(domains, out)
    print(out)
    return 0


def _cmd_train(args) -> int:
    cfg = resolve_config(args).validate()
    if args.dry_run:
        print(yaml.safe_dump(json.loads(json.dumps(cfg.to_dict())), sort_keys=False).rstrip())
        print(f"run dir: {run_dir(cfg)}")
        return 0
    rec = run_experiment(cfg)
    print(json.dumps(rec))
    return 0


def _cmd_evaluate(args) -> int:
    params, _, manifest = load_checkpoint(args.checkpoint)
    cfg = from_dict(manifest["config"])
    data = build_data(cfg, make_streams(cfg.seed))
    enc = Encoder(cfg.encoder)
    qx, qy, gx, gy = data.split
    rec = evaluate(RetrievalSplit(enc.embed(params, qx).numpy(), qy, enc.embed(params, gx).numpy(), gy))
    print(json.dumps({"checkpoint": str(args.checkpoint), **rec}))
    return 0


def _cmd_grid(args) -> int:
    base = resolve_config(args)
    rows = preset_grid(args.preset, base, args.seeds)
    table_path = Path(args.table) if args.table else output_root(base) / f"{args.preset}.csv"
    table = run_ablation_grid(rows, table_path, dry_run=args.dry_run)
    if table:
        print(format_table(table))
        print(table_path)
    return 0


def _cmd_plot(args) -> int:
    runs = []
    for r in args.runs:
        hist = read_history(r)
        run_path = Path(r) if Path(r).is_dir() else Path(r).parent
        result = run_path / "result.json"
        digest = json.loads(result.read_text())["digest"] if result.exists() else run_path.name
        runs.append((run_path.name, digest, hist))
    out = Path(args.out) if args.out else Path(args.runs[0] if Path(args.runs[0]).is_dir() else Path(args.runs[0]).parent)
    for path in plot_metrics(runs, out):
        print(path)
    return 0


COMMANDS = {
    "generate-data": _cmd_generate,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "grid": _cmd_grid,
    "plot": _cmd_plot,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
