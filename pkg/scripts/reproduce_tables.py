"""Run the ablation grids on the desk-scale config and print directional verdicts.

    python scripts/reproduce_tables.py --seeds 0 1 2 3 4 --presets table3 table4 table5

Tables land in $M3L_OUTPUT_ROOT (default: runs/) as <preset>.csv; every row
lists the run directories it aggregates.
"""

import argparse
import logging
from pathlib import Path

from m3l.cli import format_table, output_root, preset_grid, run_ablation_grid
from m3l.config import load_config

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.yaml"


def verdicts(preset: str, table: list[dict]) -> list[str]:
    rows = {r["row"]: r for r in table}
    if preset == "table3":
        b, m, f = (rows[k]["mAP"] for k in ("baseline", "meta", "meta+metabn"))
        p = rows["meta"]["p_paired"]
        return [f"meta+metabn >= meta >= baseline: {f >= m >= b}", f"meta - baseline = {m - b:+.4f} (two-sided p={p})"]
    if preset == "table4":
        gains = {c: rows[f"{c}/meta"]["delta_mAP"] for c in ("fc_global", "fc_parallel", "memory")}
        return [f"meta gain {c}: {g:+.4f}" for c, g in gains.items()] + [
            f"memory gain > fc_global gain: {gains['memory'] > gains['fc_global']}"
        ]
    if preset == "table5":
        full = table[0]
        return [f"{full['row']} beats {r['row']}: {full['mAP'] > r['mAP']}" for r in table[1:]]
    return []


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", default=str(DESK))
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--presets", nargs="+", default=["table3", "table4", "table5"])
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    base = load_config(args.config)
    for preset in args.presets:
        table = run_ablation_grid(preset_grid(preset, base, args.seeds), output_root(base) / f"{preset}.csv")
        print(f"\n== {preset} ==")
        print(format_table(table))
        for line in verdicts(preset, table):
            print("  " + line)


if __name__ == "__main__":
    main()
