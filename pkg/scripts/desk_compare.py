"""Desk-scale comparison of INTER, NW GAUSS, CART, SPARSE and NW.

    python3 scripts/desk_compare.py --out results/desk
    python3 scripts/desk_compare.py --modes cart --iterations 5   # quick look
"""

import argparse
import logging
from pathlib import Path

from threadpoolctl import threadpool_limits

from nwsr import experiment, iqa


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--out", default="results/desk")
    p.add_argument("--modes", nargs="+", default=["cart", "sparse", "nw"], choices=["cart", "sparse", "nw"])
    p.add_argument("--iterations", type=int, help="override PBT iterations (must be a multiple of the interval)")
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")

    cfg = experiment.DeskConfig()
    if args.iterations:
        cfg.run.iterations = args.iterations
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with threadpool_limits(args.threads):
        reports, results = experiment.desk_compare(cfg, args.modes)
    for name, rep in reports.items():
        iqa.write_report_csv(out / f"{name.lower().replace(' ', '_')}.csv", rep)
    for name, res in results.items():
        experiment.write_history_csv(out / f"history_{name.lower()}.csv", res.history)
    experiment.write_table_csv(out / "table.csv", reports)
    (out / "config.txt").write_text(cfg.run.to_text())
    print(experiment.format_table(reports))


if __name__ == "__main__":
    main()
