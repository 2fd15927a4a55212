"""Run the synthetic end-to-end case study and write its output files.

    python scripts/run_case_study.py --out results/case_study
    python scripts/run_case_study.py --days 8 --gamma 0 --out results/short
"""

import argparse
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from vvoreg.experiment import CaseStudyConfig, result_files, run_case_study
from vvoreg.regression import format_table


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="results/case_study")
    p.add_argument("--days", type=int, help="total days, the first validation day included")
    p.add_argument("--gamma", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-buses", type=int, dest="n_buses")
    p.add_argument("--jobs", type=int)
    p.add_argument("--tables", action="store_true", help="print every coefficient table")
    a = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    cfg = CaseStudyConfig()
    overrides = {k: v for k, v in vars(a).items() if k in ("days", "gamma", "seed", "n_buses", "jobs") and v is not None}
    cfg = replace(cfg, **overrides)
    res = run_case_study(cfg)

    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in result_files(res).items():
        (out / name).write_text(text)

    print(f"feeder: {res.model.n_buses} buses, {len(res.model.inverters)} inverters, gamma={cfg.gamma}")
    print(f"steps: {len(res.train)} train, {len(res.validation)} validation")
    print("timings: " + ", ".join(f"{k} {v:.1f}s" for k, v in res.timings.items()))
    J = {k: r.objective for k, r in res.reports.items()}
    if {"none", "constpf", "regression"} <= set(J):
        ordered = np.mean((J["regression"] <= J["constpf"]) & (J["constpf"] <= J["none"]))
        print(f"steps with regression <= constpf <= none: {ordered:.1%}")
    print(f"{'approach':<16}{'gap mean':>10}{'gap p95':>10}{'gap max':>10}{'v min':>9}{'v max':>9}{'sub Q red. kVAr':>20}")
    for name, g in res.gaps.items():
        red = "" if g.sub_q_reduction_kvar is None else "{:.0f}..{:.0f}".format(*g.sub_q_reduction_kvar)
        print(f"{name:<16}{g.mean:>10.2%}{g.p95:>10.2%}{g.max:>10.2%}"
              f"{g.v_envelope[0]:>9.4f}{g.v_envelope[1]:>9.4f}{red:>20}")
    models = res.models if a.tables else res.models[:2]
    for m in models:
        print(format_table(m))
    print(f"files written to {out}")


if __name__ == "__main__":
    main()
