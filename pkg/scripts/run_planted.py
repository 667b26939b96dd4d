"""Run the desk-scale planted-truth pipeline and print the recovery checks.

    python3 scripts/run_planted.py [--out runs/planted] [--config configs/planted.toml]
"""

import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np

from invabc.config import load_config
from invabc.csvio import read_matrix
from invabc.pipeline import read_final_posterior, run_all

ROOT = Path(__file__).resolve().parent.parent


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", default=str(ROOT / "configs" / "planted.toml"))
    parser.add_argument("--out", default="runs/planted")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    cfg = load_config(args.config)
    out = Path(args.out)
    start = time.perf_counter()
    code = run_all(cfg, out)
    print(f"exit code {code}, {time.perf_counter() - start:.0f}s")
    if code:
        return code

    result = json.loads((out / "validate/result.json").read_text())
    print(f"validation mean SSIM {result['mean_ssim']:.4f} after {result['augment_rounds']} augmentation round(s)")
    theta, w = read_final_posterior(out / "infer/posterior.csv", cfg.space.names)
    mean = w @ theta
    std = np.sqrt(w @ (theta - mean) ** 2)
    for name, m, s, t in zip(cfg.space.names, mean, std, cfg.theta_star):
        print(f"{name:<16} mean {m:8.4f}  std {s:8.4f}  planted {t:8.4f}  |z| {abs(m - t) / s:5.2f}")
    header, rows = read_matrix(out / "report/defects.csv", skip_cols=1)
    draws = rows[:-1]
    frac = draws[:, header.index("crack_region") - 1] / draws[:, header.index("region_elements") - 1]
    print(f"median crack fraction over {len(draws)} posterior draws: {np.median(frac):.4f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
