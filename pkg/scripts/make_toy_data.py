"""Regenerate the bundled 200 x 500 toy dataset under data/toy/."""

import argparse
from pathlib import Path

from pqlgei.cli import main

ROOT = Path(__file__).resolve().parents[1]


def run(out: Path, seed: int) -> int:
    out.parent.mkdir(parents=True, exist_ok=True)
    return main(["simulate", "--write-data", "--n", "200", "--p", "500", "--n-causal", "10", "--n-gei", "5",
                 "--h2-s", "0.4", "--h2-sp", "0.4", "--h2-g", "0.1", "--h2-d", "0.0", "--seed", str(seed),
                 "--out", str(out)])


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(ROOT / "data" / "toy" / "toy"))
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    raise SystemExit(run(Path(args.out), args.seed))
