"""Toy end-to-end run: generate data, train both stages, evaluate.

    python3 scripts/run_toy.py --out runs/toy [--config configs/toy.json]
"""

import argparse
import sys
import time
from pathlib import Path

from tpsnet.cli import main

ROOT = Path(__file__).resolve().parents[1]


def run(config: Path, out: Path, seed: int | None) -> int:
    extra = [] if seed is None else ["--seed", str(seed)]
    for cmd in ("gen-toy", "train-prompts", "train", "eval", "plot-embeddings"):
        start = time.perf_counter()
        code = main([cmd, "--config", str(config), "--out", str(out), *extra])
        print(f"[{cmd}] exit {code} in {time.perf_counter() - start:.1f}s")
        if code:
            return code
    return 0


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path, default=ROOT / "configs" / "toy.json")
    p.add_argument("--out", type=Path, default=ROOT / "runs" / "toy")
    p.add_argument("--seed", type=int, default=None)
    args = p.parse_args()
    sys.exit(run(args.config, args.out, args.seed))
