"""Prior ablation on the toy domains: {none, +text, +phase, both} over several seeds.

    python3 scripts/run_ablation.py --out runs/ablation --seeds 0 1 2 3 4
"""

import argparse
from pathlib import Path

from tpsnet.config import load_config
from tpsnet.experiments import ABLATION_VARIANTS, run_ablation, toy_datasets
from tpsnet.training import apply_thread_limit

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path, default=ROOT / "configs" / "toy.json")
    p.add_argument("--out", type=Path, default=ROOT / "runs" / "ablation")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--variants", nargs="+", default=list(ABLATION_VARIANTS), choices=list(ABLATION_VARIANTS))
    args = p.parse_args()

    apply_thread_limit()
    config = load_config(args.config)
    args.out.mkdir(parents=True, exist_ok=True)
    result = run_ablation(config, toy_datasets(config), args.seeds, args.variants)
    result.to_csv(args.out / "ablation.csv")
    for v in args.variants:
        print(f"{v:>7}  mean P@1 {result.mean_p1(v):.3f}")
    print(f"wrote {args.out / 'ablation.csv'}")
