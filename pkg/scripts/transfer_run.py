"""In-memory transfer experiment over several seeds; prints mean error per strategy."""
import argparse
import time

import numpy as np

from transferseg.config import RunConfig, load_config
from transferseg.dataset import featurize, simulate_dataset
from transferseg.experiment import transfer_experiment


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config")
    ap.add_argument("--seeds", type=int, nargs="+")
    ap.add_argument("--out", help="write each seed's report below this directory")
    args = ap.parse_args()
    config = load_config(args.config) if args.config else RunConfig()
    seeds = args.seeds or config.seeds
    table = {}
    for seed in seeds:
        t0 = time.perf_counter()
        cfg = config.replace(seed=seed, seeds=[seed])
        records = simulate_dataset(cfg)
        bags = [featurize(r, cfg) for r in records]
        report = transfer_experiment(bags, [r.study for r in records], cfg)
        if args.out:
            report.write(f"{args.out}/seed_{seed}")
        for s in report.strategies:
            table.setdefault(s, []).append(report.mean_error(s))
        print(f"seed {seed}: {time.perf_counter() - t0:.1f}s")
    print(f"{'strategy':<10} " + " ".join(f"{s:>7}" for s in seeds) + "    mean")
    for s, errs in table.items():
        print(f"{s:<10} " + " ".join(f"{e:7.4f}" for e in errs) + f" {np.mean(errs):7.4f}")


if __name__ == "__main__":
    main()
