"""Train every stage on in-memory synthetic data and compare both modes.

Prints the reproducible metric JSON; wall-clock timings go to stderr.

    python scripts/run_desk_experiment.py --seed 0 --out desk_metrics.json
"""

import argparse
import json
import sys

from cogdet.experiment import DeskConfig, metrics_json, run_desk_experiment


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default=None, help="also write the metric JSON here")
    args = parser.parse_args()
    result = run_desk_experiment(DeskConfig(seed=args.seed))
    text = metrics_json(result)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(json.dumps({k: round(v, 2) for k, v in result["timing"].items()}), file=sys.stderr)


if __name__ == "__main__":
    main()
