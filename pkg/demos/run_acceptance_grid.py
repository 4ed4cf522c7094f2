"""Train every run the slow acceptance criteria read, filling their cache.

Usage::

    python3 demos/run_acceptance_grid.py            # all five seeds
    python3 demos/run_acceptance_grid.py 0 1         # just seeds 0 and 1

Seeds are independent, so several copies of this script can run side by side
on different seeds. Settings come from ``tests/test_acceptance.py`` so the test
always finds exactly what was trained here.
"""

import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

from test_acceptance import EXPERIMENT  # noqa: E402

from progkd import ablation  # noqa: E402


def main(argv: list[str]) -> None:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    seeds = tuple(int(s) for s in argv) or EXPERIMENT.seeds
    cfg = replace(EXPERIMENT, seeds=seeds)
    experiments: dict = {}
    for grid in ("teachers", "strategies", "fft-layers"):
        for row in ablation.run_grid(grid, cfg, experiments=experiments):
            print(json.dumps(row), flush=True)
        print(f"{grid}: {ablation.grid_seconds(grid, cfg, experiments) / 60:.1f} min of training", flush=True)


if __name__ == "__main__":
    main(sys.argv[1:])
