"""Materialise the three-regime benchmark suite under data/benchmark/.

Terminal, distributed and sparse regimes share one quality direction;
each contributes 2000 training and 500 test pairs at d=32, generated from
the `benchmark` profile's synthetic section. Run it like:

    python seed.py [--out data/benchmark] [--seed 0]
"""

import json
import logging
from dataclasses import asdict, replace
from pathlib import Path

import click

from config import resolve_config
from data import split_pairs, write_embeddings, write_pairs
from generator.helpers import REGIMES
from generator.synthetic import generate_suite

logger = logging.getLogger(__name__)

TRAIN_PAIRS = 2000
TEST_PAIRS = 500
D = 32


def benchmark_specs(seed=0, d=D, train_pairs=TRAIN_PAIRS, test_pairs=TEST_PAIRS):
    base = resolve_config(profile="benchmark").synthetic
    return [replace(base, regime=regime, d=d, n_pairs=train_pairs + test_pairs, seed=seed,
                    direction_seed=seed)
            for regime in REGIMES]


def materialise(out_dir, seed=0, d=D, train_pairs=TRAIN_PAIRS, test_pairs=TEST_PAIRS):
    """Write embeddings.adje, train.jsonl, test.jsonl and provenance.json."""

    specs = benchmark_specs(seed, d, train_pairs, test_pairs)
    store, pairs = generate_suite(specs)
    train, test = split_pairs(pairs, test_pairs)
    out = Path(out_dir)
    write_embeddings(out / "embeddings.adje", store)
    write_pairs(out / "train.jsonl", train)
    write_pairs(out / "test.jsonl", test)
    with open(out / "provenance.json", "w") as f:
        json.dump({"seed": seed, "test_pairs": test_pairs,
                   "specs": [asdict(spec) for spec in specs]}, f, indent=2)
        f.write("\n")
    logger.info("benchmark: %d train / %d test pairs in %s", len(train), len(test), out)
    return out


@click.command()
@click.option("--out", default="data/benchmark", show_default=True)
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
def main(out, seed):
    logging.basicConfig(level=logging.INFO)
    materialise(out, seed)


if __name__ == "__main__":
    main()
