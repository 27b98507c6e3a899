"""Desk-scale sweep protocol shared by the acceptance suite and the
background driver that fills its cache.

The grid is every (variant, lambda, seed) combination the acceptance checks
consume. Running this file trains whatever is missing from the cache, one
run at a time, so an interrupted sweep resumes where it stopped:

    python3 tests/sweep_protocol.py [--limit K]
"""

import argparse
import time
from pathlib import Path

from ecsic.ablation import _run_key, dataset_fingerprint, rd_point
from ecsic.data import synth_stereo_dataset
from ecsic.model import ModelConfig
from ecsic.training import TrainConfig

CACHE_DIR = Path(__file__).resolve().parent / "acceptance_cache"

MODEL = dict(N=32, M=8, heads=4, embed_dim=32)
TRAIN = dict(steps=20000, crop_h=32, crop_w=64, batch_size=1)
SEEDS = (0, 1, 2)
LAMBDA_PAIR = (0.002, 0.01)
LAMBDA_GRID = (0.0005, 0.002, 0.01, 0.05)
TRAIN_DATA = dict(seed=7, count=32, H=64, W=128, max_disparity=8, noise=0.01)
EVAL_DATA = dict(seed=9999, count=8, H=64, W=128, max_disparity=8, noise=0.01)

DOMINANCE_VARIANTS = ("full", "baseline", "no_context")
SITE_VARIANTS = ("enc_sca_only", "dec_sca_only")

# Ordered so the headline comparison finishes first.
GRID = (
    [(v, lam, s) for v in DOMINANCE_VARIANTS for lam in LAMBDA_PAIR for s in SEEDS]
    + [(v, lam, s) for v in SITE_VARIANTS for lam in LAMBDA_PAIR for s in SEEDS]
    + [("full", lam, s) for lam in (0.0005, 0.05) for s in SEEDS]
)


def datasets():
    return (synth_stereo_dataset(**TRAIN_DATA), synth_stereo_dataset(**EVAL_DATA))


def model_cfg(variant):
    return ModelConfig(variant=variant, **MODEL)


def train_cfg(variant, lam, seed):
    return TrainConfig(variant=variant, lambda_=lam, seed=seed, **TRAIN)


def grid_keys(train_pairs, eval_pairs):
    fp = {"train": dataset_fingerprint(train_pairs),
          "eval": dataset_fingerprint(eval_pairs)}
    return {(v, lam, s): _run_key(model_cfg(v), train_cfg(v, lam, s), fp)
            for (v, lam, s) in GRID}


def missing_entries(train_pairs, eval_pairs):
    keys = grid_keys(train_pairs, eval_pairs)
    return [(entry, key) for entry, key in keys.items()
            if not (CACHE_DIR / f"{key}.json").exists()]


def load_rows(train_pairs, eval_pairs, subset=None):
    """Cached results for the grid (or a subset of it); None if incomplete."""
    import json

    keys = grid_keys(train_pairs, eval_pairs)
    rows = []
    for entry, key in keys.items():
        if subset is not None and entry not in subset:
            continue
        path = CACHE_DIR / f"{key}.json"
        if not path.exists():
            return None
        with open(path) as fh:
            rows.append(json.load(fh))
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--limit", type=int, default=0,
                    help="stop after this many new runs (0 = all)")
    args = ap.parse_args(argv)

    train_pairs, eval_pairs = datasets()
    todo = missing_entries(train_pairs, eval_pairs)
    total = len(GRID)
    print(f"sweep: {total - len(todo)}/{total} cached, {len(todo)} to run",
          flush=True)
    started = time.monotonic()
    for i, ((variant, lam, seed), _) in enumerate(todo, 1):
        if args.limit and i > args.limit:
            break
        t0 = time.monotonic()
        row = rd_point(model_cfg(variant), train_cfg(variant, lam, seed),
                       train_pairs, eval_pairs, cache_dir=CACHE_DIR)
        print(f"[{i}/{len(todo)}] {variant} lambda={lam} seed={seed}: "
              f"bpp {row['bpp']:.4f} psnr {row['psnr']:.2f} "
              f"({time.monotonic() - t0:.0f}s, total {(time.monotonic() - started) / 60:.1f}m)",
              flush=True)
    print("sweep driver done", flush=True)


if __name__ == "__main__":
    main()
