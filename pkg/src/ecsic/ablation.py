"""Variant sweep harness: train a (variant, lambda, seed) grid, measure each
run on a held-out set with real bitstreams, and reduce to BD tables.

Results are cached on disk keyed by a hash of everything that determines the
outcome, so repeated sweeps (and the acceptance suite) reuse finished runs.
"""

import hashlib
import json
import time
from dataclasses import asdict, replace
from pathlib import Path

from .container import decode_stereo, encode_stereo
from .metrics import MSSSIM_MIN_DIM, RDPoint, bd_metrics, compute_bpp, ms_ssim, psnr
from .model import ModelConfig
from .training import TrainConfig, train

CACHE_VERSION = 3
TAIL_RECORDS = 500


def _run_key(model_cfg, train_cfg, data_fingerprint):
    payload = {
        "cache_version": CACHE_VERSION,
        "model": asdict(model_cfg),
        "train": asdict(train_cfg),
        "data": data_fingerprint,
    }
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def dataset_fingerprint(pairs):
    h = hashlib.sha256()
    for p in pairs:
        h.update(p.left.tobytes())
        h.update(p.right.tobytes())
    return h.hexdigest()[:16]


def evaluate_model(model, pairs, coder=None):
    """Mean bpp / PSNR (and MS-SSIM when the pairs are large enough) over
    real encode/decode round trips."""
    import torch

    bpps, psnrs, msssims = [], [], []
    for pair in pairs:
        container = encode_stereo(pair, model, coder=coder)
        bpps.append(compute_bpp(container, pair))
        x_hat_l, x_hat_r = decode_stereo(container, model, coder=coder)
        ref_l = torch.from_numpy(pair.left).unsqueeze(0)
        ref_r = torch.from_numpy(pair.right).unsqueeze(0)
        psnrs.append(psnr((ref_l, ref_r), (x_hat_l.cpu(), x_hat_r.cpu())))
        if min(pair.height, pair.width) >= MSSSIM_MIN_DIM:
            score_l = ms_ssim(ref_l, x_hat_l.cpu())
            score_r = ms_ssim(ref_r, x_hat_r.cpu())
            msssims.append(0.5 * (score_l + score_r))
    out = {
        "bpp": sum(bpps) / len(bpps),
        "psnr": sum(psnrs) / len(psnrs),
        "per_pair_bpp": bpps,
        "per_pair_psnr": psnrs,
    }
    if msssims:
        out["msssim"] = sum(msssims) / len(msssims)
    return out


def _tail_mean(history, key):
    tail = history[-TAIL_RECORDS:] if len(history) > TAIL_RECORDS else history
    return sum(rec[key] for rec in tail) / len(tail)


def rd_point(model_cfg: ModelConfig, train_cfg: TrainConfig, train_pairs,
             eval_pairs, cache_dir=None, device="cpu", quiet=True, log=None):
    """Train one run and evaluate it; returns a flat result dict.

    With cache_dir set, a completed run is loaded from disk instead of
    retrained. The cache key covers model config, train config, and a
    fingerprint of both datasets.
    """
    fp = {"train": dataset_fingerprint(train_pairs),
          "eval": dataset_fingerprint(eval_pairs)}
    key = _run_key(model_cfg, train_cfg, fp)
    cache_file = None
    if cache_dir is not None:
        cache_file = Path(cache_dir) / f"{key}.json"
        if cache_file.exists():
            with open(cache_file) as fh:
                return json.load(fh)

    t0 = time.monotonic()
    model, history = train(model_cfg, train_cfg, train_pairs,
                           device=device, quiet=quiet)
    train_s = time.monotonic() - t0
    result = {
        "key": key,
        "variant": model_cfg.variant,
        "lambda": train_cfg.lambda_,
        "seed": train_cfg.seed,
        "steps": train_cfg.steps,
        "train_seconds": round(train_s, 3),
        "final_rate_bpp": _tail_mean(history, "rate_bpp"),
        "final_distortion": _tail_mean(history, "distortion"),
        "final_total": _tail_mean(history, "total"),
    }
    t1 = time.monotonic()
    result.update(evaluate_model(model, eval_pairs))
    result["eval_seconds"] = round(time.monotonic() - t1, 3)
    if cache_file is not None:
        cache_file.parent.mkdir(parents=True, exist_ok=True)
        tmp = cache_file.with_suffix(".tmp")
        with open(tmp, "w") as fh:
            json.dump(result, fh, indent=1)
        tmp.replace(cache_file)
    if log is not None:
        log(f"{model_cfg.variant} lambda={train_cfg.lambda_} seed={train_cfg.seed}: "
            f"bpp {result['bpp']:.4f} psnr {result['psnr']:.2f} "
            f"({train_s:.0f}s)")
    return result


def run_grid(variants, lambdas, seeds, base_model_cfg: ModelConfig,
             base_train_cfg: TrainConfig, train_pairs, eval_pairs,
             cache_dir=None, device="cpu", log=None):
    """All (variant, lambda, seed) combinations, cached individually."""
    rows = []
    for variant in variants:
        m_cfg = replace(base_model_cfg, variant=variant)
        for lam in lambdas:
            for seed in seeds:
                t_cfg = replace(base_train_cfg, variant=variant,
                                lambda_=lam, seed=seed)
                rows.append(rd_point(m_cfg, t_cfg, train_pairs, eval_pairs,
                                     cache_dir=cache_dir, device=device,
                                     log=log))
    return rows


def curve(rows, variant, seed, quality="psnr"):
    """One seed's RD curve for a variant, sorted by lambda."""
    pts = [r for r in rows if r["variant"] == variant and r["seed"] == seed]
    pts.sort(key=lambda r: r["lambda"])
    return [RDPoint(bpp=r["bpp"], quality=r[quality], label=variant) for r in pts]


def seed_bd(rows, variant, reference, seed):
    """BD-rate percent and BD-quality of `variant` against `reference` for
    one training seed."""
    return bd_metrics(curve(rows, reference, seed), curve(rows, variant, seed))


def mean_bd(rows, variant, reference, seeds):
    per_seed = [seed_bd(rows, variant, reference, s) for s in seeds]
    rate = sum(p[0] for p in per_seed) / len(per_seed)
    qual = sum(p[1] for p in per_seed) / len(per_seed)
    return rate, qual, per_seed


def bd_table(rows, variants, seeds, reference="baseline"):
    """Per-variant mean bpp/PSNR plus BD deltas against the reference."""
    out = []
    for variant in variants:
        vrows = [r for r in rows if r["variant"] == variant]
        entry = {
            "variant": variant,
            "runs": len(vrows),
            "mean_bpp": sum(r["bpp"] for r in vrows) / len(vrows),
            "mean_psnr": sum(r["psnr"] for r in vrows) / len(vrows),
        }
        if variant == reference:
            entry["bd_rate_percent"] = 0.0
            entry["bd_psnr"] = 0.0
        else:
            rate, qual, _ = mean_bd(rows, variant, reference, seeds)
            entry["bd_rate_percent"] = rate
            entry["bd_psnr"] = qual
        out.append(entry)
    return out


def format_bd_table(entries, reference="baseline"):
    header = f"{'variant':<16}{'runs':>5}{'bpp':>9}{'psnr':>8}{'bd-rate%':>10}{'bd-psnr':>9}"
    lines = [header, "-" * len(header)]
    for e in entries:
        mark = " (ref)" if e["variant"] == reference else ""
        lines.append(
            f"{e['variant'] + mark:<16}{e['runs']:>5}{e['mean_bpp']:>9.4f}"
            f"{e['mean_psnr']:>8.2f}{e['bd_rate_percent']:>10.2f}{e['bd_psnr']:>9.3f}")
    return "\n".join(lines)


def lambda_monotonicity(rows, lambdas, seeds, variant="full"):
    """Seed-averaged (rate, distortion) per lambda from the training tail.
    Returns (list of (lambda, rate, distortion), rate_nondecreasing,
    distortion_nonincreasing)."""
    table = []
    for lam in sorted(lambdas):
        sel = [r for r in rows
               if r["variant"] == variant and r["lambda"] == lam
               and r["seed"] in seeds]
        if not sel:
            raise ValueError(f"no runs for lambda={lam}")
        rate = sum(r["final_rate_bpp"] for r in sel) / len(sel)
        dist = sum(r["final_distortion"] for r in sel) / len(sel)
        table.append((lam, rate, dist))
    rate_ok = all(b[1] >= a[1] for a, b in zip(table, table[1:]))
    dist_ok = all(b[2] <= a[2] for a, b in zip(table, table[1:]))
    return table, rate_ok, dist_ok
