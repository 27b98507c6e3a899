"""Quality metrics, rate accounting, Bjontegaard deltas, and timing."""

import csv
import math
import statistics
import time
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .container import decode_stereo, encode_stereo
from .errors import DimensionError, RangeError

LOSSLESS = math.inf

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MSSSIM_WIN = 11
MSSSIM_SIGMA = 1.5
# 5 scales x 11-tap window: smallest usable input edge
MSSSIM_MIN_DIM = (MSSSIM_WIN - 1) * 2 ** (len(MSSSIM_WEIGHTS) - 1) + 1


def _join(x):
    if isinstance(x, (tuple, list)):
        return torch.cat([t.reshape(-1) for t in x])
    return x.reshape(-1)


def psnr(x, x_hat) -> float:
    """Joint-MSE PSNR in dB over everything passed in (both views when
    given a pair); identical inputs return the lossless sentinel (inf)."""
    a, b = _join(x), _join(x_hat)
    if a.shape != b.shape:
        raise DimensionError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = float(torch.mean((a.double() - b.double()) ** 2))
    if mse == 0.0:
        return LOSSLESS
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel(dtype):
    half = (MSSSIM_WIN - 1) / 2
    t = torch.arange(MSSSIM_WIN, dtype=dtype) - half
    g = torch.exp(-(t * t) / (2 * MSSSIM_SIGMA * MSSSIM_SIGMA))
    return g / g.sum()


def _filter2(x, g):
    # separable valid-mode gaussian blur, per channel
    c = x.shape[1]
    kx = g.view(1, 1, 1, -1).expand(c, 1, 1, -1)
    ky = g.view(1, 1, -1, 1).expand(c, 1, -1, 1)
    return F.conv2d(F.conv2d(x, kx, groups=c), ky, groups=c)


def _ssim_pair(x, y, g, k1=0.01, k2=0.03):
    c1, c2 = k1 * k1, k2 * k2
    mu_x, mu_y = _filter2(x, g), _filter2(y, g)
    sxx = _filter2(x * x, g) - mu_x * mu_x
    syy = _filter2(y * y, g) - mu_y * mu_y
    sxy = _filter2(x * y, g) - mu_x * mu_y
    lum = (2 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    dims = (1, 2, 3)
    return (lum * cs).mean(dims), cs.mean(dims)


def ms_ssim_tensor(x, x_hat):
    """Differentiable 5-scale MS-SSIM, one score per batch entry, computed
    in the input dtype."""
    if x.shape != x_hat.shape:
        raise DimensionError(f"ms_ssim shapes differ: {x.shape} vs {x_hat.shape}")
    if x.dim() != 4:
        raise DimensionError("ms_ssim expects (B,C,H,W)")
    if min(x.shape[-2:]) < MSSSIM_MIN_DIM:
        raise DimensionError(
            f"needs min dim >= {MSSSIM_MIN_DIM} for {len(MSSSIM_WEIGHTS)} scales, "
            f"got {tuple(x.shape[-2:])}")
    g = _gaussian_kernel(x.dtype)
    vals = []
    for i in range(len(MSSSIM_WEIGHTS)):
        ssim_v, cs_v = _ssim_pair(x, x_hat, g)
        if i < len(MSSSIM_WEIGHTS) - 1:
            vals.append(torch.relu(cs_v))
            x = F.avg_pool2d(x, 2)
            x_hat = F.avg_pool2d(x_hat, 2)
        else:
            vals.append(torch.relu(ssim_v))
    score = torch.ones_like(vals[0])
    for v, w in zip(vals, MSSSIM_WEIGHTS):
        score = score * v ** w
    return score


def ms_ssim(x, x_hat) -> float:
    """Standard 5-scale MS-SSIM on (B,C,H,W) tensors in [0,1]; returns the
    batch mean. Pass both stereo views stacked in the batch to score a pair."""
    return float(ms_ssim_tensor(x.double(), x_hat.double()).mean())


def compute_bpp(container, pair=None) -> float:
    """Total file bits over pixels across both views (header included)."""
    h, w = container.orig_h, container.orig_w
    if pair is not None and (pair.height, pair.width) != (h, w):
        raise DimensionError("container does not belong to this pair")
    return 8.0 * container.total_bytes / (2.0 * h * w)


@dataclass(frozen=True)
class RDPoint:
    bpp: float
    quality: float
    label: str = ""
    msssim: float = None

    def __post_init__(self):
        if not self.bpp > 0:
            raise RangeError(f"bpp must be positive, got {self.bpp}")


def _as_curve(points):
    pts = sorted(((p.bpp, p.quality) for p in points))
    rates = [r for r, _ in pts]
    quals = [q for _, q in pts]
    if len(pts) < 2:
        raise RangeError("BD metrics need at least 2 points per curve")
    if any(b - a <= 0 for a, b in zip(rates, rates[1:])):
        raise RangeError("curve must have strictly increasing bpp")
    return np.log10(np.asarray(rates)), np.asarray(quals, dtype=float)


def _avg_integral_diff(x_ref, y_ref, x_test, y_test):
    """Fit y(x) cubically on each curve, integrate both over the shared x
    span, return mean(test - ref)."""
    lo = max(x_ref.min(), x_test.min())
    hi = min(x_ref.max(), x_test.max())
    if not hi > lo:
        raise RangeError("curves do not overlap")
    out = []
    for x, y in ((x_ref, y_ref), (x_test, y_test)):
        deg = min(3, len(x) - 1)
        p = np.polynomial.Polynomial.fit(x, y, deg)
        out.append(p.integ()(hi) - p.integ()(lo))
    return (out[1] - out[0]) / (hi - lo)


def bd_metrics(curve_ref, curve_test):
    """(BD-rate percent, BD quality delta) of test relative to reference."""
    lr_ref, q_ref = _as_curve(curve_ref)
    lr_test, q_test = _as_curve(curve_test)
    # rate delta at equal quality: log-rate as a function of quality
    diff_logr = _avg_integral_diff(q_ref, lr_ref, q_test, lr_test)
    bd_rate = (10.0 ** diff_logr - 1.0) * 100.0
    # quality delta at equal rate
    bd_quality = _avg_integral_diff(lr_ref, q_ref, lr_test, q_test)
    return bd_rate, bd_quality


def emit_rd_curve(points, out_base):
    """Write <out_base>.csv and <out_base>.png for a list of RDPoint."""
    if not points:
        raise ValueError("need at least one point")
    csv_path = f"{out_base}.csv"
    png_path = f"{out_base}.png"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "bpp", "psnr", "msssim"])
        for p in points:
            w.writerow([p.label, repr(p.bpp), repr(p.quality),
                        "" if p.msssim is None else repr(p.msssim)])

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    by_label = {}
    for p in points:
        by_label.setdefault(p.label, []).append(p)
    for label, pts in by_label.items():
        pts = sorted(pts, key=lambda p: p.bpp)
        ax.plot([p.bpp for p in pts], [p.quality for p in pts],
                marker="o", label=label or "curve")
    ax.set_xlabel("bpp")
    ax.set_ylabel("PSNR (dB)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return csv_path, png_path


def read_rd_csv(path):
    points = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            points.append(RDPoint(
                bpp=float(row["bpp"]), quality=float(row["psnr"]),
                label=row["label"],
                msssim=float(row["msssim"]) if row["msssim"] else None))
    return points


def timing_bench(model, pairs, device_info="", warmup=2, coder=None):
    """Mean/std wall time per pair for encode and decode with a per-phase
    split (forward / entropy coding / everything else)."""
    records = {"encode": [], "decode": []}
    phases = {"encode": [], "decode": []}
    for _ in range(warmup):
        s = {}
        cont = encode_stereo(pairs[0], model, coder=coder, stats=s)
        decode_stereo(cont, model, coder=coder, stats={})
    for pair in pairs:
        se, sd = {}, {}
        t0 = time.perf_counter()
        cont = encode_stereo(pair, model, coder=coder, stats=se)
        enc_t = time.perf_counter() - t0
        t0 = time.perf_counter()
        decode_stereo(cont, model, coder=coder, stats=sd)
        dec_t = time.perf_counter() - t0
        records["encode"].append(enc_t)
        records["decode"].append(dec_t)
        phases["encode"].append(se)
        phases["decode"].append(sd)

    def summarize(times, phase_list):
        mean = statistics.fmean(times)
        std = statistics.stdev(times) if len(times) > 1 else 0.0
        ph = {k: statistics.fmean(p[k] for p in phase_list)
              for k in ("forward", "entropy", "io")}
        return {"mean_s": mean, "std_s": std, "phases": ph}

    return {
        "device": device_info,
        "n": len(pairs),
        "warmup": warmup,
        "encode": summarize(records["encode"], phases["encode"]),
        "decode": summarize(records["decode"], phases["decode"]),
    }


def format_timing_report(report):
    lines = [f"timing over {report['n']} pairs (device: {report['device'] or 'cpu'})"]
    for phase in ("encode", "decode"):
        r = report[phase]
        ph = r["phases"]
        lines.append(
            f"  {phase}: {r['mean_s'] * 1e3:8.2f} ms +/- {r['std_s'] * 1e3:6.2f}"
            f"  (forward {ph['forward'] * 1e3:.2f}, entropy {ph['entropy'] * 1e3:.2f},"
            f" io {ph['io'] * 1e3:.2f})")
    return "\n".join(lines)
