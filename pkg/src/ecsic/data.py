"""Rectified stereo pairs: loading, cropping, synthesis, and batching.

Images live as float arrays in [0,1], shape (3, H, W). Both views of a pair
always receive identical geometric transforms so row correspondence survives
every operation here.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import CropError, DimensionError


@dataclass
class StereoPair:
    left: np.ndarray  # (3, H, W) float32 in [0,1]
    right: np.ndarray
    id: str

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise DimensionError(f"views differ: {self.left.shape} vs {self.right.shape}")

    @property
    def height(self):
        return self.left.shape[1]

    @property
    def width(self):
        return self.left.shape[2]


@dataclass
class CropSpec:
    top: int = 0
    bottom: int = 0
    left_px: int = 0
    right_px: int = 0
    align: int = 1


def load_stereo_pair(path_left, path_right) -> StereoPair:
    """Load two 8-bit RGB files into a [0,1] float pair."""

    def read(p):
        with Image.open(p) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        return arr.transpose(2, 0, 1)

    left = read(path_left)
    right = read(path_right)
    if left.shape != right.shape:
        raise DimensionError(f"left {left.shape} vs right {right.shape}")
    return StereoPair(left, right, id=Path(path_left).stem)


def save_image(arr, path):
    """Write a (3,H,W) [0,1] array as 8-bit RGB PNG."""
    u8 = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8.transpose(1, 2, 0)).save(path)


def apply_dataset_crop(pair: StereoPair, spec: CropSpec) -> StereoPair:
    """Fixed border crop, then center-crop both dims to a multiple of align."""
    _, H, W = pair.left.shape
    h = H - spec.top - spec.bottom
    w = W - spec.left_px - spec.right_px
    if h <= 0 or w <= 0:
        raise CropError(f"crop leaves {h}x{w}")
    top, lft = spec.top, spec.left_px
    if spec.align > 1:
        ah = (h // spec.align) * spec.align
        aw = (w // spec.align) * spec.align
        if ah == 0 or aw == 0:
            raise CropError(f"alignment {spec.align} leaves {ah}x{aw}")
        top += (h - ah) // 2
        lft += (w - aw) // 2
        h, w = ah, aw
    sl = np.s_[:, top : top + h, lft : lft + w]
    return StereoPair(pair.left[sl].copy(), pair.right[sl].copy(), pair.id)


def sample_training_crop(pair: StereoPair, ch: int, cw: int, rng) -> StereoPair:
    """Random crop, same window in both views; rng is a numpy Generator."""
    _, H, W = pair.left.shape
    if ch > H or cw > W:
        raise CropError(f"crop {ch}x{cw} exceeds image {H}x{W}")
    top = int(rng.integers(0, H - ch + 1))
    lft = int(rng.integers(0, W - cw + 1))
    sl = np.s_[:, top : top + ch, lft : lft + cw]
    return StereoPair(pair.left[sl], pair.right[sl], pair.id)


def read_manifest(path):
    """One `left<TAB>right` pair per line; blank lines and #-comments skipped."""
    pairs = []
    base = Path(path).parent
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        l, r = line.split("\t")
        pairs.append((str(base / l) if not Path(l).is_absolute() else l,
                      str(base / r) if not Path(r).is_absolute() else r))
    return pairs


def _smooth_field(rng, H, W, components=6):
    # sum of random low-frequency sinusoid products; cheap and band-limited
    ys = np.arange(H, dtype=np.float32)[:, None]
    xs = np.arange(W, dtype=np.float32)[None, :]
    field = np.zeros((H, W), dtype=np.float32)
    for _ in range(components):
        fy = rng.uniform(0.2, 3.0) * 2 * np.pi / H
        fx = rng.uniform(0.2, 3.0) * 2 * np.pi / W
        ph_y = rng.uniform(0, 2 * np.pi)
        ph_x = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.3, 1.0)
        field += amp * np.sin(fy * ys + ph_y) * np.sin(fx * xs + ph_x)
    return field


def _synth_left(rng, H, W):
    base = np.stack([_smooth_field(rng, H, W) for _ in range(3)])
    # correlate channels so the image looks like one scene, not three
    mix = rng.uniform(0.5, 1.0, size=(3, 1, 1)).astype(np.float32)
    shared = _smooth_field(rng, H, W)
    img = 0.6 * shared[None] * mix + 0.4 * base
    # piecewise-flat patches give the codec sharp, compressible structure
    n_boxes = int(rng.integers(2, 6))
    for _ in range(n_boxes):
        bh = int(rng.integers(H // 8, H // 2))
        bw = int(rng.integers(W // 8, W // 2))
        by = int(rng.integers(0, H - bh + 1))
        bx = int(rng.integers(0, W - bw + 1))
        img[:, by : by + bh, bx : bx + bw] = rng.uniform(-1, 1, size=(3, 1, 1))
    lo, hi = img.min(), img.max()
    return ((img - lo) / max(hi - lo, 1e-6)).astype(np.float32)


def synth_stereo_dataset(seed, count, H, W, max_disparity, noise=0.01, occlusions=2):
    """Deterministic synthetic rectified pairs.

    The right view is the left view shifted by a per-pair piecewise-constant
    horizontal disparity, plus independent pixel noise and a few occlusion
    bands of unrelated texture. Mutual information between the views is high
    but deliberately not total.
    """
    if max_disparity >= W / 4:
        raise ValueError(f"max_disparity {max_disparity} must be < W/4 = {W / 4}")
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(count):
        left = _synth_left(rng, H, W)
        right = np.empty_like(left)
        n_seg = int(rng.integers(2, 5))
        bounds = np.sort(rng.choice(np.arange(1, W), size=n_seg - 1, replace=False))
        edges = [0, *bounds.tolist(), W]
        for s in range(n_seg):
            d = int(rng.integers(0, max_disparity + 1))
            x0, x1 = edges[s], edges[s + 1]
            src = np.clip(np.arange(x0, x1) + d, 0, W - 1)
            right[:, :, x0:x1] = left[:, :, src]
        if noise > 0:
            right = right + rng.normal(0.0, noise, size=right.shape).astype(np.float32)
        if noise > 0 and occlusions > 0:
            for _ in range(int(rng.integers(1, occlusions + 1))):
                ow = int(rng.integers(max(1, W // 32), max(2, W // 12)))
                ox = int(rng.integers(0, W - ow + 1))
                right[:, :, ox : ox + ow] = rng.uniform(0, 1, size=(3, H, ow))
        right = np.clip(right, 0.0, 1.0).astype(np.float32)
        pairs.append(StereoPair(left, right, id=f"synth-{seed}-{i:04d}"))
    return pairs
