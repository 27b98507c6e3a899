"""Rate-distortion training, loss accounting, and MS-SSIM fine-tuning."""

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import entropy
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, NumericsError
from .metrics import ms_ssim_tensor
from .model import ModelConfig, StereoCodec

GRAD_CLIP_NORM = 1.0

# divergence breaker: batch-size-1 RD training can hit an edge-of-stability
# runaway (latents grow a few percent per step while the loss climbs
# exponentially), most often at the high-lambda end. A step is rejected when
# (a) the loss is non-finite, (b) any coded variable has more than SAT_LIMIT
# of its elements pinned at the per-element rate cap (the earliest symptom:
# a small hyper-latent can saturate its cap while the total loss still looks
# healthy, after which its quantized conditioning output is garbage), or
# (c) the loss exceeds SPIKE_FACTOR times a smoothed reference whose updates
# are clamped to EMA_GROWTH_CLAMP times the current reference, so the
# reference can descend freely but cannot chase an exponential runaway.
# Rejected steps are not applied; SPIKE_PATIENCE consecutive rejections (or
# one non-finite loss) roll the run back to the last healthy snapshot and
# halve the learning rate. The halving ladder relaxes one level per clean
# stretch, so a run that stops spiking returns to the scheduled rate. All of
# it is a deterministic function of the seed.
EMA_BETA = 0.98
EMA_GROWTH_CLAMP = 1.5
SPIKE_FACTOR = 8.0
# Free-running probes put healthy trajectories at saturation 0.0-0.2 with
# rare blips to 0.5, while every sustained excursion above 0.5 ended in a
# runaway; 0.5 is the trigger. Snapshots demand the stricter SAT_SNAP so a
# rollback always restores real headroom instead of a state parked at the
# trigger boundary (which would re-trip within a few steps).
SAT_LIMIT = 0.5
SAT_SNAP = 0.25
SPIKE_PATIENCE = 3
SNAPSHOT_EVERY = 250
BACKOFF_RELAX_STEPS = 3000
MAX_BACKOFF_HALVINGS = 6
# Intervention budget: the terminal error is for runs that burn most of
# their budget in rejected work, not for long runs living in the contained
# regime (high-lambda drift pressure is persistent, so periodic rollbacks
# with an improving loss are the breaker working as intended).
MAX_INTERVENTIONS = 40

# Latent-inflation stabilizer. At higher lambdas the optimizer can profit
# from growing a latent far past its prior (the conditioning benefit keeps
# rising while the Laplace rate pull is constant in the residual and the
# prior's learned scale can only CHEAPEN distance, never penalize it), which
# saturates the 24-bit cap and feeds downstream heads out-of-distribution
# inputs. The squared overflow penalty makes the restoring force grow with
# the excess; it is exactly zero whenever every element is 4+ bits under the
# cap, so healthy equilibria are untouched. The weight is sized so the
# repulsion overtakes the observed inflation reward within the first bit
# past the onset (at 0.25 the balance point sat ~20 bits in, past the cap,
# and runs parked at the breaker boundary). Kept out of the reported
# breakdown (whose identity is total == rate + lambda * distortion) and
# logged separately.
OVERFLOW_W = 16.0

# A run that ends inside a contained instability (rollbacks keep firing,
# smoothed loss well above its best) returns its best healthy snapshot
# instead of the drift residue. final.pt still holds the true final state
# so resuming reproduces the uninterrupted trajectory exactly.
RESTORE_MARGIN = 1.1


def _max_interventions(steps):
    return max(MAX_INTERVENTIONS, steps // SNAPSHOT_EVERY)


@dataclass
class TrainConfig:
    lambda_: float = 0.01
    steps: int = 20000
    lr_initial: float = 1e-4
    lr_drop_step: int = None  # default: 90% of steps
    lr_final: float = 1e-5
    batch_size: int = 1
    crop_h: int = 32
    crop_w: int = 64
    seed: int = 0
    variant: str = "full"
    distortion: str = "mse"
    msssim_warmup_steps: int = 50000
    log_every: int = 1  # per-step breakdown records by default

    def __post_init__(self):
        if not self.lambda_ > 0:
            raise ConfigError(f"lambda must be positive, got {self.lambda_}")
        if not self.steps > 0:
            raise ConfigError(f"steps must be positive, got {self.steps}")
        if self.distortion not in ("mse", "msssim"):
            raise ConfigError(f"unknown distortion {self.distortion!r}")
        if self.lr_drop_step is None:
            self.lr_drop_step = int(self.steps * 0.9)

    def lr_at(self, step):
        return self.lr_initial if step < self.lr_drop_step else self.lr_final


@dataclass
class LossBreakdown:
    total: float
    rate_bpp: float
    distortion: float
    rate_z_l: float
    rate_z_r: float
    rate_y_l: float
    rate_y_r: float

    def as_dict(self):
        return asdict(self)


@dataclass
class ForwardOutputs:
    """Training-mode forward pass products: STE reconstructions, the
    noisy-proxy rate terms (bits, one scalar tensor per coded variable),
    and each variable's cap saturation (fraction of elements whose rate sits
    at the 24-bit worst case -- a health signal, near zero in sane runs)."""

    x_hat_l: torch.Tensor
    x_hat_r: torch.Tensor
    rate_terms: dict  # name -> scalar tensor, bits
    num_pixels: int  # H*W of one view
    saturation: dict = field(default_factory=dict)  # name -> float in [0, 1]
    overflow: object = None  # scalar tensor, summed overflow penalty


def _rate_and_saturation(v, mu, b, generator):
    x = entropy.noise_proxy(v, generator)
    el = entropy.rate_bits_elements(x, mu, b)
    sat = (el.detach() >= entropy.RATE_CAP_BITS).float().mean()
    return el.sum(), float(sat), entropy.overflow_penalty_elements(x, mu, b).sum()


def training_forward(model, x_l, x_r, generator=None):
    """One differentiable pass. The conditioning chain sees straight-through
    quantized tensors (what the decoder will see); each rate term is the
    cross entropy of that variable's additive-noise proxy."""
    _, _, H, W = x_l.shape
    y_l, y_r = model.analysis(x_l, x_r)
    z_l, z_r = model.hyper_analysis(y_l, y_r)

    mu_zl, b_zl = model.theta_z_l(z_l)
    zh_l = entropy.ste_quantize(z_l, mu_zl)
    r_zl, s_zl, o_zl = _rate_and_saturation(z_l, mu_zl, b_zl, generator)

    mu_zr, b_zr = model.theta_z_r(zh_l)
    zh_r = entropy.ste_quantize(z_r, mu_zr)
    r_zr, s_zr, o_zr = _rate_and_saturation(z_r, mu_zr, b_zr, generator)

    (mu_yl, b_yl), right = model.theta_y(zh_l, zh_r)
    yh_l = entropy.ste_quantize(y_l, mu_yl)
    r_yl, s_yl, o_yl = _rate_and_saturation(y_l, mu_yl, b_yl, generator)

    mu_yr, b_yr = right(yh_l) if callable(right) else right
    yh_r = entropy.ste_quantize(y_r, mu_yr)
    r_yr, s_yr, o_yr = _rate_and_saturation(y_r, mu_yr, b_yr, generator)

    xh_l, xh_r = model.synthesis(yh_l, yh_r)
    return ForwardOutputs(
        xh_l, xh_r,
        {"z_l": r_zl, "z_r": r_zr, "y_l": r_yl, "y_r": r_yr},
        H * W,
        {"z_l": s_zl, "z_r": s_zr, "y_l": s_yl, "y_r": s_yr},
        o_zl + o_zr + o_yl + o_yr)


def _check_finite(name, t):
    if not torch.isfinite(t).all():
        raise NumericsError(f"non-finite {name} term")


def rd_loss(out: ForwardOutputs, x_l, x_r, lam, distortion="mse", alpha=1.0):
    """Loss tensor plus its breakdown. Distortion is squared error summed
    over elements and views for "mse"; for "msssim" it is the convex
    combination alpha * mse + (1 - alpha) * (1 - MS-SSIM score)."""
    batch = x_l.shape[0]
    rate_bits_total = sum(out.rate_terms.values())
    rate_bpp = rate_bits_total / (2.0 * out.num_pixels * batch)
    _check_finite("rate", rate_bpp)

    mse_term = ((x_l - out.x_hat_l) ** 2).sum() + ((x_r - out.x_hat_r) ** 2).sum()
    if distortion == "mse":
        dist = mse_term
    else:
        score = ms_ssim_tensor(torch.cat([x_l, x_r]),
                               torch.cat([out.x_hat_l, out.x_hat_r])).mean()
        dist = alpha * mse_term + (1.0 - alpha) * (1.0 - score)
    _check_finite("distortion", dist)

    total = rate_bpp + lam * dist
    denom = 2.0 * out.num_pixels * batch
    # breakdown recomputed in float64 so total == rate + lambda*distortion
    # holds exactly on the reported numbers
    rate_f, dist_f = float(rate_bpp.detach()), float(dist.detach())
    breakdown = LossBreakdown(
        total=rate_f + lam * dist_f,
        rate_bpp=rate_f,
        distortion=dist_f,
        rate_z_l=float(out.rate_terms["z_l"].detach()) / denom,
        rate_z_r=float(out.rate_terms["z_r"].detach()) / denom,
        rate_y_l=float(out.rate_terms["y_l"].detach()) / denom,
        rate_y_r=float(out.rate_terms["y_r"].detach()) / denom,
    )
    return total, breakdown


def _batch_tensors(dataset, cfg, rng, device):
    from .data import sample_training_crop

    ls, rs = [], []
    for _ in range(cfg.batch_size):
        pair = dataset[int(rng.integers(0, len(dataset)))]
        crop = sample_training_crop(pair, cfg.crop_h, cfg.crop_w, rng)
        ls.append(torch.from_numpy(np.ascontiguousarray(crop.left)))
        rs.append(torch.from_numpy(np.ascontiguousarray(crop.right)))
    return torch.stack(ls).to(device), torch.stack(rs).to(device)


def _make_optimizer(model, lr):
    return torch.optim.Adam(model.parameters(), lr=lr, fused=True)


def _alpha_at(step, cfg):
    if cfg.distortion != "msssim":
        return 1.0
    if step >= cfg.msssim_warmup_steps:
        return 0.0
    return 1.0 - step / cfg.msssim_warmup_steps


def _round(d, sig=6):
    return {k: float(f"{v:.{sig}g}") if isinstance(v, float) else v
            for k, v in d.items()}


def train(model_cfg: ModelConfig, cfg: TrainConfig, dataset,
          out_dir=None, device="cpu", resume_from=None, initial_model=None,
          quiet=True):
    """Run the RD loop; returns (model, history of breakdown dicts).

    With out_dir set, writes metrics.jsonl and checkpoints/final.pt laid out
    for the CLI. resume_from restarts exactly (weights, optimizer, RNG
    streams, step counter, breaker state), producing the same trajectory an
    uninterrupted run would. initial_model starts from given weights with
    fresh optimizer and RNG streams (the fine-tuning entry point).

    History and metrics.jsonl record the applied steps; steps rejected by
    the divergence breaker appear in metrics.jsonl only as rollback event
    records."""
    if not len(dataset):
        raise ConfigError("dataset is empty")
    if model_cfg is not None and model_cfg.variant != cfg.variant:
        raise ConfigError(
            f"model variant {model_cfg.variant!r} != train variant {cfg.variant!r}")
    start_step = 0
    ema, spike_run, level, clean, interventions = None, 0, 0, 0, 0
    if resume_from is not None:
        model, payload = load_checkpoint(resume_from, device=device)
        extra = payload["extra"]
        start_step = extra["step"]
        ema = extra.get("ema")
        spike_run = extra.get("spike_run", 0)
        level = extra.get("backoff_level", 0)
        clean = extra.get("backoff_clean", 0)
        interventions = extra.get("interventions", 0)
        rng = np.random.default_rng()
        rng.bit_generator.state = extra["np_rng_state"]
        gen = torch.Generator(device="cpu")
        gen.set_state(extra["torch_rng_state"])
        opt = _make_optimizer(model, cfg.lr_at(start_step))
        opt.load_state_dict(payload["optim"])
    else:
        torch.manual_seed(cfg.seed)
        model = initial_model if initial_model is not None \
            else StereoCodec(model_cfg).to(device)
        rng = np.random.default_rng(cfg.seed)
        gen = torch.Generator(device="cpu").manual_seed(cfg.seed + 1)
        opt = _make_optimizer(model, cfg.lr_at(0))

    model.train()
    history = []
    metrics_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out_dir / "metrics.jsonl", "a")

    snapshot = None
    best = None  # (smoothed total, model state, step)

    def take_snapshot():
        nonlocal snapshot
        if all(torch.isfinite(p).all() for p in model.parameters()):
            snapshot = (copy.deepcopy(model.state_dict()),
                        copy.deepcopy(opt.state_dict()), ema)

    # flushing denormals speeds up CPU convs measurably on this workload;
    # restore afterwards so the process-wide FP mode does not leak
    torch.set_flush_denormal(True)
    try:
        for step in range(start_step, cfg.steps):
            lr = cfg.lr_at(step) * (0.5 ** level)
            for group in opt.param_groups:
                group["lr"] = lr
            if snapshot is None:
                take_snapshot()
            x_l, x_r = _batch_tensors(dataset, cfg, rng, device)
            alpha = _alpha_at(step, cfg)
            reject, sat_now = None, 0.0
            try:
                out = training_forward(model, x_l, x_r, generator=gen)
                loss, breakdown = rd_loss(out, x_l, x_r, cfg.lambda_,
                                          cfg.distortion, alpha)
                sat_now = max(out.saturation.values(), default=0.0)
            except NumericsError as e:
                reject = f"nonfinite: {e}"
            if reject is None and sat_now > SAT_LIMIT:
                reject = "saturation"
            if reject is None and ema is not None \
                    and breakdown.total > SPIKE_FACTOR * ema:
                reject = "spike"
            if reject is not None:
                spike_run += SPIKE_PATIENCE if \
                    reject.startswith("nonfinite") else 1
                if spike_run >= SPIKE_PATIENCE:
                    interventions += 1
                    if interventions > _max_interventions(cfg.steps):
                        raise NumericsError(
                            f"step {step}: diverged past "
                            f"{_max_interventions(cfg.steps)} rollbacks "
                            f"({reject})")
                    model.load_state_dict(snapshot[0])
                    opt.load_state_dict(snapshot[1])
                    ema = snapshot[2]
                    level = min(level + 1, MAX_BACKOFF_HALVINGS)
                    clean, spike_run = 0, 0
                    if metrics_fh is not None:
                        metrics_fh.write(json.dumps(
                            {"step": step, "event": "rollback",
                             "reason": reject,
                             "lr_scale": 0.5 ** level}) + "\n")
                    if not quiet:
                        print(f"step {step}: rollback ({reject}), "
                              f"lr scale {0.5 ** level}", flush=True)
                continue  # rejected step: the model is left untouched
            spike_run = 0
            if step % SNAPSHOT_EVERY == 0 and sat_now <= SAT_SNAP:
                take_snapshot()
                cand = breakdown.total if ema is None else ema
                if best is None or cand < best[0]:
                    best = (cand, copy.deepcopy(model.state_dict()), step)
            ema = breakdown.total if ema is None else \
                EMA_BETA * ema + (1.0 - EMA_BETA) * min(
                    breakdown.total, EMA_GROWTH_CLAMP * ema)
            clean += 1
            if level and clean >= BACKOFF_RELAX_STEPS:
                level -= 1
                clean = 0
            aux = OVERFLOW_W * out.overflow / (2.0 * out.num_pixels
                                               * x_l.shape[0])
            opt.zero_grad(set_to_none=True)
            (loss + aux).backward()
            grad_norm = float(torch.nn.utils.clip_grad_norm_(
                model.parameters(), GRAD_CLIP_NORM))
            opt.step()

            if step % cfg.log_every == 0 or step == cfg.steps - 1:
                rec = {"step": step, "lr": lr, **_round(breakdown.as_dict()),
                       "sat": round(sat_now, 4),
                       "overflow": float(f"{float(aux.detach()):.4g}"),
                       "grad_norm": float(f"{grad_norm:.4g}")}
                if cfg.distortion == "msssim":
                    rec["alpha"] = round(alpha, 6)
                history.append(rec)
                if metrics_fh is not None:
                    metrics_fh.write(json.dumps(rec) + "\n")
            if not quiet and step % 500 == 0:
                print(f"step {step}: total {breakdown.total:.4f} "
                      f"rate {breakdown.rate_bpp:.4f} dist {breakdown.distortion:.5f}",
                      flush=True)

        # final.pt first: it must hold the true last-step state so resuming
        # reproduces the uninterrupted trajectory exactly
        if out_dir is not None:
            save_training_state(out_dir / "checkpoints" / "final.pt",
                                model, opt, cfg.steps, rng, gen,
                                breaker={"ema": ema, "spike_run": spike_run,
                                         "backoff_level": level,
                                         "backoff_clean": clean,
                                         "interventions": interventions})
        if best is not None and ema is not None \
                and ema > RESTORE_MARGIN * best[0]:
            model.load_state_dict(best[1])
            if out_dir is not None:
                save_checkpoint(out_dir / "checkpoints" / "best.pt", model)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(
                    {"step": cfg.steps, "event": "restored_best",
                     "from_step": best[2],
                     "best_total": float(f"{best[0]:.6g}"),
                     "final_total": float(f"{ema:.6g}")}) + "\n")
            if not quiet:
                print(f"run ended {ema / best[0]:.2f}x above its best; "
                      f"returning the step-{best[2]} snapshot", flush=True)
    finally:
        torch.set_flush_denormal(False)
        if metrics_fh is not None:
            metrics_fh.close()

    return model, history


def save_training_state(path, model, opt, step, rng, gen, breaker=None):
    extra = {
        "step": step,
        "np_rng_state": rng.bit_generator.state,
        "torch_rng_state": gen.get_state(),
    }
    extra.update(breaker or {})
    save_checkpoint(path, model, optimizer=opt, extra=extra)


def msssim_finetune(checkpoint_path, cfg: TrainConfig, dataset,
                    out_dir=None, device="cpu", quiet=True):
    """Continue from an MSE-trained checkpoint with the perceptual loss:
    distortion warms up from pure squared error to pure (1 - MS-SSIM) over
    msssim_warmup_steps, at the reduced fixed learning rate."""
    model, _ = load_checkpoint(checkpoint_path, device=device)
    cfg = TrainConfig(**{**asdict(cfg),
                         "variant": model.cfg.variant,
                         "distortion": "msssim",
                         "lr_initial": cfg.lr_final,
                         "lr_drop_step": 0})
    return train(None, cfg, dataset, out_dir=out_dir, device=device,
                 initial_model=model, quiet=quiet)
