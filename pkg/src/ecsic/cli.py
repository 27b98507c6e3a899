"""Command-line front end.

    ecsic train --run base --set train.lambda=0.01
    ecsic encode L.png R.png -o out.ecsic --model ckpt.pt
    ecsic decode out.ecsic -o L_hat.png R_hat.png --model ckpt.pt
    ecsic eval --model ckpt.pt --out runs/base/plots/rd
    ecsic ablate --variants baseline,full --steps 5000

Exit codes: 0 success, 1 runtime failure, 2 usage error. `ECSIC_DEVICE`
selects the compute device (default cpu).
"""

import argparse
import os
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import (apply_overrides, format_config, load_dataset,
                     load_eval_dataset, model_config, resolve, train_config)
from .container import BitstreamContainer, decode_stereo, encode_stereo, get_coder
from .errors import (ConfigError, CorruptStreamError, CropError, DimensionError,
                     ModelMismatchError, NumericsError, RangeError)

RUNTIME_ERRORS = (CorruptStreamError, ModelMismatchError, DimensionError,
                  CropError, NumericsError, RangeError, OSError)


def _device():
    return os.environ.get("ECSIC_DEVICE", "cpu")


def _warn(msg):
    print(f"warning: {msg}", file=sys.stderr)


def _load_model(path):
    model, _ = load_checkpoint(path, device=_device())
    return model


def _coder_for(args):
    coder, warning = get_coder(getattr(args, "coder", "reference"))
    if warning:
        _warn(warning)
    return coder


def _resolve(args):
    return resolve(args.config, args.overrides)


def _prepare_run_dir(args, values):
    rundir = Path(args.runs_root) / args.run
    for sub in ("checkpoints", "plots"):
        (rundir / sub).mkdir(parents=True, exist_ok=True)
    (rundir / "config").write_text(format_config(values))
    metrics = rundir / "metrics.jsonl"
    if metrics.exists():
        metrics.unlink()
    print(f"run directory: {rundir}")
    print(format_config(values), end="")
    return rundir


def cmd_train(args):
    from .training import train

    values = _resolve(args)
    rundir = _prepare_run_dir(args, values)
    dataset = load_dataset(values)
    train(model_config(values), train_config(values), dataset,
          out_dir=rundir, device=_device(), quiet=False)
    print(f"checkpoint: {rundir / 'checkpoints' / 'final.pt'}")
    return 0


def cmd_finetune_msssim(args):
    from .training import msssim_finetune

    values = _resolve(args)
    rundir = _prepare_run_dir(args, values)
    dataset = load_dataset(values)
    msssim_finetune(args.from_ckpt, train_config(values), dataset,
                    out_dir=rundir, device=_device(), quiet=False)
    print(f"checkpoint: {rundir / 'checkpoints' / 'final.pt'}")
    return 0


def cmd_encode(args):
    from .data import load_stereo_pair
    from .metrics import compute_bpp

    model = _load_model(args.model)
    coder = _coder_for(args)
    pair = load_stereo_pair(args.left, args.right)
    container = encode_stereo(pair, model, coder=coder)
    Path(args.out).write_bytes(container.to_bytes())
    print(f"{args.out}: {container.total_bytes} bytes "
          f"({compute_bpp(container):.4f} bpp, coder={coder.name})")
    return 0


def cmd_decode(args):
    from .data import save_image

    model = _load_model(args.model)
    coder = _coder_for(args)
    container = BitstreamContainer.from_bytes(Path(args.stream).read_bytes())
    x_hat_l, x_hat_r = decode_stereo(container, model, coder=coder)
    out_l, out_r = args.out
    save_image(x_hat_l[0].cpu().numpy(), out_l)
    save_image(x_hat_r[0].cpu().numpy(), out_r)
    print(f"{args.stream} -> {out_l}, {out_r}")
    return 0


def cmd_eval(args):
    from .ablation import evaluate_model
    from .metrics import RDPoint, emit_rd_curve

    values = _resolve(args)
    pairs = load_dataset(values)
    coder = _coder_for(args)
    labels = args.labels.split(",") if args.labels else None
    if labels and len(labels) != len(args.model):
        raise ConfigError(f"{len(args.model)} models but {len(labels)} labels")
    points = []
    for i, ckpt in enumerate(args.model):
        label = labels[i] if labels else Path(ckpt).stem
        res = evaluate_model(_load_model(ckpt), pairs, coder=coder)
        msssim = res.get("msssim")
        extra = f" msssim {msssim:.4f}" if msssim is not None else ""
        print(f"{label}: bpp {res['bpp']:.4f} psnr {res['psnr']:.2f}{extra} "
              f"({len(pairs)} pairs)")
        points.append(RDPoint(bpp=res["bpp"], quality=res["psnr"],
                              label=label, msssim=msssim))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        emit_rd_curve(points, args.out)
        print(f"wrote {args.out}.csv and {args.out}.png")
    return 0


def cmd_bench(args):
    from .metrics import format_timing_report, timing_bench

    values = _resolve(args)
    pairs = load_dataset(values)
    model = _load_model(args.model)
    warmup = values["bench.warmup"] if args.warmup is None else args.warmup
    report = timing_bench(model, pairs, device_info=_device(),
                          warmup=warmup, coder=_coder_for(args))
    print(format_timing_report(report))
    return 0


def cmd_ablate(args):
    from .ablation import bd_table, format_bd_table, run_grid

    values = _resolve(args)
    if args.steps is not None:
        apply_overrides(values, [f"train.steps={args.steps}"])
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    lambdas = sorted(float(x) for x in args.lambdas.split(","))
    seeds = [int(s) for s in args.seeds.split(",")]
    if len(lambdas) < 2:
        raise ConfigError("need at least two lambda values for a BD comparison")

    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "config").write_text(format_config(values))
    train_pairs = load_dataset(values)
    eval_pairs = load_eval_dataset(values)
    rows = run_grid(variants, lambdas, seeds, model_config(values),
                    train_config(values), train_pairs, eval_pairs,
                    cache_dir=outdir / "cache", device=_device(),
                    log=lambda m: print(m, flush=True))
    reference = "baseline" if "baseline" in variants else variants[0]
    entries = bd_table(rows, variants, seeds, reference=reference)
    table = format_bd_table(entries, reference=reference)
    print(table)
    (outdir / "bd_table.txt").write_text(table + "\n")
    with open(outdir / "runs.csv", "w") as fh:
        fh.write("variant,lambda,seed,bpp,psnr\n")
        for r in rows:
            fh.write(f"{r['variant']},{r['lambda']},{r['seed']},"
                     f"{r['bpp']!r},{r['psnr']!r}\n")
    print(f"wrote {outdir / 'bd_table.txt'} and {outdir / 'runs.csv'}")
    return 0


def cmd_synth_data(args):
    from .data import save_image, synth_stereo_dataset

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pairs = synth_stereo_dataset(seed=args.seed, count=args.count,
                                 H=args.height, W=args.width,
                                 max_disparity=args.max_disparity,
                                 noise=args.noise)
    lines = [f"# synthetic stereo pairs: seed={args.seed} "
             f"{args.height}x{args.width} max_disparity={args.max_disparity}"]
    for pair in pairs:
        l_name, r_name = f"{pair.id}_L.png", f"{pair.id}_R.png"
        save_image(pair.left, out / l_name)
        save_image(pair.right, out / r_name)
        lines.append(f"{l_name}\t{r_name}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(pairs)} pairs to {out} (manifest: {out / 'manifest.txt'})")
    return 0


def _add_config_args(p):
    p.add_argument("--config", metavar="PATH", help="plain-text config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config key (repeatable)")


def _add_run_args(p):
    p.add_argument("--run", required=True, help="run name under the runs root")
    p.add_argument("--runs-root", default="runs", metavar="DIR")


def _add_coder_arg(p):
    p.add_argument("--coder", choices=("reference", "fast"), default="reference",
                   help="entropy-coding backend (fast falls back to reference)")


def build_parser():
    ap = argparse.ArgumentParser(
        prog="ecsic", description="Joint stereo image codec tools")
    sub = ap.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("train", help="rate-distortion training run")
    _add_config_args(p)
    _add_run_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune-msssim", help="perceptual finetune from a checkpoint")
    p.add_argument("--from", dest="from_ckpt", required=True, metavar="CKPT")
    _add_config_args(p)
    _add_run_args(p)
    p.set_defaults(func=cmd_finetune_msssim)

    p = sub.add_parser("encode", help="compress a stereo pair to a bitstream")
    p.add_argument("left")
    p.add_argument("right")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--model", required=True, metavar="CKPT")
    _add_coder_arg(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="reconstruct a stereo pair from a bitstream")
    p.add_argument("stream")
    p.add_argument("-o", "--out", nargs=2, required=True,
                   metavar=("LEFT", "RIGHT"))
    p.add_argument("--model", required=True, metavar="CKPT")
    _add_coder_arg(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="rate/quality over a dataset; optional RD CSV+plot")
    p.add_argument("--model", action="append", required=True, metavar="CKPT",
                   help="checkpoint to evaluate (repeatable)")
    p.add_argument("--labels", help="comma-separated labels matching --model order")
    p.add_argument("--out", metavar="BASE", help="write BASE.csv and BASE.png")
    _add_config_args(p)
    _add_coder_arg(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="encode/decode timing with per-phase split")
    p.add_argument("--model", required=True, metavar="CKPT")
    p.add_argument("--warmup", type=int, default=None)
    _add_config_args(p)
    _add_coder_arg(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="train a variant grid and report BD deltas")
    p.add_argument("--variants", required=True,
                   help="comma-separated variant names")
    p.add_argument("--lambdas", default="0.002,0.01")
    p.add_argument("--seeds", default="0")
    p.add_argument("--steps", type=int, default=None,
                   help="override train.steps for the grid")
    p.add_argument("--out", default="runs/ablate", metavar="DIR")
    _add_config_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("synth-data", help="write a synthetic stereo dataset")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--count", type=int, default=32)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--max-disparity", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_synth_data)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
