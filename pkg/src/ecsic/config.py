"""Plain-text configuration: dotted keys, one `key = value` per line.

Every known key has a type and default below; unknown keys are rejected so
typos fail loudly. CLI overrides (`--set key=value`) win over file values.
"""

from .data import CropSpec
from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# key -> (parser, default)
# Defaults describe the desk-scale protocol so every documented command runs
# on a CPU in minutes; full-scale settings (N=192, M=48, large crops) are a
# config file away. ModelConfig's own dataclass defaults stay full-scale.
SCHEMA = {
    "model.variant": (str, "full"),
    "model.N": (int, 32),
    "model.M": (int, 8),
    "model.heads": (int, 4),
    "model.embed_dim": (int, 32),  # 0 -> 2N
    "model.sca_kernel": (int, 3),

    "train.lambda": (float, 0.01),
    "train.steps": (int, 20000),
    "train.lr_initial": (float, 1e-4),
    "train.lr_drop_step": (int, -1),  # -1 -> 90% of steps
    "train.lr_final": (float, 1e-5),
    "train.batch_size": (int, 1),
    "train.crop_h": (int, 32),
    "train.crop_w": (int, 64),
    "train.seed": (int, 0),
    "train.distortion": (str, "mse"),
    "train.msssim_warmup_steps": (int, 50000),
    "train.log_every": (int, 1),

    "crop.top": (int, 0),
    "crop.bottom": (int, 0),
    "crop.sides": (int, 0),
    "crop.align": (int, 1),

    "data.manifest": (str, ""),
    "data.synthetic": (_bool, True),
    "data.count": (int, 32),
    "data.height": (int, 64),
    "data.width": (int, 128),
    "data.max_disparity": (int, 8),
    "data.noise": (float, 0.01),
    "data.seed": (int, 7),
    "data.eval_count": (int, 8),
    "data.eval_seed": (int, 9999),

    "bench.warmup": (int, 2),
}


def parse_config_text(text, source="<config>"):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        parser, _ = SCHEMA[key]
        try:
            values[key] = parser(val)
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {e}") from e
    return values


def apply_overrides(values, overrides):
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, _, val = item.partition("=")
        key, val = key.strip(), val.strip()
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        parser, _ = SCHEMA[key]
        try:
            values[key] = parser(val)
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {e}") from e
    return values


def resolve(config_path=None, overrides=()):
    """File + overrides + defaults -> complete {key: value} map."""
    values = {}
    if config_path is not None:
        with open(config_path) as fh:
            values = parse_config_text(fh.read(), source=str(config_path))
    apply_overrides(values, overrides)
    for key, (_, default) in SCHEMA.items():
        values.setdefault(key, default)
    return values


def format_config(values):
    """Canonical echo of a resolved configuration (stable ordering)."""
    lines = [f"{k} = {values[k]}" for k in SCHEMA if k in values]
    extra = [f"{k} = {v}" for k, v in values.items() if k not in SCHEMA]
    return "\n".join(lines + sorted(extra)) + "\n"


def model_config(values) -> ModelConfig:
    return ModelConfig(
        N=values["model.N"],
        M=values["model.M"],
        heads=values["model.heads"],
        embed_dim=values["model.embed_dim"],
        sca_kernel=values["model.sca_kernel"],
        variant=values["model.variant"],
    )


def train_config(values) -> TrainConfig:
    drop = values["train.lr_drop_step"]
    return TrainConfig(
        lambda_=values["train.lambda"],
        steps=values["train.steps"],
        lr_initial=values["train.lr_initial"],
        lr_drop_step=None if drop < 0 else drop,
        lr_final=values["train.lr_final"],
        batch_size=values["train.batch_size"],
        crop_h=values["train.crop_h"],
        crop_w=values["train.crop_w"],
        seed=values["train.seed"],
        variant=values["model.variant"],
        distortion=values["train.distortion"],
        msssim_warmup_steps=values["train.msssim_warmup_steps"],
        log_every=values["train.log_every"],
    )


def crop_spec(values) -> CropSpec:
    return CropSpec(
        top=values["crop.top"],
        bottom=values["crop.bottom"],
        left_px=values["crop.sides"],
        right_px=values["crop.sides"],
        align=values["crop.align"],
    )


def load_dataset(values):
    """Dataset per config: a manifest of PNG pairs, else synthetic pairs.
    The dataset crop applies to manifest images."""
    from .data import apply_dataset_crop, load_stereo_pair, read_manifest, synth_stereo_dataset

    if values["data.manifest"]:
        spec = crop_spec(values)
        pairs = []
        for lp, rp in read_manifest(values["data.manifest"]):
            pairs.append(apply_dataset_crop(load_stereo_pair(lp, rp), spec))
        return pairs
    if not values["data.synthetic"]:
        raise ConfigError("no dataset: set data.manifest or data.synthetic=true")
    return synth_stereo_dataset(
        seed=values["data.seed"], count=values["data.count"],
        H=values["data.height"], W=values["data.width"],
        max_disparity=values["data.max_disparity"], noise=values["data.noise"])


def load_eval_dataset(values):
    """Held-out pairs for RD measurement. Synthetic data gets a disjoint
    seed; manifest data is evaluated as-is."""
    from .data import synth_stereo_dataset

    if values["data.manifest"] or not values["data.synthetic"]:
        return load_dataset(values)
    return synth_stereo_dataset(
        seed=values["data.eval_seed"], count=values["data.eval_count"],
        H=values["data.height"], W=values["data.width"],
        max_disparity=values["data.max_disparity"], noise=values["data.noise"])
