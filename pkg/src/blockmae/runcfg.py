"""Flat key=value run configuration files.

One `key = value` pair per line; `#` starts a comment; blank lines are
ignored. Keys are dot-namespaced by the section they feed:

  model.*    architecture (ModelConfig fields)
  mask.*     masking ratio and block granularity (grid size is always
             derived from the model: input_size // p per side)
  optim.*    optimizer and schedule (OptimConfig fields)
  augment.*  random-resized-crop settings (output size follows the model)
  run.seed   seed for the single run-level generator
  curate.*   corpus scoring and filtering knobs
  knn.*      nearest-neighbor probe settings
  probe.*    linear-probe settings (task, feature source, recipe)
  recon.*    reconstruction demo settings
  distill.*  distillation switches; the model.* section of a distill
             config describes the STUDENT (the teacher comes from its
             checkpoint). Student drop-path convention: 0.1 for small
             students, 0.4 for large ones.

Tuples are written as comma-joined scalars (`augment.scale_range = 0.2,1.0`).
Booleans accept true/false, yes/no, 1/0. Every run writes its fully
resolved configuration next to its outputs, so any artifact can be
reproduced from its output directory alone. Precedence, lowest to
highest: preset defaults, config file, command-line --set overrides.
"""

from .data import AugmentConfig
from .masking import MaskConfig
from .model import ModelConfig
from .pipeline import OptimConfig


class ConfigError(ValueError):
    pass


# Keys whose values are always derived from the model section, never read
# from a file: the mask grid and the crop output size must agree with the
# model, so making them settable would only create contradictions.
_DERIVED = {"mask.grid_h", "mask.grid_w", "augment.output_size"}

_SECTIONS = (
    ("model", ModelConfig),
    ("mask", MaskConfig),
    ("optim", OptimConfig),
    ("augment", AugmentConfig),
)

# Non-dataclass sections. The default value doubles as the type witness.
_EXTRA_DEFAULTS = {
    "run.seed": 0,
    "curate.entropy_threshold": 3.0,
    "curate.mask_draws": 4,
    "curate.batch_size": 64,
    "knn.k": 10,
    "knn.temperature": 0.07,
    "knn.holdout": 0.2,
    "knn.source": "cls-mean",
    "probe.task": "classify",
    "probe.source": "cls-mean",
    "probe.epochs": 100,
    "probe.lr": 1e-3,
    "probe.batch_size": 32,
    "probe.holdout": 0.2,
    "probe.block": 0,        # 0 = final encoder block
    "probe.blocks": "all",   # blockprobe: "all" or comma-joined indices
    "recon.count": 4,
    "recon.gray": 0.5,
    "distill.init_from_teacher": False,
    "distill.student_masked": True,
}


def _build_defaults():
    out = {}
    for section, cls in _SECTIONS:
        for f in cls.__dataclass_fields__.values():
            key = f"{section}.{f.name}"
            if key in _DERIVED:
                continue
            out[key] = f.default
    out.update(_EXTRA_DEFAULTS)
    return out


KEY_DEFAULTS = _build_defaults()

# Named starting points. "tiny" is the desk-scale reference model; "micro"
# is a seconds-scale smoke configuration for tests and demos. The student
# variants pair with the matching teacher preset for distillation (student
# sections keep the teacher's input size and class-token count, shrink the
# trunk, and mask the student at r=0.5).
PRESETS = {
    "tiny": {},
    "micro": {
        "model.input_size": 16,
        "model.p": 4,
        "model.enc_dim": 32,
        "model.enc_depth": 2,
        "model.enc_heads": 2,
        "model.dec_dim": 16,
        "model.dec_depth": 2,
        "model.dec_heads": 2,
        "model.n_cls": 2,
        "mask.granularity": 2,
        "optim.peak_lr": 3e-3,
        "optim.warmup_steps": 10,
        "optim.total_steps": 300,
        "optim.batch_size": 16,
    },
    "student-tiny": {
        "model.enc_dim": 96,
        "model.enc_depth": 6,
        "model.enc_heads": 3,
        "model.drop_path_rate": 0.1,
        "mask.ratio": 0.5,
        "optim.peak_lr": 1e-3,
    },
    "student-micro": {
        "model.input_size": 16,
        "model.p": 4,
        "model.enc_dim": 16,
        "model.enc_depth": 1,
        "model.enc_heads": 2,
        "model.dec_dim": 16,
        "model.dec_depth": 2,
        "model.dec_heads": 2,
        "model.n_cls": 2,
        "model.drop_path_rate": 0.1,
        "mask.ratio": 0.5,
        "mask.granularity": 2,
        "optim.peak_lr": 3e-3,
        "optim.warmup_steps": 10,
        "optim.total_steps": 300,
        "optim.batch_size": 16,
    },
}


def parse_value(text, default):
    """Coerce the textual value to the type of the key's default."""
    t = text.strip()
    if isinstance(default, bool):
        low = t.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ConfigError(f"expected a boolean, got {t!r}")
    if isinstance(default, tuple):
        parts = [p.strip() for p in t.split(",") if p.strip()]
        if len(parts) != len(default):
            raise ConfigError(
                f"expected {len(default)} comma-joined values, got {t!r}")
        try:
            return tuple(float(p) for p in parts)
        except ValueError:
            raise ConfigError(f"non-numeric tuple element in {t!r}") from None
    if isinstance(default, int):
        try:
            return int(t)
        except ValueError:
            raise ConfigError(f"expected an integer, got {t!r}") from None
    if isinstance(default, float):
        try:
            return float(t)
        except ValueError:
            raise ConfigError(f"expected a number, got {t!r}") from None
    return t


def format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _check_key(key):
    if key not in KEY_DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")


def read_config_file(path):
    """Parse a flat config file into {key: typed value}."""
    entries = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key = key.strip()
            _check_key(key)
            if key in entries:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            entries[key] = parse_value(value, KEY_DEFAULTS[key])
    return entries


def parse_override(item):
    """One --set item, 'key=value' -> (key, typed value)."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, _, value = item.partition("=")
    key = key.strip()
    _check_key(key)
    return key, parse_value(value, KEY_DEFAULTS[key])


def resolve(preset="tiny", config_path=None, overrides=()):
    """Merge preset defaults, an optional file, and overrides into a full map."""
    if preset not in PRESETS:
        raise ConfigError(
            f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = dict(KEY_DEFAULTS)
    cfg.update(PRESETS[preset])
    if config_path is not None:
        cfg.update(read_config_file(config_path))
    for item in overrides:
        key, value = parse_override(item)
        cfg[key] = value
    return cfg


def write_config(cfg, path, header=()):
    """Write a resolved config, one sorted key per line.

    header: extra '# ...' comment lines recording inputs that are not
    config keys (command name, corpus path, checkpoint path).
    """
    lines = [f"# {h}" for h in header]
    for key in sorted(cfg):
        lines.append(f"{key} = {format_value(cfg[key])}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    return path


def _section(cfg, name):
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix)}


def model_config(cfg) -> ModelConfig:
    return ModelConfig(**_section(cfg, "model"))


def mask_config(cfg) -> MaskConfig:
    model = model_config(cfg)
    grid = model.input_size // model.p
    m = _section(cfg, "mask")
    return MaskConfig(ratio=m["ratio"], granularity=m["granularity"],
                      grid_h=grid, grid_w=grid)


def optim_config(cfg) -> OptimConfig:
    return OptimConfig(**_section(cfg, "optim"))


def augment_config(cfg) -> AugmentConfig:
    model = model_config(cfg)
    a = _section(cfg, "augment")
    return AugmentConfig(output_size=model.input_size,
                         scale_range=a["scale_range"],
                         ratio_range=a["ratio_range"],
                         hflip_prob=a["hflip_prob"])
