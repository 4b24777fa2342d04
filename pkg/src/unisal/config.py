"""Flat key=value run configuration.

A config file is plain text: one `key = value` per line, `#` comments,
blank lines ignored.  Keys live in three sections named by prefix
(model., train., data.) and every key has a default, so an empty file
is a valid desk-scale run.  The same parser handles flag overrides,
and the effective (fully resolved) config can be rendered back to text
so a run directory always records exactly what it ran with.
"""

import dataclasses

from .domains import DomainRegistry
from .model import ModelConfig
from .train import LossWeights, OptimizerState, TrainPolicy


class ConfigError(ValueError):
    """A malformed key, value or domain description."""


# width_multiplier 0 means "whatever the profile ships with"
DEFAULTS = {
    "model.profile": "desk",
    "model.width_multiplier": 0.0,
    "model.n_prior_maps": 16,
    "model.prior_gamma": 6.0,
    "model.rnn_channels": 256,
    "model.rnn_dropout": 0.2,
    "model.skip_dropout": 0.6,
    "model.smoothing_kernel": 41,
    "model.smoothing_sigma": 6.0,
    "model.shared_domain_params": False,

    "train.epochs": 16,
    "train.steps_per_epoch": 0,
    "train.base_lr": 0.04,
    "train.lr_decay": 0.8,
    "train.momentum": 0.9,
    "train.weight_decay": 1e-4,
    "train.clip_bound": 2.0,
    "train.encoder_freeze_epochs": 2,
    "train.encoder_lr_divisor": 10.0,
    "train.static_lr_factor": 0.5,
    "train.early_stop_domain": "",
    "train.patience": 3,
    "train.clip_length": 12,
    "train.target_fps": 6,
    "train.static_batch": 32,
    "train.dynamic_batch": 4,
    "train.freeze_encoder_bn": False,
    "train.beta_cc": 0.1,
    "train.beta_nss": 0.1,
    "train.seed": 0,

    # comma list of name:modality:HxW:fps[:root]; fps 0 for static
    "data.domains": "",
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(key, raw):
    default = DEFAULTS[key]
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}")
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}")
    return raw


def parse_config_text(text, base=None):
    """Parse config lines into a fully defaulted dict."""
    cfg = dict(DEFAULTS) if base is None else dict(base)
    for ln, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {ln}: expected key = value, "
                              f"got {stripped!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"line {ln}: unknown key {key!r}")
        cfg[key] = _convert(key, raw)
    return cfg


def load_config(path=None):
    if path is None:
        return dict(DEFAULTS)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    return parse_config_text(text)


def apply_overrides(cfg, overrides):
    """Apply {key: raw-or-typed} pairs on top of a parsed config."""
    out = dict(cfg)
    for key, value in overrides.items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}")
        out[key] = (_convert(key, value) if isinstance(value, str)
                    else value)
    return out


def _fmt_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def effective_text(cfg):
    """Canonical text rendering of a config; parses back to itself."""
    lines = [f"{k} = {_fmt_value(cfg[k])}" for k in sorted(cfg)]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# builders


def parse_domain_spec(spec):
    """One name:modality:HxW:fps[:root] entry -> (name, modality,
    (h, w), fps, root)."""
    parts = spec.strip().split(":", 4)
    if len(parts) < 4:
        raise ConfigError(
            f"domain spec {spec!r}: expected name:modality:HxW:fps[:root]")
    name, modality, res, fps = parts[:4]
    root = parts[4] if len(parts) == 5 else ""
    if "x" not in res:
        raise ConfigError(f"domain {name}: resolution {res!r} is not HxW")
    try:
        h, w = (int(p) for p in res.split("x", 1))
        fps_i = int(fps)
    except ValueError:
        raise ConfigError(f"domain {name}: bad resolution or fps in {spec!r}")
    return name.strip(), modality.strip(), (h, w), fps_i, root.strip()


def build_registry(cfg):
    """DomainRegistry plus {name: dataset root} from data.domains."""
    raw = cfg["data.domains"].strip()
    if not raw:
        raise ConfigError("data.domains is empty; nothing to run on")
    reg = DomainRegistry()
    roots = {}
    for spec in raw.split(","):
        name, modality, hw, fps, root = parse_domain_spec(spec)
        try:
            reg.register(name, modality, hw, native_fps=fps)
        except ValueError as e:
            raise ConfigError(str(e))
        roots[name] = root
    return reg, roots


def build_model_config(cfg):
    profile = cfg["model.profile"]
    wm = cfg["model.width_multiplier"]
    if profile == "desk":
        base = ModelConfig.desk(wm if wm > 0 else 0.125)
    elif profile == "full":
        base = ModelConfig.full_size()
        if wm > 0:
            base = dataclasses.replace(base, width_multiplier=wm)
    else:
        raise ConfigError(f"model.profile must be desk or full, "
                          f"got {profile!r}")
    return dataclasses.replace(
        base,
        n_prior_maps=cfg["model.n_prior_maps"],
        prior_gamma=cfg["model.prior_gamma"],
        rnn_channels=cfg["model.rnn_channels"],
        rnn_dropout=cfg["model.rnn_dropout"],
        skip_dropout=cfg["model.skip_dropout"],
        smoothing_kernel=cfg["model.smoothing_kernel"],
        smoothing_sigma=cfg["model.smoothing_sigma"],
        shared_domain_params=cfg["model.shared_domain_params"])


def build_policy(cfg):
    try:
        return TrainPolicy(
            total_epochs=cfg["train.epochs"],
            encoder_freeze_epochs=cfg["train.encoder_freeze_epochs"],
            encoder_lr_divisor=cfg["train.encoder_lr_divisor"],
            static_domain_lr_factor=cfg["train.static_lr_factor"],
            early_stop_domain=cfg["train.early_stop_domain"],
            patience=cfg["train.patience"],
            steps_per_epoch=cfg["train.steps_per_epoch"],
            clip_length=cfg["train.clip_length"],
            target_fps=cfg["train.target_fps"],
            static_batch=cfg["train.static_batch"],
            dynamic_batch=cfg["train.dynamic_batch"],
            freeze_encoder_bn=cfg["train.freeze_encoder_bn"])
    except ValueError as e:
        raise ConfigError(str(e))


def build_optimizer(cfg):
    return OptimizerState(
        base_lr=cfg["train.base_lr"],
        decay=cfg["train.lr_decay"],
        momentum=cfg["train.momentum"],
        weight_decay=cfg["train.weight_decay"],
        clip_bound=cfg["train.clip_bound"])


def build_loss_weights(cfg):
    try:
        return LossWeights(beta_cc=cfg["train.beta_cc"],
                           beta_nss=cfg["train.beta_nss"])
    except ValueError as e:
        raise ConfigError(str(e))
