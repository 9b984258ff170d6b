"""Model and run configuration: presets, validation, and config-file parsing.

Every architectural shape in the network derives from :class:`ModelConfig`;
every training/evaluation knob lives in :class:`RunSpec`. Config files are
INI-style text with ``[model]`` and ``[run]`` sections mirroring the two
dataclasses. Unknown keys or sections are a hard error.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .exceptions import ConfigError

ABLATIONS = ("full", "no_amm", "frm_two_branch", "no_frm", "no_fusion")
ATTN_SCALES = ("head_dim", "channels")
IGNORE_INDEX = 255


@dataclass
class ModelConfig:
    """Architecture hyperparameters for the segmentation network.

    The four per-stage lists describe the hierarchical encoder; the decoder
    runs at a single channel width ``decoder_dim``. ``pos_grid`` caps the
    offset range of the learned 2D positional-attention tables per stage so
    that every parameter shape is determined by the config alone (larger
    inputs clamp their offsets to the table edge).
    """

    stage_dims: tuple[int, ...] = (64, 128, 320, 512)
    stage_depths: tuple[int, ...] = (3, 4, 6, 3)
    stage_heads: tuple[int, ...] = (1, 2, 5, 8)
    sr_ratios: tuple[int, ...] = (8, 4, 2, 1)
    patch_strides: tuple[int, ...] = (4, 2, 2, 2)
    patch_kernels: tuple[int, ...] = (7, 3, 3, 3)
    decoder_dim: int = 64
    decoder_heads: int = 8
    window_size: int = 8
    num_classes: int = 7
    ablation: str = "full"
    ffn_expansion: int = 4
    attn_scale: str = "head_dim"  # "channels" keeps the single-head sqrt(C) scaling
    gltb_residual: bool = True
    gltb_per_scale: int = 1
    amm_per_branch: bool = False
    amm_cross: bool = False
    pos_grid: tuple[int, ...] = (128, 64, 32, 16)

    @property
    def total_stride(self) -> int:
        s = 1
        for v in self.patch_strides:
            s *= v
        return s


def validate_config(cfg: ModelConfig) -> list[str]:
    """Return every violated invariant as a message; empty list means valid."""
    errors: list[str] = []
    per_stage = ("stage_dims", "stage_depths", "stage_heads", "sr_ratios",
                 "patch_strides", "patch_kernels", "pos_grid")
    for name in per_stage:
        values = getattr(cfg, name)
        if len(values) != 4:
            errors.append(f"{name} must have exactly 4 entries, got {len(values)}")
            continue
        for i, v in enumerate(values):
            if int(v) <= 0:
                errors.append(f"{name}[{i}] must be positive, got {v}")
    if len(cfg.stage_dims) == 4 and len(cfg.stage_heads) == 4:
        for i, (d, h) in enumerate(zip(cfg.stage_dims, cfg.stage_heads)):
            if h > 0 and d % h != 0:
                errors.append(f"dims[{i}] not divisible by heads[{i}] ({d} % {h} != 0)")
    if len(cfg.patch_kernels) == 4 and len(cfg.patch_strides) == 4:
        for i, (k, s) in enumerate(zip(cfg.patch_kernels, cfg.patch_strides)):
            if k < s:
                errors.append(f"patch_kernels[{i}] < patch_strides[{i}] breaks patch overlap")
    if cfg.decoder_dim <= 0:
        errors.append(f"decoder_dim must be positive, got {cfg.decoder_dim}")
    if cfg.decoder_heads <= 0:
        errors.append(f"decoder_heads must be positive, got {cfg.decoder_heads}")
    elif cfg.decoder_dim > 0 and cfg.decoder_dim % cfg.decoder_heads != 0:
        errors.append(f"decoder_dim not divisible by decoder_heads "
                      f"({cfg.decoder_dim} % {cfg.decoder_heads} != 0)")
    if cfg.window_size <= 0:
        errors.append(f"window_size must be positive, got {cfg.window_size}")
    if cfg.num_classes < 2:
        errors.append(f"num_classes must be >= 2, got {cfg.num_classes}")
    if cfg.ablation not in ABLATIONS:
        errors.append(f"unknown ablation {cfg.ablation!r}, expected one of {ABLATIONS}")
    if cfg.attn_scale not in ATTN_SCALES:
        errors.append(f"unknown attn_scale {cfg.attn_scale!r}, expected one of {ATTN_SCALES}")
    if cfg.ffn_expansion < 1:
        errors.append(f"ffn_expansion must be >= 1, got {cfg.ffn_expansion}")
    if cfg.gltb_per_scale < 1:
        errors.append(f"gltb_per_scale must be >= 1, got {cfg.gltb_per_scale}")
    return errors


def require_valid(cfg: ModelConfig) -> ModelConfig:
    errors = validate_config(cfg)
    if errors:
        raise ConfigError("invalid model config: " + "; ".join(errors))
    return cfg


def default_config(preset: str) -> ModelConfig:
    """Build a preset config: ``loveda``, ``potsdam``, or ``tiny``."""
    if preset == "loveda":
        return ModelConfig(num_classes=7, pos_grid=(128, 64, 32, 16))
    if preset == "potsdam":
        return ModelConfig(num_classes=6, pos_grid=(192, 96, 48, 24))
    if preset == "tiny":
        return ModelConfig(
            stage_dims=(8, 16, 24, 32),
            stage_depths=(1, 1, 1, 1),
            stage_heads=(1, 1, 2, 2),
            sr_ratios=(8, 4, 2, 1),
            patch_strides=(4, 2, 2, 2),
            patch_kernels=(7, 3, 3, 3),
            decoder_dim=16,
            decoder_heads=2,
            window_size=4,
            num_classes=3,
            pos_grid=(16, 8, 4, 2),
        )
    raise ConfigError(f"unknown preset {preset!r}, expected loveda, potsdam, or tiny")


@dataclass
class RunSpec:
    """Fully resolved training/evaluation settings for one run.

    The spec is echoed verbatim to the run log before any compute starts.
    """

    dataset: str = "toy"
    data_root: str = ""
    out: str = "runs/default"
    lr: float = 6e-5
    lr_min: float = 0.0
    epochs: int = 50
    batch_size: int = 8
    crop: int = 512
    seed: int = 0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    hflip: bool = True
    vflip: bool = False
    scale_aug: bool = True
    scale_min: float = 0.5
    scale_max: float = 1.5
    grad_clip: float = 0.0
    workers: int = 1
    eval_interval: int = 1
    max_steps: int = 0  # 0 = no cap
    tta: str = "none"
    eval_window: int = 0  # 0 = whole-image inference
    eval_stride: int = 0
    norm_mean: float = 0.5
    norm_std: float = 0.5
    metric_exclude: tuple[int, ...] = ()
    val_split: str = "val"
    toy_size: int = 64
    toy_samples: int = 4

    def echo(self) -> str:
        parts = [f"{f.name}={getattr(self, f.name)!r}" for f in fields(self)]
        return "run_spec " + " ".join(parts)


def default_run_spec(dataset: str) -> RunSpec:
    """Training protocol defaults per dataset."""
    if dataset == "loveda":
        return RunSpec(dataset="loveda", lr=6e-5, epochs=50, batch_size=8, crop=512,
                       weight_decay=0.01, hflip=True, vflip=False, scale_aug=True,
                       tta="hflip,msc", val_split="val")
    if dataset == "potsdam":
        return RunSpec(dataset="potsdam", lr=6e-4, epochs=55, batch_size=8, crop=768,
                       weight_decay=0.01, hflip=False, vflip=False, scale_aug=True,
                       tta="hflip,vflip,rot90,msc", metric_exclude=(5,), val_split="test")
    if dataset == "toy":
        return RunSpec(dataset="toy", lr=3e-3, epochs=300, batch_size=4, crop=0,
                       weight_decay=0.01, hflip=False, vflip=False, scale_aug=False,
                       max_steps=300, eval_interval=50, tta="none", val_split="train")
    raise ConfigError(f"unknown dataset {dataset!r}, expected loveda, potsdam, or toy")


_LIST_FIELDS = {"stage_dims", "stage_depths", "stage_heads", "sr_ratios",
                "patch_strides", "patch_kernels", "pos_grid"}


def _parse_value(name: str, raw: str, target_type):
    raw = raw.strip()
    try:
        if name in _LIST_FIELDS or target_type in (tuple, tuple[int, ...]):
            if not raw:
                return ()
            return tuple(int(v.strip()) for v in raw.split(","))
        if target_type is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {exc}") from exc


def load_config_file(path) -> tuple[ModelConfig, RunSpec]:
    """Parse a config file into (ModelConfig, RunSpec).

    ``[model] preset`` and ``[run] dataset`` select the baseline; every other
    key overrides one field. Unknown sections or keys raise ConfigError.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config file {path}: {exc}") from exc

    for section in parser.sections():
        if section not in ("model", "run"):
            raise ConfigError(f"unknown section [{section}] in {path}")

    run_keys = dict(parser["run"]) if parser.has_section("run") else {}
    dataset = run_keys.get("dataset", "toy").strip()
    run = default_run_spec(dataset)

    model_keys = dict(parser["model"]) if parser.has_section("model") else {}
    preset = model_keys.pop("preset", dataset if dataset != "toy" else "tiny").strip()
    cfg = default_config(preset)

    if parser.has_section("model"):
        filtered = {k: v for k, v in parser["model"].items() if k != "preset"}
        cfg = _apply_dict(cfg, filtered, "model")
    if parser.has_section("run"):
        run = _apply_dict(run, dict(parser["run"]), "run")
    require_valid(cfg)
    return cfg, run


def _apply_dict(obj, items: dict, section_name: str):
    by_name = {f.name: f for f in fields(obj)}
    updates = {}
    for key, raw in items.items():
        if key not in by_name:
            raise ConfigError(f"unknown key {key!r} in [{section_name}]")
        f = by_name[key]
        target = f.type
        if isinstance(target, str):
            if target == "int":
                target = int
            elif target == "float":
                target = float
            elif target == "bool":
                target = bool
            elif "tuple" in target:
                target = tuple
            else:
                target = str
        updates[key] = _parse_value(key, raw, target)
    return replace(obj, **updates)


def config_to_dict(cfg: ModelConfig) -> dict:
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def config_from_dict(data: dict) -> ModelConfig:
    kwargs = {}
    names = {f.name for f in fields(ModelConfig)}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"unknown model config key {key!r}")
        kwargs[key] = tuple(value) if isinstance(value, list) else value
    return ModelConfig(**kwargs)
