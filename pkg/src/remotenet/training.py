"""Loss, optimizer, LR schedule, checkpointing, and the training loop."""

from __future__ import annotations

import csv
import logging
import math
import os
import shutil
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import (IGNORE_INDEX, ModelConfig, RunSpec, config_from_dict,
                     config_to_dict, require_valid)
from .data import AugmentSpec, Sample, augment, collate
from .exceptions import (CheckpointError, ConfigError, DataError,
                         DivergenceError, NumericError, ShapeError)
from .network import RemoteNet, build_network
from .params import ParamStore

log = logging.getLogger("remotenet.train")

CHECKPOINT_FORMAT = "remotenet-checkpoint"
CHECKPOINT_VERSION = 1


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor,
                  ignore_index: int = IGNORE_INDEX,
                  validate: bool = True) -> torch.Tensor:
    """Mean of -log softmax(logits)[label] over non-ignored pixels.

    With zero valid pixels the loss (and its gradient) is exactly 0. The
    ``validate`` flag exists for the gradient checker, whose vmapped sweeps
    cannot run data-dependent checks.
    """
    if logits.ndim != 4:
        raise ShapeError(f"logits must be [B, K, H, W], got {tuple(logits.shape)}")
    if labels.shape != (logits.shape[0], logits.shape[2], logits.shape[3]):
        raise ShapeError(f"labels {tuple(labels.shape)} do not align with logits "
                         f"{tuple(logits.shape)}")
    if validate:
        num_classes = logits.shape[1]
        bad = (labels != ignore_index) & ((labels < 0) | (labels >= num_classes))
        if bool(bad.any()):
            raise DataError(f"label values outside [0, {num_classes}) + ignore")
    total = F.cross_entropy(logits, labels, ignore_index=ignore_index,
                            reduction="sum")
    valid = (labels != ignore_index).sum()
    return total / valid.clamp(min=1)


def adamw_step(param: torch.Tensor, grad: torch.Tensor,
               m: torch.Tensor, v: torch.Tensor, t: int, lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.0):
    """One decoupled-weight-decay adaptive-moment update; ``t`` is 1-based."""
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new_param = param - lr * m_hat / (v_hat.sqrt() + eps) - lr * weight_decay * param
    return new_param, m, v


class AdamW:
    """Decoupled-weight-decay Adam over a model's trainable parameters."""

    def __init__(self, model: nn.Module, weight_decay: float = 0.01,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: torch.zeros_like(p) for n, p in self.named}
        self.v = {n: torch.zeros_like(p) for n, p in self.named}

    def zero_grad(self) -> None:
        for _, p in self.named:
            p.grad = None

    @torch.no_grad()
    def step(self, lr: float) -> None:
        self.t += 1
        for name, p in self.named:
            grad = p.grad
            if grad is None:
                grad = torch.zeros_like(p)
            elif not torch.isfinite(grad).all():
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            new_p, m, v = adamw_step(p, grad, self.m[name], self.v[name], self.t,
                                     lr, self.beta1, self.beta2, self.eps,
                                     self.weight_decay)
            p.copy_(new_p)
            self.m[name], self.v[name] = m, v

    def moments_store(self) -> ParamStore:
        store = ParamStore()
        for name, _ in self.named:
            store.add(f"optim.m.{name}", self.m[name], False)
            store.add(f"optim.v.{name}", self.v[name], False)
        return store

    def load_moments(self, store: ParamStore, t: int) -> None:
        for name, p in self.named:
            for prefix, target in (("optim.m.", self.m), ("optim.v.", self.v)):
                key = prefix + name
                if key not in store:
                    raise CheckpointError(f"optimizer state missing entry {key!r}")
                entry = store[key]
                if entry.shape != tuple(p.shape):
                    raise CheckpointError(f"optimizer state shape mismatch for {key!r}")
                target[name] = entry.values.to(p.dtype).clone()
        self.t = int(t)


def cosine_lr(t: int, total: int, lr_base: float, lr_min: float = 0.0) -> float:
    """Cosine annealing from lr_base at t=0 down to lr_min at t=total."""
    if total <= 0:
        raise ConfigError(f"total steps must be positive, got {total}")
    if t < 0 or t > total:
        raise ConfigError(f"step {t} outside [0, {total}]")
    return lr_min + 0.5 * (lr_base - lr_min) * (1.0 + math.cos(math.pi * t / total))


# ---------------------------------------------------------------------------
# Checkpoints: directory with `manifest` (text index), `tensors.bin`
# (little-endian float32, concatenated in manifest order), and `meta`
# (config + run state). Round-trips byte-identically.
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    model: ParamStore
    cfg: ModelConfig
    state: dict[str, str] = field(default_factory=dict)
    optim: Optional[ParamStore] = None


def _entry_bytes(values: torch.Tensor) -> bytes:
    return np.ascontiguousarray(
        values.detach().cpu().to(torch.float32).numpy()).astype("<f4").tobytes()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically: build a temp directory, then rename into place."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)

    manifest_lines = [f"{CHECKPOINT_FORMAT} {CHECKPOINT_VERSION}"]
    blob = bytearray()

    def append_store(store: ParamStore, prefix: str) -> None:
        for name, entry in store.items():
            data = _entry_bytes(entry.values)
            shape = ",".join(str(d) for d in entry.shape) if entry.shape else "-"
            manifest_lines.append(
                f"tensor {prefix}{name} float32 {shape} {len(blob)} "
                f"{zlib.crc32(data)} {int(entry.requires_grad)}")
            blob.extend(data)

    append_store(ckpt.model, "")
    if ckpt.optim is not None:
        append_store(ckpt.optim, "")

    (tmp / "manifest").write_text("\n".join(manifest_lines) + "\n")
    (tmp / "tensors.bin").write_bytes(bytes(blob))

    meta_lines = ["[checkpoint]"]
    meta_lines.append(f"format = {CHECKPOINT_FORMAT}")
    meta_lines.append(f"version = {CHECKPOINT_VERSION}")
    meta_lines.append("")
    meta_lines.append("[model]")
    for key, value in config_to_dict(ckpt.cfg).items():
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        meta_lines.append(f"{key} = {value}")
    meta_lines.append("")
    meta_lines.append("[state]")
    for key in sorted(ckpt.state):
        meta_lines.append(f"{key} = {ckpt.state[key]}")
    (tmp / "meta").write_text("\n".join(meta_lines) + "\n")

    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    manifest_path = path / "manifest"
    if not manifest_path.is_file():
        raise CheckpointError(f"no checkpoint manifest at {path}")
    lines = manifest_path.read_text().splitlines()
    if not lines or not lines[0].startswith(CHECKPOINT_FORMAT):
        raise CheckpointError(f"unrecognized checkpoint format in {manifest_path}")
    version = lines[0].split()[-1]
    if version != str(CHECKPOINT_VERSION):
        raise CheckpointError(f"unsupported checkpoint version {version}")

    blob = (path / "tensors.bin").read_bytes()
    model_store, optim_store = ParamStore(), ParamStore()
    for line in lines[1:]:
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 7 or parts[0] != "tensor":
            raise CheckpointError(f"malformed manifest line: {line!r}")
        _, name, dtype, shape_s, offset_s, crc_s, grad_s = parts
        if dtype != "float32":
            raise CheckpointError(f"unsupported dtype {dtype!r} for {name!r}")
        shape = () if shape_s == "-" else tuple(int(d) for d in shape_s.split(","))
        count = 1
        for d in shape:
            count *= d
        offset = int(offset_s)
        raw = blob[offset:offset + 4 * count]
        if len(raw) != 4 * count:
            raise CheckpointError(f"tensors.bin truncated at entry {name!r}")
        if zlib.crc32(raw) != int(crc_s):
            raise CheckpointError(f"checksum mismatch for entry {name!r}")
        values = torch.from_numpy(
            np.frombuffer(raw, dtype="<f4").copy().reshape(shape))
        target = optim_store if name.startswith("optim.") else model_store
        target.add(name, values, grad_s == "1")

    import configparser

    parser = configparser.ConfigParser()
    try:
        parser.read_string((path / "meta").read_text())
    except configparser.Error as exc:
        raise CheckpointError(f"cannot parse checkpoint meta: {exc}") from exc
    model_section = dict(parser["model"]) if parser.has_section("model") else {}
    cfg_dict = {}
    for key, raw in model_section.items():
        if "," in raw:
            cfg_dict[key] = [int(v) for v in raw.split(",")]
        elif raw in ("True", "False"):
            cfg_dict[key] = raw == "True"
        else:
            try:
                cfg_dict[key] = int(raw)
            except ValueError:
                cfg_dict[key] = raw
    cfg = config_from_dict(cfg_dict)
    state = dict(parser["state"]) if parser.has_section("state") else {}
    return Checkpoint(model_store, cfg,
                      state=state,
                      optim=optim_store if len(optim_store) else None)


@dataclass
class TrainResult:
    epochs_run: int
    global_step: int
    step_losses: list[float]
    epoch_losses: list[float]
    val_scores: list[tuple[int, float]]
    out_dir: Path


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    # stateless derivation makes resume-from-epoch-boundary bit-exact
    return np.random.default_rng([seed, epoch])


def train(cfg: ModelConfig, run: RunSpec, train_samples: list[Sample],
          val_samples: Optional[list[Sample]] = None,
          resume: Optional[str] = None) -> TrainResult:
    """Run the full optimization loop and write checkpoints + metric log.

    Single-worker runs with a fixed seed are bit-reproducible: shuffling and
    augmentation draw from a generator derived from (seed, epoch), the model
    init is seeded, and checkpoints restore optimizer state exactly.
    """
    require_valid(cfg)
    if not train_samples:
        raise DataError("no training samples")
    out_dir = Path(run.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    handler = logging.FileHandler(out_dir / "train.log", mode="a")
    handler.setFormatter(logging.Formatter("%(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    try:
        return _train_inner(cfg, run, train_samples, val_samples, resume, out_dir)
    finally:
        log.removeHandler(handler)
        handler.close()


def _train_inner(cfg, run, train_samples, val_samples, resume, out_dir):
    from .evaluation import TtaSpec, evaluate

    log.info(run.echo())
    log.info("model_config %s", config_to_dict(cfg))
    log.info("ablation_variant %s", cfg.ablation)

    n = len(train_samples)
    steps_per_epoch = max(1, math.ceil(n / run.batch_size))
    # scheduler horizon stays epochs x steps-per-epoch; max_steps caps
    # execution only, so an interrupted run keeps the same LR trajectory
    total_steps = run.epochs * steps_per_epoch
    if total_steps <= 0:
        raise ConfigError("run would take zero optimizer steps")

    model = build_network(cfg, seed=run.seed)
    optimizer = AdamW(model, weight_decay=run.weight_decay, beta1=run.beta1,
                      beta2=run.beta2, eps=run.eps)
    start_epoch = 0
    global_step = 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if config_to_dict(ckpt.cfg) != config_to_dict(cfg):
            raise CheckpointError("checkpoint config does not match the run config")
        ckpt.model.load_into(model)
        if ckpt.optim is None:
            raise CheckpointError("checkpoint has no optimizer state; cannot resume")
        optimizer.load_moments(ckpt.optim, int(ckpt.state.get("optim_t", 0)))
        start_epoch = int(ckpt.state.get("epoch", -1)) + 1
        global_step = int(ckpt.state.get("global_step", 0))
        log.info("resumed from %s at epoch %d step %d", resume, start_epoch, global_step)

    aug_spec = AugmentSpec(
        hflip=run.hflip, vflip=run.vflip,
        scale_range=(run.scale_min, run.scale_max) if run.scale_aug else (1.0, 1.0),
        crop=run.crop)

    def snapshot(extra: dict[str, str]) -> Checkpoint:
        state = {
            "epoch": extra["epoch"],
            "global_step": str(global_step),
            "optim_t": str(optimizer.t),
            "seed": str(run.seed),
            "lr": repr(run.lr),
            "lr_min": repr(run.lr_min),
            "weight_decay": repr(run.weight_decay),
            "total_steps": str(total_steps),
            "norm_mean": repr(run.norm_mean),
            "norm_std": repr(run.norm_std),
        }
        state.update(extra)
        return Checkpoint(ParamStore.from_model(model), cfg, state=state,
                          optim=optimizer.moments_store())

    metrics_path = out_dir / "metrics.csv"
    if start_epoch == 0 or not metrics_path.exists():
        with open(metrics_path, "w", newline="") as fh:
            csv.writer(fh).writerow(["epoch", "mean_loss", "lr", "val_miou"])

    step_losses: list[float] = []
    epoch_losses: list[float] = []
    val_scores: list[tuple[int, float]] = []
    best_score = -1.0
    done = False
    epoch = start_epoch - 1

    for epoch in range(start_epoch, run.epochs):
        model.train()
        rng = _epoch_rng(run.seed, epoch)
        order = rng.permutation(n)
        losses_this_epoch = []
        lr = run.lr
        for b in range(0, n, run.batch_size):
            batch_idx = order[b:b + run.batch_size]
            batch = [augment(train_samples[i], aug_spec, rng) for i in batch_idx]
            images, labels = collate(batch, run.norm_mean, run.norm_std)
            logits = model(images)
            loss = cross_entropy(logits, labels)
            loss_value = float(loss.detach())
            if not math.isfinite(loss_value):
                save_checkpoint(out_dir / "diverged.ckpt",
                                snapshot({"epoch": str(epoch), "diverged": "1"}))
                raise DivergenceError(
                    f"loss became non-finite at epoch {epoch} step {global_step}; "
                    f"diagnostic checkpoint written to {out_dir / 'diverged.ckpt'}")
            optimizer.zero_grad()
            loss.backward()
            if run.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), run.grad_clip)
            lr = cosine_lr(min(global_step, total_steps), total_steps, run.lr, run.lr_min)
            optimizer.step(lr)
            step_losses.append(loss_value)
            losses_this_epoch.append(loss_value)
            global_step += 1
            if run.max_steps and global_step >= run.max_steps:
                done = True
                break

        mean_loss = float(np.mean(losses_this_epoch)) if losses_this_epoch else math.nan
        epoch_losses.append(mean_loss)

        val_miou = ""
        if val_samples and ((epoch + 1) % max(run.eval_interval, 1) == 0 or done
                            or epoch == run.epochs - 1):
            model.eval()
            report, _ = evaluate(model, val_samples, cfg.num_classes,
                                 tta=TtaSpec.parse("none"),
                                 window=run.eval_window, stride=run.eval_stride,
                                 mean=run.norm_mean, std=run.norm_std,
                                 exclude=run.metric_exclude)
            score = report.miou if report.miou is not None else 0.0
            val_scores.append((epoch, score))
            val_miou = f"{score:.6f}"
            if score > best_score:
                best_score = score
                save_checkpoint(out_dir / "best.ckpt", snapshot({"epoch": str(epoch)}))
            model.train()

        log.info("epoch %d mean_loss %.6f lr %.8g val_miou %s",
                 epoch, mean_loss, lr, val_miou or "n/a")
        with open(metrics_path, "a", newline="") as fh:
            csv.writer(fh).writerow([epoch, f"{mean_loss:.6f}", f"{lr:.8g}", val_miou])
        save_checkpoint(out_dir / "last.ckpt", snapshot({"epoch": str(epoch)}))
        if done:
            break

    return TrainResult(epoch + 1 - start_epoch, global_step, step_losses,
                       epoch_losses, val_scores, out_dir)
