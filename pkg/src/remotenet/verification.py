"""Independent oracles: finite-difference gradient checks, per-pixel metric
recomputation, closed-form parameter counts, and the verification driver.

Everything here deliberately avoids the code paths it checks: gradients come
from central differences of the loss, metrics from an explicit pixel loop,
and parameter counts from layer-shape arithmetic on the config alone.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
from torch.func import functional_call, vmap

from .config import (ABLATIONS, IGNORE_INDEX, ModelConfig, default_config)
from .encoder import finite_checks
from .evaluation import MetricsReport
from .exceptions import NumericError
from .training import cross_entropy


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    coords: int


@dataclass
class GradReport:
    entries: list[GradCheckEntry]
    tol: float

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e.max_rel_err <= self.tol for e in self.entries)

    def failures(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if e.max_rel_err > self.tol]

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        worst = max(self.entries, key=lambda e: e.max_rel_err, default=None)
        detail = f" worst {worst.name} rel_err {worst.max_rel_err:.3e}" if worst else ""
        return (f"grad_check {status}: {len(self.entries)} parameters at "
                f"tol {self.tol:g}{detail}")


def _rel_err(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def randomize_for_check(net: torch.nn.Module, seed: int = 123,
                        scale: float = 0.25) -> torch.nn.Module:
    """Move parameters off the production init to a generic check point.

    At the training init the deep decoder parameters get gradients around
    1e-10, below what central differences at h=1e-5 can resolve in double
    precision; uniform noise of this scale keeps activations sane while
    giving the loss measurable sensitivity to every layer.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in net.parameters():
            p.add_(torch.empty_like(p).uniform_(-scale, scale, generator=gen))
    return net


# Below this analytic magnitude a coordinate's central difference at h=1e-5
# is dominated by float64 rounding of the loss (|L+ - L-| noise ~1e-11), so
# sampling prefers coordinates the oracle can actually resolve.
RESOLVABLE_GRAD = 1e-6


def grad_check(net: torch.nn.Module, x: torch.Tensor, labels: torch.Tensor,
               h: float = 1e-5, tol: float = 1e-4, coords_per_param: int = 8,
               seed: int = 0, batch_rows: int = 64,
               use_vmap: bool = True) -> GradReport:
    """Compare autograd gradients against central finite differences.

    Runs in double precision with normalization statistics frozen (eval mode).
    At least ``coords_per_param`` coordinates are sampled per parameter (all
    of them for small tensors), drawn among entries whose analytic magnitude
    central differences can resolve; parameters without enough such entries
    fall back to their largest-magnitude coordinates. The finite-difference
    sweeps are batched with vmap over perturbed parameter sets; set
    ``use_vmap=False`` for the plain serial loop.
    """
    net = net.double().eval()
    x = x.double()

    named = [(n, p) for n, p in net.named_parameters() if p.requires_grad]
    net.zero_grad(set_to_none=True)
    loss = cross_entropy(net(x), labels)
    if not torch.isfinite(loss):
        raise NumericError("loss is non-finite at the gradient-check point")
    loss.backward()
    analytic = {n: p.grad.detach().clone() for n, p in named}

    rng = np.random.default_rng(seed)
    tasks: list[tuple[str, np.ndarray]] = []
    for name, p in named:
        n = p.numel()
        count = min(coords_per_param, n)
        mags = analytic[name].abs().reshape(-1).cpu().numpy()
        eligible = np.flatnonzero(mags >= RESOLVABLE_GRAD)
        if len(eligible) >= count:
            idx = rng.choice(eligible, size=count, replace=False)
        else:
            # every resolvable entry plus the largest of the rest
            rest = np.argsort(mags)[::-1]
            rest = rest[~np.isin(rest, eligible)][:count - len(eligible)]
            idx = np.concatenate([eligible, rest]).astype(np.int64)
        tasks.append((name, np.sort(idx)))

    base = {n: p.detach().clone() for n, p in named}
    buffers = {n: b.detach().clone() for n, b in net.named_buffers()}
    labels = labels.detach()

    def loss_at(params: dict[str, torch.Tensor]) -> torch.Tensor:
        out = functional_call(net, {**params, **buffers}, (x,))
        return cross_entropy(out, labels, validate=False)

    flat_jobs = [(name, int(i)) for name, idx in tasks for i in idx]
    numeric = np.empty(len(flat_jobs), dtype=np.float64)

    if use_vmap:
        with finite_checks(False), torch.no_grad():
            rows_per_job = 2  # +h and -h
            jobs_per_chunk = max(1, batch_rows // rows_per_job)
            for start in range(0, len(flat_jobs), jobs_per_chunk):
                chunk = flat_jobs[start:start + jobs_per_chunk]
                rows = len(chunk) * 2
                batched = {n: t.unsqueeze(0).expand(rows, *t.shape).clone()
                           for n, t in base.items()}
                for j, (name, flat_idx) in enumerate(chunk):
                    view = batched[name].reshape(rows, -1)
                    view[2 * j, flat_idx] += h
                    view[2 * j + 1, flat_idx] -= h
                losses = vmap(loss_at)(batched).cpu().numpy()
                numeric[start:start + len(chunk)] = \
                    (losses[0::2] - losses[1::2]) / (2.0 * h)
    else:
        with torch.no_grad():
            for j, (name, flat_idx) in enumerate(flat_jobs):
                flat = base[name].reshape(-1)
                original = flat[flat_idx].item()
                flat[flat_idx] = original + h
                plus = float(loss_at(base))
                flat[flat_idx] = original - h
                minus = float(loss_at(base))
                flat[flat_idx] = original
                numeric[j] = (plus - minus) / (2.0 * h)

    entries = []
    cursor = 0
    for name, idx in tasks:
        count = len(idx)
        a = analytic[name].reshape(-1)[torch.from_numpy(idx)].cpu().numpy()
        n_vals = numeric[cursor:cursor + count]
        cursor += count
        entries.append(GradCheckEntry(name, float(_rel_err(a, n_vals).max()), count))
    return GradReport(entries, tol)


# ---------------------------------------------------------------------------
# Per-pixel metric oracle (no confusion matrix anywhere in this path)
# ---------------------------------------------------------------------------

def metric_oracle(pred: np.ndarray, ref: np.ndarray, num_classes: int,
                  exclude: Sequence[int] = ()) -> MetricsReport:
    """Recompute every metric by looping over pixels and counting directly."""
    k = num_classes
    excluded = tuple(sorted(set(int(e) for e in exclude)))
    tp = [0] * k
    fp = [0] * k
    fn = [0] * k
    correct = 0
    total = 0
    for p, r in zip(pred.ravel().tolist(), ref.ravel().tolist()):
        if r == IGNORE_INDEX:
            continue
        if p == r:
            tp[p] += 1
        else:
            fp[p] += 1
            fn[r] += 1
        if r not in excluded:
            total += 1
            if p == r:
                correct += 1

    iou: list[Optional[float]] = []
    f1: list[Optional[float]] = []
    for i in range(k):
        denom = tp[i] + fp[i] + fn[i]
        if denom == 0:
            iou.append(None)
            f1.append(None)
        else:
            iou.append(tp[i] / denom)
            f1.append(2.0 * tp[i] / (2.0 * tp[i] + fp[i] + fn[i]))
    keep = [i for i in range(k) if i not in excluded and iou[i] is not None]
    miou = sum(iou[i] for i in keep) / len(keep) if keep else None
    mean_f1 = sum(f1[i] for i in keep) / len(keep) if keep else None
    oa = correct / total if total else None
    return MetricsReport(iou, f1, miou, mean_f1, oa, excluded)


def reports_agree(a: MetricsReport, b: MetricsReport, tol: float = 1e-12) -> bool:
    def close(u: Optional[float], v: Optional[float]) -> bool:
        if u is None or v is None:
            return u is None and v is None
        return abs(u - v) <= tol

    return (all(close(u, v) for u, v in zip(a.iou, b.iou))
            and all(close(u, v) for u, v in zip(a.f1, b.f1))
            and close(a.miou, b.miou) and close(a.mean_f1, b.mean_f1)
            and close(a.oa, b.oa))


# ---------------------------------------------------------------------------
# Closed-form parameter counts
# ---------------------------------------------------------------------------

def _conv(cin: int, cout: int, k: int, bias: bool = True) -> int:
    return cin * cout * k * k + (cout if bias else 0)


def _dwconv(ch: int, k: int, bias: bool = True) -> int:
    return ch * k * k + (ch if bias else 0)


def _linear(fin: int, fout: int) -> int:
    return fin * fout + fout


def _norm(ch: int) -> int:
    return 2 * ch


def _mix_ffn(dim: int, expansion: int) -> int:
    hidden = dim * expansion
    return _conv(dim, hidden, 1) + _dwconv(hidden, 3) + _conv(hidden, dim, 1)


def amm_param_count(cfg: ModelConfig) -> int:
    d = cfg.decoder_dim
    per_site = _conv(d, d, 1) * (2 if cfg.amm_per_branch else 1)
    return 3 * per_site


def frm_branch3_param_count(cfg: ModelConfig) -> int:
    d = cfg.decoder_dim
    return _conv(d, d, 1)


def param_count_oracle(cfg: ModelConfig, variant: Optional[str] = None) -> int:
    """Total trainable parameters from layer-shape formulas on the config."""
    if variant is not None:
        cfg = replace(cfg, ablation=variant)
    assert cfg.ablation in ABLATIONS
    total = 0

    # encoder stages
    in_ch = 3
    for i in range(4):
        dim = cfg.stage_dims[i]
        heads = cfg.stage_heads[i]
        sr = cfg.sr_ratios[i]
        grid = cfg.pos_grid[i]
        total += _conv(in_ch, dim, cfg.patch_kernels[i]) + _norm(dim)  # patch embed
        block = (_norm(dim)                                   # pre-attention norm
                 + _linear(dim, dim)                          # q
                 + _linear(dim, 2 * dim)                      # kv
                 + _linear(dim, dim)                          # proj
                 + ((_conv(dim, dim, sr) + _norm(dim)) if sr > 1 else 0)
                 + (2 * grid - 1) ** 2 * heads                # positional table
                 + _norm(dim)                                 # pre-FFN norm
                 + _mix_ffn(dim, cfg.ffn_expansion))
        total += cfg.stage_depths[i] * block
        total += _norm(dim)                                   # stage-final norm
        in_ch = dim

    d = cfg.decoder_dim
    total += sum(_conv(s, d, 1) for s in cfg.stage_dims)      # per-scale projections

    w = cfg.window_size
    gltb = (_norm(d)                                          # BN before attention
            + _linear(d, 3 * d) + _linear(d, d)               # window qkv + proj
            + (2 * w - 1) ** 2 * cfg.decoder_heads            # window bias table
            + _conv(d, d, 1, bias=False) + _norm(d)           # local 1x1 + BN
            + _conv(d, d, 3, bias=False) + _norm(d)           # local 3x3 + BN
            + _conv(d, d, 5, bias=False) + _norm(d)           # local 5x5 + BN
            + _dwconv(d, 3, bias=False) + _conv(d, d, 1)      # depthwise separable
            + _norm(d)                                        # BN before FFN
            + _mix_ffn(d, cfg.ffn_expansion))
    total += 3 * cfg.gltb_per_scale * gltb

    if cfg.ablation != "no_fusion":
        fusion_site = (_conv(d, d, 1) + _conv(d, d, 1)        # branch 1x1 convs
                       + _conv(d, d, 3, bias=False) + _norm(d))  # post conv + BN
        total += 3 * fusion_site
        if cfg.ablation != "no_amm":
            total += amm_param_count(cfg)

    if cfg.ablation != "no_frm":
        total += (_dwconv(d, 3) + _dwconv(d, 5)               # branches 1, 2
                  + _conv(2 * d, d, 1)                        # concat merge
                  + _conv(d, d, 3, bias=False) + _norm(d))    # post conv + BN
        if cfg.ablation != "frm_two_branch":
            total += frm_branch3_param_count(cfg)             # branch 3

    total += _conv(d, cfg.num_classes, 1)                     # segmentation head
    return total


# ---------------------------------------------------------------------------
# Verification driver (used by the CLI `verify` subcommand)
# ---------------------------------------------------------------------------

@dataclass
class SuiteResult:
    name: str
    passed: bool
    lines: list[str]


SUITES = ("shapes", "attention", "metrics", "params", "grads")


def run_verification(suites: Iterable[str] = SUITES, seed: int = 0) -> list[SuiteResult]:
    from . import verification_suites

    results = []
    for name in suites:
        if name not in SUITES:
            from .exceptions import ConfigError

            raise ConfigError(f"unknown verification suite {name!r}; "
                              f"known: {SUITES}")
        runner = getattr(verification_suites, f"suite_{name}")
        results.append(runner(seed=seed))
    return results
