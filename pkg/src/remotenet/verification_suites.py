"""Runnable verification suites behind the `verify` CLI subcommand.

Each suite returns one PASS/FAIL line per checked property. They exercise the
real modules against the independent oracles in :mod:`remotenet.verification`.
"""

from __future__ import annotations

import numpy as np
import torch

from .config import ABLATIONS, default_config
from .decoder import WindowAttention
from .encoder import EfficientSelfAttention, attention_map, scaled_dot_attention
from .evaluation import ConfusionMatrix, metrics
from .network import build_network, make_variant
from .verification import (GradReport, SuiteResult, grad_check, metric_oracle,
                           param_count_oracle, randomize_for_check, reports_agree)

_PRESET_SHAPES = (("tiny", 64, 3), ("loveda", 512, 7), ("potsdam", 768, 6))


def _line(ok: bool, text: str) -> str:
    return f"{'PASS' if ok else 'FAIL'}: {text}"


def suite_shapes(seed: int = 0) -> SuiteResult:
    lines = []
    all_ok = True
    gen = torch.Generator().manual_seed(seed)
    for preset, size, k in _PRESET_SHAPES:
        cfg = default_config(preset)
        net = build_network(cfg, seed=seed).eval()
        x = torch.randn(1, 3, size, size, generator=gen)
        with torch.no_grad():
            feats = net.encoder.stage_features(x)
            logits = net(x)
        ok = tuple(logits.shape) == (1, k, size, size)
        expected_strides = (4, 8, 16, 32)
        for f, stride in zip(feats, expected_strides):
            ok &= f.stride_from_input == stride
            ok &= tuple(f.tensor.shape) == (1, cfg.stage_dims[f.stage_index - 1],
                                            size // stride, size // stride)
        all_ok &= ok
        lines.append(_line(ok, f"{preset} {size}x{size}: logits "
                               f"{tuple(logits.shape)}, encoder strides 4/8/16/32 "
                               f"widths {cfg.stage_dims}"))
    return SuiteResult("shapes", bool(all_ok), lines)


def suite_attention(seed: int = 0) -> SuiteResult:
    lines = []
    gen = torch.Generator().manual_seed(seed)
    dtype = torch.float64

    # softmax rows sum to 1
    q = torch.randn(2, 9, 8, generator=gen, dtype=dtype)
    k = torch.randn(2, 5, 8, generator=gen, dtype=dtype)
    weights = attention_map(q, k, heads=2, scale=0.5)
    row_err = float((weights.sum(-1) - 1.0).abs().max())
    ok_rows = row_err <= 1e-12
    lines.append(_line(ok_rows, f"attention rows sum to 1 (max err {row_err:.2e})"))

    # efficient SA with sr=1 equals dense attention over all tokens
    dim, heads = 16, 2
    esa = EfficientSelfAttention(dim, heads, sr_ratio=1, pos_grid=8).double()
    with torch.no_grad():
        esa.pos_bias.bias_table.zero_()
    x = torch.randn(1, dim, 6, 6, generator=gen, dtype=dtype)
    with torch.no_grad():
        got = esa(x)
        tokens = x.flatten(2).transpose(1, 2)
        q_t = esa.q(tokens)
        k_t, v_t = esa.kv(tokens).chunk(2, dim=-1)
        dense = esa.proj(scaled_dot_attention(q_t, k_t, v_t, heads, esa.scale))
        dense = dense.transpose(1, 2).reshape(1, dim, 6, 6)
    sr_err = float((got - dense).abs().max())
    ok_sr = sr_err <= 1e-6
    lines.append(_line(ok_sr, f"efficient SA sr=1 equals dense SA (max err {sr_err:.2e})"))

    # window attention with window >= map equals dense MHSA with the same bias
    win = WindowAttention(dim, window=8, heads=heads).double()
    x = torch.randn(1, dim, 5, 7, generator=gen, dtype=dtype)
    with torch.no_grad():
        got = win(x)
        tokens = x.flatten(2).transpose(1, 2)
        q_t, k_t, v_t = win.qkv(tokens).chunk(3, dim=-1)
        bias = win.pos_bias(5, 7, 5, 7, step=1)
        dense = win.proj(scaled_dot_attention(q_t, k_t, v_t, heads, win.scale, bias))
        dense = dense.transpose(1, 2).reshape(1, dim, 5, 7)
    win_err = float((got - dense).abs().max())
    ok_win = win_err <= 1e-6
    lines.append(_line(ok_win, f"window MHSA covering the map equals dense MHSA "
                               f"(max err {win_err:.2e})"))
    return SuiteResult("attention", ok_rows and ok_sr and ok_win, lines)


def suite_metrics(seed: int = 0, trials: int = 1000) -> SuiteResult:
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(trials):
        k = int(rng.integers(2, 6))
        h, w = int(rng.integers(2, 17)), int(rng.integers(2, 17))
        ref = rng.integers(0, k, size=(h, w)).astype(np.int64)
        ref[rng.random((h, w)) < 0.1] = 255
        pred = rng.integers(0, k, size=(h, w)).astype(np.int64)
        exclude = (k - 1,) if rng.random() < 0.3 else ()
        cm = ConfusionMatrix(k).update(pred, ref)
        if not reports_agree(metrics(cm, exclude),
                             metric_oracle(pred, ref, k, exclude)):
            mismatches += 1
    ok_rand = mismatches == 0
    lines = [_line(ok_rand, f"{trials} randomized cases: confusion-matrix metrics "
                            f"match the per-pixel oracle ({mismatches} mismatches)")]

    cm = ConfusionMatrix(2, np.array([[1, 1], [0, 2]], dtype=np.int64))
    rep = metrics(cm)
    ok_worked = (abs(rep.miou - 7 / 12) < 1e-12 and abs(rep.oa - 0.75) < 1e-12
                 and abs(rep.mean_f1 - 11 / 15) < 1e-12
                 and abs(rep.iou[0] - 0.5) < 1e-12 and abs(rep.iou[1] - 2 / 3) < 1e-12)
    lines.append(_line(ok_worked, "worked example [[1,1],[0,2]]: mIoU 7/12, "
                                  "OA 3/4, meanF1 11/15"))
    return SuiteResult("metrics", ok_rand and ok_worked, lines)


def suite_params(seed: int = 0) -> SuiteResult:
    lines = []
    all_ok = True
    for preset in ("tiny", "loveda", "potsdam"):
        cfg = default_config(preset)
        counts = {}
        for variant in ABLATIONS:
            net = make_variant(cfg, variant, seed=seed)
            actual = net.num_parameters()
            expected = param_count_oracle(cfg, variant)
            counts[variant] = actual
            ok = actual == expected
            all_ok &= ok
            lines.append(_line(ok, f"{preset}/{variant}: {actual} parameters "
                                   f"(oracle {expected})"))
        ordering = counts["full"] > counts["no_amm"] > counts["no_fusion"]
        all_ok &= ordering
        lines.append(_line(ordering, f"{preset}: full > no_amm > no_fusion ordering"))
    return SuiteResult("params", bool(all_ok), lines)


def suite_grads(seed: int = 0, tol: float = 1e-4) -> SuiteResult:
    cfg = default_config("tiny")
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(1, 3, 32, 32, generator=gen, dtype=torch.float64)
    labels = torch.randint(0, cfg.num_classes, (1, 32, 32), generator=gen)
    lines = []
    all_ok = True
    for variant in ABLATIONS:
        net = randomize_for_check(make_variant(cfg, variant, seed=seed).double())
        report: GradReport = grad_check(net, x, labels, tol=tol, seed=seed)
        all_ok &= report.passed
        lines.append(_line(report.passed, f"{variant}: {report.summary()}"))
    return SuiteResult("grads", bool(all_ok), lines)
