"""PSNR, SSIM and masked MSE, plus directory-level evaluation reports."""

from __future__ import annotations

import json
import math
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_SENTINEL = 99.0


def _pair(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"extent mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, max_val: float = 1.0) -> float:
    """``10 log10(max^2 / MSE)``; identical inputs give ``inf``."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val ** 2 / mse)


def table_value(x: float) -> float:
    return PSNR_SENTINEL if math.isinf(x) else x


def _to_planes(x) -> np.ndarray:
    # H x W -> 1 x H x W ; H x W x C -> C x H x W
    return x[None] if x.ndim == 2 else np.moveaxis(x, -1, 0)


def ssim(a, b, window: int = 7, K1: float = 0.01, K2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean SSIM over all valid ``window x window`` uniform windows, averaged over channels.

    Window statistics use population (1/N) variances.
    """
    a, b = _pair(a, b)
    if min(a.shape[:2]) < window:
        raise ValueError(f"image {a.shape[:2]} smaller than the {window}x{window} window")
    C1, C2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    vals = []
    for pa, pb in zip(_to_planes(a), _to_planes(b)):
        wa = sliding_window_view(pa, (window, window))
        wb = sliding_window_view(pb, (window, window))
        mu_a, mu_b = wa.mean(axis=(-2, -1)), wb.mean(axis=(-2, -1))
        var_a = (wa ** 2).mean(axis=(-2, -1)) - mu_a ** 2
        var_b = (wb ** 2).mean(axis=(-2, -1)) - mu_b ** 2
        cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
        s = ((2 * mu_a * mu_b + C1) * (2 * cov + C2)) / ((mu_a ** 2 + mu_b ** 2 + C1) * (var_a + var_b + C2))
        vals.append(s.mean())
    return float(np.mean(vals))


def masked_mse(a, b, M) -> float:
    a, b = _pair(a, b)
    M = np.asarray(M) > 0.5
    if not M.any():
        raise ValueError("empty mask")
    diff = (a - b) ** 2
    if diff.ndim == 3:
        diff = diff.mean(axis=-1)
    return float(diff[M].mean())


def masked_psnr(a, b, M, max_val: float = 1.0) -> float:
    mse = masked_mse(a, b, M)
    return math.inf if mse == 0.0 else 10.0 * math.log10(max_val ** 2 / mse)


class ReportError(Exception):
    pass


def _pngs(d):
    if not os.path.isdir(d):
        raise ReportError(f"missing directory: {d}")
    return sorted(f for f in os.listdir(d) if f.endswith(".png"))


def eval_report(pred_dir, gt_dir, masks_dir=None) -> dict:
    """Compare same-named PNGs. Masks (nonzero = inside) are optional."""
    from .scenes import load_png

    preds, gts = _pngs(pred_dir), _pngs(gt_dir)
    if len(preds) != len(gts):
        raise ReportError(f"count mismatch: {len(preds)} predictions, {len(gts)} ground truths")
    rows = []
    for name in preds:
        gt_path = os.path.join(gt_dir, name)
        if not os.path.exists(gt_path):
            raise ReportError(f"missing ground truth file: {name}")
        a, b = load_png(os.path.join(pred_dir, name)), load_png(gt_path)
        row = {"name": name, "psnr": table_value(psnr(a, b)), "ssim": ssim(a, b)}
        if masks_dir is not None:
            mpath = os.path.join(masks_dir, name)
            if not os.path.exists(mpath):
                raise ReportError(f"missing mask file: {name}")
            m = load_png(mpath)
            m = m.max(axis=-1) if m.ndim == 3 else m
            row["masked_mse"] = masked_mse(a, b, m)
        rows.append(row)
    keys = ["psnr", "ssim"] + (["masked_mse"] if masks_dir is not None else [])
    aggregate = {k: float(np.mean([r[k] for r in rows])) if rows else None for k in keys}
    return {"per_sample": rows, "aggregate": aggregate}


def write_report(report: dict, path):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
