"""Recomposition of generated layers for selective removal."""

from __future__ import annotations

import numpy as np

from .conditioning import MaskSet
from .diffusion import LayerSet, NoiseSchedule, generate_layers, scene_conditions
from .rng import DRng


def union_mask(masks) -> np.ndarray:
    arrays = masks.masks if isinstance(masks, MaskSet) else [np.asarray(m, dtype=np.float64) for m in masks]
    if len(arrays) == 0:
        raise ValueError("union of zero masks")
    if len({np.shape(m) for m in arrays}) != 1:
        raise ValueError("mask extents disagree")
    return np.max(np.stack(arrays), axis=0)


def parse_removal(text: str, n: int) -> set:
    """``"1,3"`` -> {1, 3}; ``"all"`` -> every index; ``""`` -> empty set."""
    text = (text or "").strip()
    if text.lower() == "all":
        return set(range(1, n + 1))
    if not text:
        return set()
    try:
        removal = {int(tok) for tok in text.split(",") if tok.strip()}
    except ValueError:
        raise ValueError(f"bad removal list {text!r}") from None
    return check_removal(removal, n)


def check_removal(removal, n: int) -> set:
    removal = set(int(k) for k in removal)
    bad = sorted(k for k in removal if not 1 <= k <= n)
    if bad:
        raise ValueError(f"removal indices {bad} outside 1..{n}")
    return removal


def compose(layers: LayerSet, removal=()) -> np.ndarray:
    """Painter's composite: start from the background, paint each kept layer inside its
    mask in back-to-front order. Equals the mask-weighted sum when masks are disjoint."""
    removal = check_removal(removal, len(layers))
    out = np.array(layers.background, dtype=np.float64, copy=True)
    for k in layers.masks.depth_order:
        if k in removal:
            continue
        sel = layers.masks[k] > 0
        out[sel] = np.asarray(layers.layers[k - 1])[sel]
    return out


def erase(sample, removal, model, schedule: NoiseSchedule, rng: DRng, n_steps: int = 25):
    """Generate all layers for ``sample`` and compose without the instances in ``removal``.

    Returns ``(image, layer_set)``.
    """
    layer_set = generate_layers(sample.masks, scene_conditions(model, sample), model, schedule, rng, n_steps)
    return compose(layer_set, removal), layer_set
