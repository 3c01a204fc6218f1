"""Noise schedule, forward noising, deterministic DDIM and layer generation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .conditioning import ConditionSequence, MaskSet
from .rng import DRng


@dataclass
class NoiseSchedule:
    beta: np.ndarray

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.alpha = 1.0 - self.beta
        self.alpha_bar = np.cumprod(self.alpha)

    @property
    def T(self) -> int:
        return len(self.beta)


def make_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 2e-2) -> NoiseSchedule:
    """Linear beta schedule over ``T`` steps."""
    if T < 1:
        raise ValueError("need at least one timestep")
    if not 0 < beta_min <= beta_max < 1:
        raise ValueError(f"invalid beta bounds ({beta_min}, {beta_max})")
    return NoiseSchedule(np.linspace(beta_min, beta_max, T))


def add_noise(z0, t: int, eps, schedule: NoiseSchedule):
    """``sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``. Works on arrays or tensors."""
    if not 0 <= t < schedule.T:
        raise ValueError(f"timestep {t} outside [0, {schedule.T})")
    ab = schedule.alpha_bar[t]
    return _noise(z0, eps, ab)


def _noise(z0, eps, ab):
    a, b = np.sqrt(ab), np.sqrt(1.0 - ab)
    if isinstance(z0, T.Tensor) or isinstance(eps, T.Tensor):
        return T.as_tensor(z0) * a + T.as_tensor(eps) * b
    return a * np.asarray(z0) + b * np.asarray(eps)


def ddim_timesteps(T_total: int, n_steps: int) -> np.ndarray:
    """Evenly strided, descending: ``floor((i + 1) T / n) - 1`` for ``i = n-1 .. 0``."""
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    if n_steps > T_total:
        raise ValueError("n_steps exceeds the schedule length")
    return ((np.arange(n_steps) + 1) * T_total // n_steps - 1)[::-1]


def ddim_loop(eps_fn, schedule: NoiseSchedule, n_steps: int, z_T: np.ndarray,
              clip=None, shift=0.0) -> np.ndarray:
    """Deterministic (eta = 0) DDIM from ``z_T``; ``eps_fn(z, t)`` returns an array.

    With ``clip=(lo, hi)`` the predicted clean latent is clamped to
    ``[lo, hi] + shift`` and the noise estimate is recomputed from it.
    """
    ts = ddim_timesteps(schedule.T, n_steps)
    z = np.asarray(z_T, dtype=np.float64)
    for i, t in enumerate(ts):
        ab = schedule.alpha_bar[t]
        ab_next = schedule.alpha_bar[ts[i + 1]] if i + 1 < len(ts) else 1.0
        eps = np.asarray(eps_fn(z, int(t)), dtype=np.float64)
        z0 = (z - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
        if clip is not None:
            z0 = np.clip(z0 - shift, clip[0], clip[1]) + shift
            eps = (z - np.sqrt(ab) * z0) / np.sqrt(1.0 - ab)
        z = np.sqrt(ab_next) * z0 + np.sqrt(1.0 - ab_next) * eps
    return z


def ddim_sample(model, schedule: NoiseSchedule, n_steps: int, C, branch: str, mask, rng: DRng,
                shape=None, clip=None) -> np.ndarray:
    """Sample one latent. ``model`` is a Denoiser or any callable ``(z, t) -> eps``."""
    if hasattr(model, "predict_noise"):
        shape = model.latent_shape if shape is None else shape

        def eps_fn(z, t):
            with T.no_grad():
                return model.predict_noise(z, t, C, branch, mask).data
    else:
        if shape is None:
            raise ValueError("shape is required for a plain callable model")
        eps_fn = model
    z_T = T.randn(shape, rng).data
    return ddim_loop(eps_fn, schedule, n_steps, z_T, clip)


def image_to_model(img_hwc) -> np.ndarray:
    """``H x W x C`` image in [0, 1] -> ``C x H x W`` in [-1, 1]."""
    return 2.0 * np.moveaxis(np.asarray(img_hwc, dtype=np.float64), -1, -3) - 1.0


def model_to_image(x_chw) -> np.ndarray:
    return np.clip((np.moveaxis(np.asarray(x_chw, dtype=np.float64), -3, -1) + 1.0) / 2.0, 0.0, 1.0)


@dataclass
class LayerSet:
    layers: list
    background: np.ndarray
    masks: MaskSet

    def __post_init__(self):
        if len(self.layers) < 1 or len(self.layers) != len(self.masks):
            raise ValueError("a LayerSet needs one layer per mask and at least one layer")
        shapes = {np.shape(x) for x in self.layers} | {np.shape(self.background)}
        if len(shapes) != 1:
            raise ValueError(f"layer extents disagree: {shapes}")

    def __len__(self):
        return len(self.layers)


def _stack_tokens(conds) -> T.Tensor:
    return T.concat([T.reshape(c.tokens, (1,) + c.tokens.shape) for c in conds], axis=0)


def generate_layers(masks: MaskSet, conditions, model, schedule: NoiseSchedule, rng: DRng,
                    n_steps: int = 25, clip=(-1.0, 1.0)) -> LayerSet:
    """Sample every foreground layer and the background layer.

    ``conditions`` is ``(fg_list, bg)``. Foreground branch ``k`` starts from
    ``rng.spawn("fg", k)`` noise, the background from ``rng.spawn("bg")``.
    Predicted clean latents are clamped to the image range unless ``clip=None``.
    """
    fg_conds, bg_cond = conditions
    if len(fg_conds) != len(masks):
        raise ValueError(f"{len(fg_conds)} foreground conditions for {len(masks)} masks")
    den = model.denoiser if hasattr(model, "denoiser") else model
    N = len(masks)
    union = masks.union()
    z_fg = np.stack([T.randn(den.latent_shape, rng.spawn("fg", k)).data for k in range(1, N + 1)])
    z_bg = T.randn(den.latent_shape, rng.spawn("bg")).data[None]
    with T.no_grad():
        cf, cb = _stack_tokens(fg_conds), _stack_tokens([bg_cond])
        tm_fg, tm_bg = masks.masks, union[None]
        # the model learns offset-shifted latents; undo the shift before decoding
        offset = den.inject_spatial_offsets(np.zeros(den.latent_shape), union).data

        if den.cfg.layer_exchange:
            def eps_fn(z, t):
                ef, eb = den.predict_noise_exchange(z[:N], z[N:], t, t, cf, cb, tm_fg, tm_bg)
                return np.concatenate([ef.data, eb.data])
            z = ddim_loop(eps_fn, schedule, n_steps, np.concatenate([z_fg, z_bg]), clip, offset)
            z_fg, z_bg = z[:N], z[N:]
        else:
            z_fg = ddim_loop(lambda z, t: den.predict_noise(z, t, cf, "fg", tm_fg).data,
                             schedule, n_steps, z_fg, clip, offset)
            z_bg = ddim_loop(lambda z, t: den.predict_noise(z, t, cb, "bg", tm_bg).data,
                             schedule, n_steps, z_bg, clip, offset)
    layers = [model_to_image(den.codec.decode(z - offset)) for z in z_fg]
    background = model_to_image(den.codec.decode(z_bg[0] - offset))
    return LayerSet(layers, background, masks)


def scene_conditions(model, sample):
    """Foreground/background condition sequences for a SceneSample."""
    from .scenes import scene_pose_map

    return model.encoder.build(sample.prompt, scene_pose_map(sample), sample.parsing, sample.masks)


__all__ = ["NoiseSchedule", "make_schedule", "add_noise", "ddim_timesteps", "ddim_loop", "ddim_sample",
           "image_to_model", "model_to_image", "LayerSet", "generate_layers", "scene_conditions",
           "ConditionSequence"]
