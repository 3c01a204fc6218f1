"""Losses, staged loss weighting, AdamW, the training step and checkpoints."""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .attention import pool_mask
from .config import Config
from .denoiser import MildModel, morph_band
from .diffusion import NoiseSchedule, add_noise, image_to_model, make_schedule, scene_conditions
from .lora import set_frozen
from .rng import DRng
from .scenes import augment

CHECKPOINT_MAGIC = b"LDCKPT01"
CHECKPOINT_VERSION = 1


# -- staged weighting --------------------------------------------------------
@dataclass
class StageController:
    t0: int = 8000
    t1: int = 12000
    lambda_max: float = 1.0

    def __post_init__(self):
        if self.t0 >= self.t1:
            raise ValueError("t0 must be smaller than t1")
        if self.lambda_max < 0:
            raise ValueError("lambda must be nonnegative")

    def stage(self, step: int) -> str:
        if step < self.t0:
            return "bg_only"
        if step <= self.t1:
            return "ramp"
        return "joint"


def lambda_t(step: int, ctrl: StageController) -> float:
    if step < ctrl.t0:
        return 0.0
    if step <= ctrl.t1:
        return ctrl.lambda_max * (step - ctrl.t0) / (ctrl.t1 - ctrl.t0)
    return float(ctrl.lambda_max)


# -- losses ------------------------------------------------------------------
def latent_mask(mask, latent_shape) -> np.ndarray:
    """Pixel mask -> binary mask on the latent grid, broadcast over latent channels."""
    m = np.asarray(mask, dtype=np.float64)
    C, h, w = latent_shape[-3:]
    if m.shape[-2:] != (h, w):
        m = pool_mask(m, h, w).astype(np.float64)
    return np.broadcast_to(m[..., None, :, :], m.shape[:-2] + (C, h, w))


def foreground_loss(eps, eps_k, M, region_mode: str = "inside") -> T.Tensor:
    """``||M (eps - eps_k)||^2`` (inside) or ``||(1 - M)(eps - eps_k)||^2`` (outside)."""
    if region_mode not in ("inside", "outside"):
        raise ValueError(f"invalid region mode {region_mode!r}")
    r = T.as_tensor(eps) - T.as_tensor(eps_k)
    M = np.asarray(M, dtype=np.float64)
    try:
        ok = np.broadcast_shapes(r.shape, M.shape) == r.shape
    except ValueError:
        ok = False
    if not ok:
        raise ValueError(f"mask extent {M.shape} does not match residual {r.shape}")
    w = M if region_mode == "inside" else 1.0 - M
    return T.sum_squares(r * w)


def background_loss(eps, eps_bg) -> T.Tensor:
    eps, eps_bg = T.as_tensor(eps), T.as_tensor(eps_bg)
    if eps.shape != eps_bg.shape:
        raise ValueError(f"extent mismatch {eps.shape} vs {eps_bg.shape}")
    return T.sum_squares(eps - eps_bg)


def region_loss(eps, eps_hat, M, beta_b: float = 0.5, beta_g: float = 0.25) -> T.Tensor:
    """Masked residual + boundary-band residual + masked forward-difference penalty.

    ``M`` is a mask on the residual's spatial grid (``h x w``, or broadcast over
    leading axes); the band is one-pixel ``dilate(M) - erode(M)``.
    """
    if beta_b < 0 or beta_g < 0:
        raise ValueError("region loss weights must be nonnegative")
    r = T.as_tensor(eps) - T.as_tensor(eps_hat)
    M = np.broadcast_to(np.asarray(M, dtype=np.float64), r.shape)
    band = morph_band(M.reshape(-1, *M.shape[-2:]), 1).reshape(M.shape)
    loss = T.sum_squares(r * M)
    if beta_b:
        loss = loss + T.sum_squares(r * band) * beta_b
    if beta_g:
        dx = r[..., :, 1:] - r[..., :, :-1]
        dy = r[..., 1:, :] - r[..., :-1, :]
        loss = loss + (T.sum_squares(dx * M[..., :, :-1]) + T.sum_squares(dy * M[..., :-1, :])) * beta_g
    return loss


def total_loss(fg_losses, bg_loss, step: int, ctrl: StageController) -> T.Tensor:
    lam = lambda_t(step, ctrl)
    bg_loss = T.as_tensor(bg_loss)
    if not fg_losses or lam == 0.0:
        # multiply by zero keeps fg terms in the graph with exact zero gradient
        fg_sum = sum((T.as_tensor(l) for l in fg_losses), T.Tensor(0.0))
        return fg_sum * lam + bg_loss
    fg_sum = fg_losses[0]
    for l in fg_losses[1:]:
        fg_sum = fg_sum + l
    return fg_sum * lam + bg_loss


# -- optimizer ---------------------------------------------------------------
@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def hyper(self) -> dict:
        return {k: getattr(self, k) for k in ("lr", "beta1", "beta2", "eps", "weight_decay")}


def adamw_update(params: dict, grads: dict, optim: OptimState) -> dict:
    """Decoupled weight-decay Adam, in place. Frozen parameters are skipped entirely.

    ``params`` and ``grads`` map names to tensors / arrays.
    """
    optim.step += 1
    for name, p in params.items():
        if p.frozen or name not in grads:
            continue
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient extent {g.shape} differs from parameter {name} {p.shape}")
        m = optim.m.get(name)
        if m is None:
            m = optim.m[name] = np.zeros(p.shape)
            optim.v[name] = np.zeros(p.shape)
        v = optim.v[name]
        n = optim.counts.get(name, 0) + 1
        optim.counts[name] = n
        m *= optim.beta1
        m += (1.0 - optim.beta1) * g
        v *= optim.beta2
        v += (1.0 - optim.beta2) * g * g
        m_hat = m / (1.0 - optim.beta1 ** n)
        v_hat = v / (1.0 - optim.beta2 ** n)
        p.data -= optim.lr * (m_hat / (np.sqrt(v_hat) + optim.eps) + optim.weight_decay * p.data)
        if p.bounds is not None:
            np.clip(p.data, p.bounds[0], p.bounds[1], out=p.data)
    return params


# -- training step -----------------------------------------------------------
def apply_stage_freezing(model: MildModel, stage: str, protect_bg: bool = True, lam: float | None = None):
    """bg_only: freeze foreground-only parameters; ramp: optionally freeze bg adapters.

    Foreground parameters also stay frozen while ``lam`` is zero, otherwise weight
    decay alone would move them at the first ramp step.
    """
    fg_frozen = stage == "bg_only" or lam == 0.0
    for p in model.encoder.fg_only_parameters():
        p.frozen = fg_frozen
    router = model.denoiser.router
    if router is not None:
        set_frozen(router, "fg", fg_frozen)
        set_frozen(router, "bg", stage == "ramp" and protect_bg)


@dataclass
class PreparedScene:
    z0_fg: T.Tensor
    z0_bg: T.Tensor
    masks: np.ndarray
    union: np.ndarray
    fg_conds: list
    bg_cond: object
    t: int
    eps: np.ndarray


def prepare_scene(model: MildModel, sample, t: int, eps: np.ndarray) -> PreparedScene:
    den = model.denoiser
    union = sample.masks.union()
    z_comp = den.codec.encode(image_to_model(sample.composite))
    z_bg = den.codec.encode(image_to_model(sample.background))
    fg_conds, bg_cond = scene_conditions(model, sample)
    return PreparedScene(den.inject_spatial_offsets(z_comp, union), den.inject_spatial_offsets(z_bg, union),
                         sample.masks.masks, union, fg_conds, bg_cond, t, eps)


def _stack(conds):
    return T.concat([T.reshape(c.tokens, (1,) + c.tokens.shape) for c in conds], axis=0)


def _stack_t(tensors):
    return T.concat([T.reshape(x, (1,) + x.shape) for x in tensors], axis=0)


def scene_losses(model: MildModel, scenes, schedule: NoiseSchedule, lam: float, tcfg, bg_target: str = "background"):
    """Per-scene (fg loss list, bg loss) for a list of PreparedScene."""
    den = model.denoiser
    ts = np.array([s.t for s in scenes])
    eps_all = np.stack([s.eps for s in scenes])
    zt_bg = _stack_t([add_noise(s.z0_bg if bg_target == "background" else s.z0_fg, s.t, s.eps, schedule)
                      for s in scenes])
    need_fg = lam > 0.0
    fg_elems = [(i, k) for i, s in enumerate(scenes) for k in range(len(s.masks))] if need_fg else []
    bg_masks = np.stack([s.union for s in scenes])
    if need_fg:
        zt_fg = _stack_t([add_noise(scenes[i].z0_fg, scenes[i].t, scenes[i].eps, schedule) for i, _ in fg_elems])
        t_fg = np.array([scenes[i].t for i, _ in fg_elems])
        fg_masks = np.stack([scenes[i].masks[k] for i, k in fg_elems])
        c_fg = _stack([scenes[i].fg_conds[k] for i, k in fg_elems])
    c_bg = _stack([s.bg_cond for s in scenes])

    if need_fg and den.cfg.layer_exchange:
        eps_fg, eps_bg = den.predict_noise_exchange(zt_fg, zt_bg, t_fg, ts, c_fg, c_bg, fg_masks, bg_masks,
                                                    groups=[i for i, _ in fg_elems])
    else:
        eps_bg = den.predict_noise(zt_bg, ts, c_bg, "bg", bg_masks)
        eps_fg = den.predict_noise(zt_fg, t_fg, c_fg, "fg", fg_masks) if need_fg else None

    out = []
    for i, s in enumerate(scenes):
        l_bg = background_loss(eps_all[i], eps_bg[i])
        fg = []
        for j, (si, k) in enumerate(fg_elems):
            if si != i:
                continue
            M = latent_mask(s.masks[k], den.latent_shape)
            if tcfg.region_loss:
                fg.append(region_loss(s.eps, eps_fg[j], M, tcfg.region_beta_boundary, tcfg.region_beta_gradient))
            else:
                fg.append(foreground_loss(s.eps, eps_fg[j], M, tcfg.fg_loss_region))
        out.append((fg, l_bg))
    return out


def train_step(batch, model: MildModel, ctrl: StageController, optim: OptimState, rng: DRng, step: int,
               cfg: Config, schedule: NoiseSchedule | None = None) -> dict:
    """One optimisation step on a list of SceneSamples. Returns a loss report."""
    if not batch:
        raise ValueError("empty batch")
    schedule = schedule or make_schedule(cfg.diffusion.timesteps, cfg.diffusion.beta_min, cfg.diffusion.beta_max)
    stage = ctrl.stage(step)
    lam = lambda_t(step, ctrl)
    apply_stage_freezing(model, stage, cfg.training.protect_bg, lam)
    den = model.denoiser
    scenes = []
    for i, sample in enumerate(batch):
        srng = rng.spawn("sample", i)
        if cfg.training.augment:
            sample = augment(sample, srng.spawn("augment"), cfg.data)
        t = srng.integers(0, schedule.T)
        eps = srng.normal(den.latent_shape)
        scenes.append(prepare_scene(model, sample, t, eps))
    per_scene = scene_losses(model, scenes, schedule, lam, cfg.training, cfg.training.bg_target)
    totals = [total_loss(fg, bg, step, ctrl) for fg, bg in per_scene]
    loss = totals[0]
    for x in totals[1:]:
        loss = loss + x
    loss = loss * (1.0 / len(totals))

    named = dict(model.named_parameters())
    live = {k: p for k, p in named.items() if not p.frozen}
    grads = T.grad(loss, list(live.values()), allow_unused=True)
    adamw_update(live, dict(zip(live, grads)), optim)
    bg_mean = float(np.mean([bg.item() for _, bg in per_scene]))
    fg_vals = [l.item() for fg, _ in per_scene for l in fg]
    return {
        "step": step,
        "stage": stage,
        "lambda_t": lam,
        "loss": loss.item(),
        "loss_bg": bg_mean,
        "loss_fg": float(np.mean(fg_vals)) if fg_vals else None,
        "instances": int(sum(len(s.masks) for s in scenes)),
    }


# -- checkpoints -------------------------------------------------------------
class CheckpointError(Exception):
    pass


def _blob_entries(model: MildModel, optim: OptimState):
    entries = [(f"model/{k}", v.data) for k, v in sorted(model.named_parameters())]
    entries += [(f"optim.m/{k}", optim.m[k]) for k in sorted(optim.m)]
    entries += [(f"optim.v/{k}", optim.v[k]) for k in sorted(optim.v)]
    return entries


def checkpoint_bytes(model: MildModel, optim: OptimState, ctrl: StageController, config: Config,
                     step: int, seed: int, extra: dict | None = None) -> bytes:
    index, chunks, offset = {}, [], 0
    for name, arr in _blob_entries(model, optim):
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        index[name] = [offset, list(np.shape(arr))]
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "step": step,
        "rng": DRng(seed).state(),
        "controller": asdict(ctrl),
        "optim": {"hyper": optim.hyper(), "step": optim.step,
                  "counts": {k: optim.counts[k] for k in sorted(optim.counts)}},
        "index": index,
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "extra": extra or {},
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head + blob


def save_checkpoint(model, optim, ctrl, path, config: Config, step: int, seed: int, extra=None):
    data = checkpoint_bytes(model, optim, ctrl, config, step, seed, extra)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return path


@dataclass
class Checkpoint:
    model: MildModel
    optim: OptimState
    ctrl: StageController
    config: Config
    step: int
    seed: int
    extra: dict


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from None
    if len(data) < 16 or data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (head_len,) = struct.unpack("<Q", data[8:16])
    if 16 + head_len > len(data):
        raise CheckpointError("truncated checkpoint header")
    try:
        manifest = json.loads(data[16:16 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint manifest: {exc}") from None
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {manifest.get('version')} unsupported "
                              f"(expected {CHECKPOINT_VERSION})")
    blob = data[16 + head_len:]
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(f"truncated checkpoint blob ({len(blob)} of {manifest['blob_bytes']} bytes)")
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CheckpointError("checkpoint blob checksum mismatch")

    def arr(name):
        off, shape = manifest["index"][name]
        n = int(np.prod(shape)) if shape else 1
        return np.frombuffer(blob, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(shape)

    config = Config.from_dict(manifest["config"])
    model = MildModel(config.model)
    state = {k[len("model/"):]: arr(k) for k in manifest["index"] if k.startswith("model/")}
    model.load_state_dict(state)
    o = manifest["optim"]
    optim = OptimState(**o["hyper"], step=o["step"])
    optim.counts = dict(o["counts"])
    for k in manifest["index"]:
        if k.startswith("optim.m/"):
            optim.m[k[len("optim.m/"):]] = arr(k).copy()
        elif k.startswith("optim.v/"):
            optim.v[k[len("optim.v/"):]] = arr(k).copy()
    ctrl = StageController(**manifest["controller"])
    return Checkpoint(model, optim, ctrl, config, manifest["step"], manifest["rng"]["seed"], manifest["extra"])


# -- driver --------------------------------------------------------------------
def make_optim(cfg: Config) -> OptimState:
    t = cfg.training
    return OptimState(lr=t.lr, beta1=t.beta1, beta2=t.beta2, eps=t.eps, weight_decay=t.weight_decay)


def make_controller(cfg: Config) -> StageController:
    return StageController(cfg.training.t0, cfg.training.t1, cfg.training.lambda_max)


def build_model(cfg: Config, seed: int) -> MildModel:
    cfg.model.seed = seed
    return MildModel(cfg.model)


def step_rng(seed: int, step: int) -> DRng:
    """Every step's randomness is a pure function of (seed, step), so resuming is exact."""
    return DRng(seed).spawn("train-step", step)


def train(samples, cfg: Config, seed: int, steps: int, out_dir=None, resume=None, log=None,
          model: MildModel | None = None):
    """Run training up to ``steps`` total steps. Returns ``(model, optim, ctrl, reports)``."""
    if not samples:
        raise ValueError("no training samples")
    if resume is not None:
        ck = load_checkpoint(resume)
        model, optim, ctrl, start = ck.model, ck.optim, ck.ctrl, ck.step
        if ck.seed != seed:
            raise CheckpointError(f"checkpoint seed {ck.seed} differs from requested seed {seed}")
        cfg = ck.config
    else:
        model = model or build_model(cfg, seed)
        optim, ctrl, start = make_optim(cfg), make_controller(cfg), 0
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    schedule = make_schedule(cfg.diffusion.timesteps, cfg.diffusion.beta_min, cfg.diffusion.beta_max)
    reports = []
    prev_stage = ctrl.stage(start - 1) if start > 0 else None
    for step in range(start, steps):
        rng = step_rng(seed, step)
        idx = rng.spawn("batch").integers(0, len(samples), (cfg.training.batch_size,))
        report = train_step([samples[i] for i in np.atleast_1d(idx)], model, ctrl, optim, rng, step, cfg, schedule)
        if log is not None:
            stage = report["stage"]
            if stage != prev_stage:
                log({"event": "stage", "step": step, "stage": stage})
            log(report)
        prev_stage = report["stage"]
        reports.append(report)
        done = step + 1
        if out_dir is not None and (done % cfg.training.checkpoint_every == 0 or done == steps):
            save_checkpoint(model, optim, ctrl, os.path.join(out_dir, f"ckpt_{done:06d}.bin"), cfg, done, seed)
    if out_dir is not None and steps == start:
        save_checkpoint(model, optim, ctrl, os.path.join(out_dir, f"ckpt_{start:06d}.bin"), cfg, start, seed)
    return model, optim, ctrl, reports
