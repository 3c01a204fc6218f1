"""Built-in verification suites: gradient oracle, zero-init equivalence,
schedules, conditioning and composition."""

from __future__ import annotations

import itertools

import numpy as np

from . import attention, conditioning
from . import tensor as T
from .composer import compose
from .config import DataConfig, tiny_config
from .denoiser import MildModel
from .diffusion import LayerSet, add_noise, ddim_loop, ddim_timesteps, make_schedule
from .rng import DRng
from .scenes import generate_scene
from .training import StageController, lambda_t, prepare_scene, scene_losses, total_loss

CATEGORIES = ("lora.A", "lora.B", "lora.alpha", "alpha_st", "encoder", "offsets", "unet")


def _category(name: str) -> str:
    if ".router." in f".{name}":
        return "lora." + name.rsplit(".", 1)[-1]
    if name.endswith("alpha_st"):
        return "alpha_st"
    if name.startswith("encoder."):
        return "encoder"
    if name.startswith("denoiser.offsets."):
        return "offsets"
    return "unet"


def oracle_setup(seed: int = 0, n_instances: int = 2, size: int = 8):
    """Tiny model with every parameter moved off its initial value, plus a scene
    with ``n_instances`` people and a fixed ``(t, eps)``. Returns ``(loss_fn, named)``."""
    cfg = tiny_config(size)
    cfg.model.seed = seed
    model = MildModel(cfg.model)
    rng = DRng(seed).spawn("oracle")
    named = dict(model.named_parameters())
    for name, p in sorted(named.items()):
        p.data += 0.1 * rng.spawn("perturb", name).normal(p.shape)
    dcfg = DataConfig(size=size, min_instances=n_instances, max_instances=n_instances, occlusion_prob=0.0)
    den = model.denoiser
    for attempt in range(1000):
        # the region bias only acts on rows that see both regions, so insist on mixed token masks
        sample = generate_scene(rng.spawn("scene", attempt), dcfg)
        counts = den.token_mask(np.concatenate([sample.masks.union()[None], sample.masks.masks])).m.sum(axis=1)
        if 0 < counts[0] < den.attn_size ** 2 and np.any((counts[1:] > 0) & (counts[1:] < den.attn_size ** 2)):
            break
    schedule = make_schedule(cfg.diffusion.timesteps, cfg.diffusion.beta_min, cfg.diffusion.beta_max)
    ctrl = StageController(cfg.training.t0, cfg.training.t1, cfg.training.lambda_max)
    step = cfg.training.t1 + 1
    t = 400
    eps = rng.spawn("eps").normal(model.denoiser.latent_shape)

    def loss_fn():
        scene = prepare_scene(model, sample, t, eps)
        [(fg, bg)] = scene_losses(model, [scene], schedule, lambda_t(step, ctrl), cfg.training)
        return total_loss(fg, bg, step, ctrl)

    return loss_fn, named


def gradient_oracle(n_params: int = 50, seed: int = 0, h: float = 1e-5, floor: float = 1e-6) -> dict:
    """Compare analytic gradients of the full training loss with central differences
    on ``n_params`` entries drawn round-robin from every parameter category."""
    loss_fn, named = oracle_setup(seed)
    by_cat = {c: sorted(n for n in named if _category(n) == c) for c in CATEGORIES}
    missing = [c for c, names in by_cat.items() if not names]
    if missing:
        raise RuntimeError(f"no parameters in categories {missing}")
    names_all = sorted(named)
    analytic = dict(zip(names_all, T.grad(loss_fn(), [named[n] for n in names_all])))
    # entries with an exactly zero gradient (e.g. unused vocabulary rows) would pass trivially
    live = {c: [(n, i) for n in names for i in np.flatnonzero(analytic[n].reshape(-1))] for c, names in by_cat.items()}
    rng = DRng(seed).spawn("oracle-pick")
    picks = []
    for i in range(n_params):
        pool = live[CATEGORIES[i % len(CATEGORIES)]]
        if not pool:
            raise RuntimeError(f"category {CATEGORIES[i % len(CATEGORIES)]} has no nonzero gradient")
        name, idx = pool[int(rng.integers(0, len(pool)))]
        picks.append((name, int(idx)))
    with T.no_grad():
        f = lambda: loss_fn().item()
        rows = []
        for name, idx in picks:
            [num] = T.finite_diff_grad(f, [named[name]], h, indices=[[idx]])
            a, b = analytic[name].reshape(-1)[idx], num.reshape(-1)[idx]
            rows.append({"param": name, "index": idx, "category": _category(name), "analytic": float(a),
                         "numeric": float(b), "rel_err": T.relative_error(a, b, floor)})
    worst = max(rows, key=lambda r: r["rel_err"])
    return {"max_rel_err": worst["rel_err"], "worst": worst["param"], "checked": len(rows), "rows": rows,
            "categories": sorted({r["category"] for r in rows})}


def _suite_gradient(n_params: int = 14) -> dict:
    res = gradient_oracle(n_params)
    return {"passed": res["max_rel_err"] <= 1e-5, "max_rel_err": res["max_rel_err"], "checked": res["checked"]}


def _suite_zero_init(draws: int = 20) -> dict:
    rng = DRng(11).spawn("zero-init")
    failures = []
    fresh = attention.SpatialBias()
    if np.any(fresh.alpha_st.data != 0.0):
        failures.append("fresh alpha_st is nonzero")
    for i in range(draws):
        r = rng.spawn("attn", i)
        n, d = int(r.integers(2, 10)), int(r.integers(1, 6))
        Q, K, V = r.normal((n, d)), r.normal((n, d)), r.normal((n, d))
        mask = r.integers(0, 2, (n,))
        a = attention.sma_attention(Q, K, V, mask, attention.SpatialBias()).data
        b = attention.vanilla_attention(Q, K, V).data
        if not np.array_equal(a, b):
            failures.append(f"attention draw {i} differs")
            break

    cfg = tiny_config(8)
    with_lora = MildModel(cfg.model)
    cfg_base = tiny_config(8)
    cfg_base.model.use_lora = False
    base = MildModel(cfg_base.model)
    den, den0 = with_lora.denoiser, base.denoiser
    if den.offsets is not None and np.any(den.offsets(np.ones(den.latent_shape[1:])).data != 0.0):
        failures.append("fresh offset encoder is not zero")
    with T.no_grad():
        for branch in ("fg", "bg"):
            for i in range(draws // 4):
                r = rng.spawn("denoiser", branch, i)
                z = r.normal(den.latent_shape)
                cond = r.normal((5, cfg.model.d_cond))
                mask = (r.uniform((cfg.model.image_size,) * 2) < 0.4).astype(np.float64)
                t = int(r.integers(0, 1000))
                if not np.array_equal(den.predict_noise(z, t, cond, branch, mask).data,
                                      den0.predict_noise(z, t, cond, branch, mask).data):
                    failures.append(f"{branch} branch differs from the base denoiser")
                    break
    return {"passed": not failures, "failures": failures}


def _suite_schedule() -> dict:
    failures = []
    ctrl = StageController(200, 400, 1.0)
    expect = {0: 0.0, 300: 0.5, 401: 1.0, 200: 0.0, 400: 1.0}
    for step, val in expect.items():
        if lambda_t(step, ctrl) != val:
            failures.append(f"lambda_t({step}) = {lambda_t(step, ctrl)}, expected {val}")
    stages = [ctrl.stage(s) for s in (0, 199, 200, 400, 401)]
    if stages != ["bg_only", "bg_only", "ramp", "ramp", "joint"]:
        failures.append(f"stage sequence {stages}")

    sched = make_schedule()
    if not np.all(np.diff(sched.alpha_bar) < 0):
        failures.append("alpha_bar is not strictly decreasing")
    ts = ddim_timesteps(1000, 25)
    if ts[0] != 999 or ts[-1] != 39 or len(ts) != 25:
        failures.append("ddim timesteps malformed")
    rng = DRng(5)
    z0, eps = rng.spawn("z0").normal((3, 4, 4)), rng.spawn("eps").normal((3, 4, 4))
    for t in (0, 499, 999):
        zt = add_noise(z0, t, eps, sched)
        rec = ddim_loop(lambda z, tt: eps, _single(sched, t), 1, zt)
        if np.max(np.abs(rec - z0)) > 1e-10:
            failures.append(f"oracle-eps DDIM does not invert add_noise at t={t}")
    return {"passed": not failures, "failures": failures}


def _single(sched, t):
    """Schedule view whose only DDIM timestep is ``t``."""
    from .diffusion import NoiseSchedule
    return NoiseSchedule(sched.beta[: t + 1])


def _suite_conditioning() -> dict:
    failures = []
    H = W = 6
    m = np.zeros((3, H, W))
    m[0, 1:4, 1:4] = 1
    m[1, 2:5, 2:5] = 1
    m[2, 0:2, 3:6] = 1
    masks = conditioning.MaskSet(m, [1, 2, 3])
    for k in (1, 2, 3):
        others = [m[j] > 0 for j in range(3) if j != k - 1]
        oracle = np.logical_or.reduce(others).astype(np.float64)
        got = np.asarray(conditioning.context_mask(masks, k))
        if not np.array_equal(got, oracle):
            failures.append(f"context mask for instance {k} is not the clamped union of the others")
    single = conditioning.MaskSet(m[:1], [1])
    if np.any(np.asarray(conditioning.context_mask(single, 1)) != 0):
        failures.append("single-instance context mask is not empty")
    return {"passed": not failures, "failures": failures}


def painter_oracle(layers, background, masks, depth_order, removal) -> np.ndarray:
    """Each pixel takes the front-most kept layer covering it, else the background."""
    out = np.array(background, dtype=np.float64, copy=True)
    H, W = out.shape[:2]
    for y in range(H):
        for x in range(W):
            for k in reversed(list(depth_order)):
                if k not in removal and masks[k - 1][y, x] > 0:
                    out[y, x] = layers[k - 1][y, x]
                    break
    return out


def _suite_composition(scenes: int = 12) -> dict:
    failures = []
    dcfg = DataConfig(size=12, max_instances=3, occlusion_prob=0.5)
    rng = DRng(21).spawn("composition")
    for i in range(scenes):
        s = generate_scene(rng.spawn(i), dcfg)
        ls = LayerSet(s.layers, s.background, s.masks)
        N = len(s.masks)
        if not np.array_equal(compose(ls, set()), s.composite):
            failures.append(f"scene {i}: R=empty does not reproduce the composite")
        if not np.array_equal(compose(ls, set(range(1, N + 1))), s.background):
            failures.append(f"scene {i}: R=all does not reproduce the background")
        for r in range(N + 1):
            for removal in itertools.combinations(range(1, N + 1), r):
                want = painter_oracle(s.layers, s.background, s.masks.masks, s.masks.depth_order, set(removal))
                if not np.array_equal(compose(ls, removal), want):
                    failures.append(f"scene {i}: removal {removal} disagrees with the painter oracle")
    return {"passed": not failures, "failures": failures[:5]}


SUITES = {
    "gradient_oracle": _suite_gradient,
    "zero_init_equivalence": _suite_zero_init,
    "schedule": _suite_schedule,
    "conditioning": _suite_conditioning,
    "composition": _suite_composition,
}


def run_selfcheck(log=None) -> dict:
    """Run every suite; a suite that raises counts as failed."""
    results = {}
    for name, fn in SUITES.items():
        try:
            res = fn()
        except Exception as exc:  # a crash is a verification failure
            res = {"passed": False, "error": f"{type(exc).__name__}: {exc}"}
        results[name] = res
        if log is not None:
            log({"event": "selfcheck", "suite": name, **res})
    return results


def all_passed(results: dict) -> bool:
    return all(r["passed"] for r in results.values())
