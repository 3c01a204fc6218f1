import os

import numpy as np
import pytest

from layerdiff import tensor as T
from layerdiff.config import DataConfig, tiny_config
from layerdiff.rng import DRng
from layerdiff.scenes import generate_dataset
from layerdiff.training import (CheckpointError, OptimState, StageController, adamw_update, apply_stage_freezing,
                                background_loss, build_model, checkpoint_bytes, foreground_loss, lambda_t,
                                load_checkpoint, make_controller, make_optim, region_loss, save_checkpoint,
                                step_rng, total_loss, train, train_step)


@pytest.fixture(scope="module")
def samples():
    return generate_dataset(6, DataConfig(size=8, max_instances=2), seed=4)


class TestLambda:
    ctrl = StageController(100, 300, 0.8)

    def test_values(self):
        assert lambda_t(0, self.ctrl) == 0.0
        assert lambda_t(200, self.ctrl) == 0.4
        assert lambda_t(301, self.ctrl) == 0.8

    def test_continuity(self):
        assert abs(lambda_t(100, self.ctrl) - lambda_t(99, self.ctrl)) <= 1e-12
        assert abs(lambda_t(300, self.ctrl) - lambda_t(301, self.ctrl)) <= 1e-12

    def test_stages(self):
        assert [self.ctrl.stage(s) for s in (99, 100, 300, 301)] == ["bg_only", "ramp", "ramp", "joint"]

    def test_invalid(self):
        with pytest.raises(ValueError):
            StageController(5, 5)


class TestLosses:
    def test_foreground_hand_case(self):
        M = np.array([1.0, 0.0])
        assert foreground_loss(np.array([3.0, 5.0]), np.zeros(2), M).item() == 9.0
        assert foreground_loss(np.array([3.0, 5.0]), np.zeros(2), M, "outside").item() == 25.0

    def test_foreground_trivial(self, rng):
        e = rng.normal((3, 2, 2))
        assert foreground_loss(e, e, np.ones((2, 2))).item() == 0.0
        assert foreground_loss(e, np.zeros_like(e), np.zeros((2, 2))).item() == 0.0
        with pytest.raises(ValueError):
            foreground_loss(e, e, np.ones((3, 3)))
        with pytest.raises(ValueError):
            foreground_loss(e, e, np.ones((2, 2)), "edge")

    def test_background(self, rng):
        e = rng.normal((3, 4))
        assert background_loss(e, e).item() == 0.0
        assert background_loss(np.ones(7), np.zeros(7)).item() == 7.0
        assert background_loss(e, e + 1).item() == background_loss(e, e - 1).item()

    def test_region_reductions(self, rng):
        e, h = rng.normal((2, 5, 5)), rng.spawn(1).normal((2, 5, 5))
        M = (rng.uniform((5, 5)) < 0.5).astype(float)
        assert region_loss(e, e, M).item() == 0.0
        assert np.isclose(region_loss(e, h, M, 0.0, 0.0).item(), foreground_loss(e, h, M).item(), rtol=1e-14)

    def test_region_constant_residual_full_mask(self):
        # full mask: empty band, zero forward differences; only the masked term counts
        r = np.full((1, 3, 3), 2.0)
        assert region_loss(r, np.zeros_like(r), np.ones((3, 3)), 0.5, 0.25).item() == 36.0

    def test_region_band_count(self):
        M = np.zeros((5, 5))
        M[2, 2] = 1
        r = np.ones((1, 5, 5))
        # inside 1 pixel; band = 3x3 block = 9 pixels; no in-mask gradient pairs
        assert region_loss(r, np.zeros_like(r), M, 0.5, 0.0).item() == 1.0 + 0.5 * 9

    def test_total(self):
        ctrl = StageController(10, 20, 1.0)
        assert total_loss([T.Tensor(2.0), T.Tensor(3.0)], T.Tensor(1.0), 25, ctrl).item() == 6.0
        assert total_loss([T.Tensor(5.0)], T.Tensor(1.5), 3, ctrl).item() == 1.5
        assert total_loss([], T.Tensor(1.5), 25, ctrl).item() == 1.5


class TestAdamW:
    def test_zero_grads_no_decay(self, rng):
        p = T.parameter(rng.normal((3,)))
        before = p.data.copy()
        adamw_update({"p": p}, {"p": np.zeros(3)}, OptimState(weight_decay=0.0))
        assert np.array_equal(p.data, before)

    def test_hand_step(self):
        p = T.parameter(np.array(1.0))
        adamw_update({"p": p}, {"p": np.array(1.0)}, OptimState(lr=0.1, weight_decay=0.0))
        # bias-corrected m_hat = v_hat = 1 -> step = lr / (1 + eps)
        assert abs(p.data - (1.0 - 0.1 / (1.0 + 1e-8))) < 1e-15

    def test_frozen_skipped(self, rng):
        p = T.parameter(rng.normal((2,)))
        p.frozen = True
        before = p.data.copy()
        o = OptimState()
        adamw_update({"p": p}, {"p": np.full(2, 100.0)}, o)
        assert np.array_equal(p.data, before) and "p" not in o.m

    def test_bounds_clamp(self):
        p = T.parameter(np.array(0.01))
        p.bounds = (0.0, 64.0)
        adamw_update({"p": p}, {"p": np.array(5.0)}, OptimState(lr=1.0))
        assert p.data == 0.0

    def test_shape_mismatch(self):
        p = T.parameter(np.zeros(2))
        with pytest.raises(ValueError):
            adamw_update({"p": p}, {"p": np.zeros(3)}, OptimState())


class TestTrainStep:
    def test_fg_frozen_before_t0(self, samples):
        cfg = tiny_config(8)
        model = build_model(cfg, 0)
        ctrl, optim = make_controller(cfg), make_optim(cfg)
        fg = {id(p): p.data.copy() for p in model.fg_only_parameters()}
        rest = {k: p.data.copy() for k, p in model.named_parameters() if id(p) not in fg}
        for step in range(cfg.training.t0 + 1):
            rep = train_step(samples[:2], model, ctrl, optim, step_rng(0, step), step, cfg)
            assert rep["lambda_t"] == 0.0
        assert all(np.array_equal(p.data, fg[id(p)]) for p in model.fg_only_parameters())
        assert any(not np.array_equal(p.data, rest[k]) for k, p in model.named_parameters() if k in rest)

    def test_bg_adapters_frozen_in_ramp(self, tiny_model):
        apply_stage_freezing(tiny_model, "ramp", protect_bg=True)
        assert all(a.frozen for a in tiny_model.denoiser.router.bg_adapters.values())
        assert not any(a.frozen for a in tiny_model.denoiser.router.fg_adapters.values())
        apply_stage_freezing(tiny_model, "joint")
        assert not any(p.frozen for p in tiny_model.parameters())

    def test_deterministic(self, samples):
        cfg = tiny_config(8)
        reps = []
        for _ in range(2):
            model = build_model(cfg, 1)
            reps.append(train_step(samples[:2], model, make_controller(cfg), make_optim(cfg), step_rng(1, 5), 5, cfg))
        assert reps[0] == reps[1]

    def test_empty_batch(self, tiny_model, tiny_cfg):
        with pytest.raises(ValueError):
            train_step([], tiny_model, make_controller(tiny_cfg), make_optim(tiny_cfg), DRng(0), 0, tiny_cfg)

    def test_report_has_fg_after_t0(self, samples):
        cfg = tiny_config(8)
        model = build_model(cfg, 0)
        rep = train_step(samples[:2], model, make_controller(cfg), make_optim(cfg), step_rng(0, 9), 9, cfg)
        assert rep["stage"] == "joint" and rep["loss_fg"] is not None and rep["instances"] >= 2

    @pytest.mark.parametrize("option", ["region_loss", "layer_exchange", "composite"])
    def test_variants_run(self, samples, option):
        cfg = tiny_config(8)
        if option == "region_loss":
            cfg.training.region_loss = True
        elif option == "layer_exchange":
            cfg.model.layer_exchange = True
        else:
            cfg.training.bg_target = "composite"
        model = build_model(cfg, 0)
        rep = train_step(samples[:2], model, make_controller(cfg), make_optim(cfg), step_rng(0, 9), 9, cfg)
        assert np.isfinite(rep["loss"])


class TestCheckpoint:
    def test_save_load_save_identical(self, samples, tmp_path):
        cfg = tiny_config(8)
        model, optim, ctrl, _ = train(samples, cfg, seed=2, steps=3)
        p = tmp_path / "a.bin"
        save_checkpoint(model, optim, ctrl, p, cfg, 3, 2)
        ck = load_checkpoint(p)
        assert checkpoint_bytes(ck.model, ck.optim, ck.ctrl, ck.config, ck.step, ck.seed) == p.read_bytes()

    def test_resume_matches_unbroken(self, samples, tmp_path):
        cfg = tiny_config(8)
        full = tmp_path / "full"
        part = tmp_path / "part"
        train(samples, cfg, seed=3, steps=6, out_dir=str(full))
        train(samples, tiny_config(8), seed=3, steps=3, out_dir=str(part))
        train(samples, tiny_config(8), seed=3, steps=6, out_dir=str(part), resume=str(part / "ckpt_000003.bin"))
        assert (full / "ckpt_000006.bin").read_bytes() == (part / "ckpt_000006.bin").read_bytes()

    def test_truncated_rejected(self, samples, tmp_path):
        cfg = tiny_config(8)
        model, optim, ctrl, _ = train(samples, cfg, seed=0, steps=1)
        p = tmp_path / "c.bin"
        save_checkpoint(model, optim, ctrl, p, cfg, 1, 0)
        data = p.read_bytes()
        for cut in (4, 20, len(data) - 8):
            (tmp_path / "t.bin").write_bytes(data[:cut])
            with pytest.raises(CheckpointError):
                load_checkpoint(tmp_path / "t.bin")

    def test_corrupt_blob_rejected(self, samples, tmp_path):
        cfg = tiny_config(8)
        model, optim, ctrl, _ = train(samples, cfg, seed=0, steps=1)
        p = tmp_path / "c.bin"
        save_checkpoint(model, optim, ctrl, p, cfg, 1, 0)
        data = bytearray(p.read_bytes())
        data[-1] ^= 0xFF
        p.write_bytes(bytes(data))
        with pytest.raises(CheckpointError):
            load_checkpoint(p)

    def test_seed_mismatch_on_resume(self, samples, tmp_path):
        cfg = tiny_config(8)
        train(samples, cfg, seed=0, steps=1, out_dir=str(tmp_path))
        with pytest.raises(CheckpointError):
            train(samples, cfg, seed=1, steps=2, resume=str(tmp_path / "ckpt_000001.bin"))

    def test_stage_events_logged(self, samples):
        cfg = tiny_config(8)
        events = []
        train(samples, cfg, seed=0, steps=cfg.training.t1 + 2, log=events.append)
        stages = [(e["step"], e["stage"]) for e in events if e.get("event") == "stage"]
        assert stages == [(0, "bg_only"), (cfg.training.t0, "ramp"), (cfg.training.t1 + 1, "joint")]
