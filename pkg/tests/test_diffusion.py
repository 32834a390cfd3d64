import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import alpha_bar_loop, mse_loop
from ramap_forge.core import ConfMap, RadarGeometry, SeededRng
from ramap_forge.denoiser import (ConvDenoiser, DenoiserSpec, checkpoint_bytes, load_checkpoint,
                                  make_inputs, save_checkpoint)
from ramap_forge.diffusion import (AdamState, DiffusionSchedule, OptimizerConfig, denoise_step,
                                   forward_noise, loss_and_gradient, mse_loss, reconstruct_x0, sample,
                                   sample_grids, train)
from ramap_forge.errors import DomainError, FormatError, NumericError
from ramap_forge.tcr import TcrConfig

SCHED = DiffusionSchedule.linear(100)


def small_model(seed=0, hidden=4, dtype=np.float64):
    return ConvDenoiser(DenoiserSpec(in_channels=5, hidden=hidden), rng=seed, compute_dtype=dtype)


def toy_batch(seed=0, b=2, n=12):
    rng = np.random.default_rng(seed)
    i, j = np.mgrid[0:n, 0:n]
    x0 = np.stack([np.clip(0.7 * np.exp(-((i - 4 - k) ** 2 + (j - 6) ** 2) / 3.0)
                           + 0.05 * rng.random((n, n)), 0, 1) for k in range(b)])
    conf = np.stack([np.stack([np.exp(-((i - 4 - k) ** 2 + (j - 6) ** 2) / 3.0), np.zeros((n, n)),
                               np.zeros((n, n))]) for k in range(b)])
    return x0, conf


class TestSchedule:
    def test_alpha_bar_matches_product(self):
        betas = SCHED.betas
        for t in (1, 2, 17, 50, 100):
            assert SCHED.alpha_bar(t) == pytest.approx(alpha_bar_loop(betas, t), rel=1e-12)

    def test_default_ramp_ends_near_noise(self):
        assert SCHED.beta(1) == pytest.approx(1e-3)
        assert SCHED.beta(100) == pytest.approx(0.2)
        assert SCHED.alpha_bar(100) < 1e-4

    def test_explicit_ramp(self):
        s = DiffusionSchedule.linear(1000, 1e-4, 0.02)
        assert s.beta(1) == pytest.approx(1e-4) and s.beta(1000) == pytest.approx(0.02)

    def test_bad_timesteps(self):
        with pytest.raises(DomainError):
            SCHED.alpha_bar(0)
        with pytest.raises(DomainError):
            SCHED.alpha_bar(101)
        with pytest.raises(DomainError):
            DiffusionSchedule((0.1, 1.0))


class TestForward:
    def test_closed_form_recomputed(self):
        rng = SeededRng(11)
        x0 = rng.uniform(size=(8, 8))
        eps = rng.normal((8, 8))
        t = 50
        got = forward_noise(x0, t, eps, SCHED)
        ab = alpha_bar_loop(SCHED.betas, t)
        ref = [[math.sqrt(ab) * x0[a, b] + math.sqrt(1 - ab) * eps[a, b] for b in range(8)] for a in range(8)]
        assert np.max(np.abs(got - np.array(ref))) < 1e-12

    def test_zero_noise_scales_signal(self):
        x0 = np.full((4, 4), 0.5)
        assert np.allclose(forward_noise(x0, 10, np.zeros((4, 4)), SCHED), math.sqrt(SCHED.alpha_bar(10)) * 0.5)

    def test_empirical_variance(self):
        rng = SeededRng(5)
        x0 = np.full((200, 200), 0.3)
        t = 60
        xt = forward_noise(x0, t, rng.normal((200, 200)), SCHED)
        assert np.var(xt) == pytest.approx(1 - SCHED.alpha_bar(t), rel=0.05)

    def test_per_row_timesteps(self):
        x0 = np.ones((3, 2, 2))
        eps = np.zeros((3, 2, 2))
        out = forward_noise(x0, np.array([1, 50, 100]), eps, SCHED)
        assert out[2, 0, 0] < out[1, 0, 0] < out[0, 0, 0]


class TestInversion:
    def test_all_timesteps(self):
        rng = SeededRng(0)
        x0 = rng.uniform(size=(16, 16))
        worst = 0.0
        for t in range(1, 101):
            eps = rng.normal((16, 16))
            back = reconstruct_x0(forward_noise(x0, t, eps, SCHED), t, eps, SCHED)
            worst = max(worst, float(np.max(np.abs(back - x0))))
        assert worst < 1e-5

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            reconstruct_x0(np.full((2, 2), np.nan), 5, np.zeros((2, 2)), SCHED)

    def test_single_step_with_true_noise(self):
        sched = DiffusionSchedule.linear(1, 0.3, 0.3)
        x0 = SeededRng(2).uniform(size=(6, 6))
        eps = SeededRng(3).normal((6, 6))
        x1 = forward_noise(x0, 1, eps, sched)

        class Oracle:
            def forward(self, inputs):
                return eps[None]

        out = denoise_step(x1, 1, np.zeros((0, 6, 6)), Oracle(), sched, SeededRng(0))
        assert np.max(np.abs(out - x0)) < 1e-5


def test_mse_matches_scalar_loop():
    rng = np.random.default_rng(7)
    a, b = rng.standard_normal((9, 7)), rng.standard_normal((9, 7))
    assert mse_loss(a, b) == pytest.approx(mse_loop(a.tolist(), b.tolist()), rel=1e-12)
    with pytest.raises(DomainError):
        mse_loss(a, b[:3])


class TestObjective:
    @pytest.mark.parametrize("lam,tmax", [(0.0, 10), (0.1, 10), (0.1, None)])
    def test_gradient_matches_finite_differences(self, lam, tmax):
        model = small_model(1)
        x0, conf = toy_batch(1)
        t = np.array([3, 40])
        eps = np.random.default_rng(4).standard_normal(x0.shape)
        cfg = TcrConfig(lambda_tcr=lam, max_timestep=tmax)
        _, grad = loss_and_gradient(model, x0, conf, SCHED, cfg, lam, t=t, eps=eps)

        def loss_at(p):
            m = ConvDenoiser(model.spec, p)
            return loss_and_gradient(m, x0, conf, SCHED, cfg, lam, t=t, eps=eps)[0]

        coords = np.random.default_rng(5).choice(model.params.size, size=40, replace=False)
        h = 1e-5
        worst = 0.0
        for k in coords:
            up, dn = model.params.copy(), model.params.copy()
            up[k] += h
            dn[k] -= h
            fd = (loss_at(up) - loss_at(dn)) / (2 * h)
            worst = max(worst, abs(fd - grad[k]) / max(abs(fd), abs(grad[k]), 1e-7))
        assert worst < 1e-3

    def test_tcr_term_adds_to_mse(self):
        model = small_model(2)
        x0, conf = toy_batch(2)
        t, eps = np.array([2, 5]), np.random.default_rng(0).standard_normal(x0.shape)
        base, _ = loss_and_gradient(model, x0, conf, SCHED, TcrConfig(), 0.0, t=t, eps=eps)
        with_reg, _ = loss_and_gradient(model, x0, conf, SCHED, TcrConfig(), 0.1, t=t, eps=eps)
        assert with_reg > base

    def test_max_timestep_gates_regulariser(self):
        model = small_model(2)
        x0, conf = toy_batch(2)
        eps = np.random.default_rng(0).standard_normal(x0.shape)
        t = np.array([50, 60])
        cfg = TcrConfig(max_timestep=10)
        a, ga = loss_and_gradient(model, x0, conf, SCHED, cfg, 0.1, t=t, eps=eps)
        b, gb = loss_and_gradient(model, x0, conf, SCHED, cfg, 0.0, t=t, eps=eps)
        assert a == b and np.array_equal(ga, gb)

    def test_duplicated_batch_has_same_mean(self):
        model = small_model(3)
        x0, conf = toy_batch(3, b=1)
        eps = np.random.default_rng(1).standard_normal(x0.shape)
        t = np.array([7])
        one = loss_and_gradient(model, x0, conf, SCHED, TcrConfig(), 0.1, t=t, eps=eps)
        two = loss_and_gradient(model, np.concatenate([x0, x0]), np.concatenate([conf, conf]), SCHED,
                                TcrConfig(), 0.1, t=np.array([7, 7]), eps=np.concatenate([eps, eps]))
        assert two[0] == pytest.approx(one[0], rel=1e-12)
        assert np.allclose(two[1], one[1], rtol=1e-10, atol=1e-14)

    def test_empty_batch_rejected(self):
        with pytest.raises(DomainError):
            loss_and_gradient(small_model(), np.zeros((0, 4, 4)), np.zeros((0, 3, 4, 4)), SCHED,
                              TcrConfig(), 0.0, SeededRng(0))


class TestSampling:
    def test_deterministic_and_bounded(self):
        model = small_model(4)
        _, conf = toy_batch(4, b=2)
        a = sample_grids(conf, model, DiffusionSchedule.linear(10), SeededRng(9))
        b = sample_grids(conf, model, DiffusionSchedule.linear(10), SeededRng(9))
        assert np.array_equal(a, b)
        assert a.min() >= 0 and a.max() <= 1 and a.shape == (2, 12, 12)

    def test_sample_wraps_ramap(self):
        geo = RadarGeometry(12, 12)
        _, conf = toy_batch(5, b=1)
        out = sample(ConfMap(conf[0], geo), small_model(5), DiffusionSchedule.linear(5), SeededRng(1))
        assert out.geometry == geo

    def test_step_rejects_t0(self):
        with pytest.raises(DomainError):
            denoise_step(np.zeros((4, 4)), 0, np.zeros((3, 4, 4)), small_model(), SCHED, SeededRng(0))


class TestTraining:
    def test_loss_decreases(self):
        from ramap_forge.conditioning import GacConfig
        from ramap_forge.core import ClassCatalog
        from ramap_forge.dataset import DEFAULT_SCENES, simulate_frames

        geo = RadarGeometry(32, 32)
        data = simulate_frames(16, DEFAULT_SCENES, geo, ClassCatalog(), GacConfig(), SeededRng(0))
        model = ConvDenoiser(DenoiserSpec(), rng=SeededRng(1), compute_dtype=np.float32)
        opt = OptimizerConfig(lr=1e-3, steps=200)
        res = train(model, data.ramaps, data.confmaps, DiffusionSchedule.linear(100), opt,
                    TcrConfig(lambda_tcr=0.0), SeededRng(2))
        h = np.asarray(res.history)
        assert len(h) == 200
        assert h[-40:].mean() < h[:40].mean()
        assert res.model.compute_dtype == np.float32
        assert np.array_equal(model.params, ConvDenoiser(DenoiserSpec(), rng=SeededRng(1)).params)

    def test_zero_epochs_keeps_init(self):
        model = small_model(6)
        x0, conf = toy_batch(6)
        res = train(model, x0, conf, SCHED, OptimizerConfig(epochs=0), TcrConfig(), SeededRng(0))
        assert res.history == [] and np.array_equal(res.model.params, model.params)

    def test_divergence_reports_step(self):
        model = small_model(7)
        x0, conf = toy_batch(7)
        x0[0, 0, 0] = np.inf
        with pytest.raises(NumericError, match="step 0"):
            train(model, x0, conf, SCHED, OptimizerConfig(steps=3), TcrConfig(lambda_tcr=0.0), SeededRng(0))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = small_model(8)
        state = AdamState(5, np.arange(model.params.size) * 1e-3, np.full(model.params.size, 2e-4))
        path = tmp_path / "m.dnsr"
        save_checkpoint(path, model, state)
        back, st_back = load_checkpoint(path)
        assert back.spec == model.spec
        assert np.array_equal(back.params, model.params.astype(np.float32).astype(np.float64))
        assert st_back.step == 5
        assert checkpoint_bytes(back, st_back) == path.read_bytes()

    def test_corrupt_file(self, tmp_path):
        path = tmp_path / "m.dnsr"
        save_checkpoint(path, small_model(), None)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(FormatError):
            load_checkpoint(path)
        path.write_bytes(b"NOPE" + b"\0" * 40)
        with pytest.raises(FormatError):
            load_checkpoint(path)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 100), st.integers(0, 2 ** 32 - 1))
def test_inversion_property(t, seed):
    rng = SeededRng(seed)
    x0 = rng.uniform(size=(6, 6))
    eps = rng.normal((6, 6))
    assert np.max(np.abs(reconstruct_x0(forward_noise(x0, t, eps, SCHED), t, eps, SCHED) - x0)) < 1e-5


def test_make_inputs_layout():
    x = np.zeros((2, 4, 4))
    conf = np.ones((2, 3, 4, 4))
    inp = make_inputs(x, conf, np.array([10, 100]), 100)
    assert inp.shape == (2, 5, 4, 4)
    assert inp[0, 4, 0, 0] == pytest.approx(0.1) and inp[1, 4, 3, 3] == 1.0
