"""DDPM machinery: schedule, forward noising, clean-signal estimate, ancestral
sampling, and the MSE + target-consistency training objective."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import ConfMap, RAMap, SeededRng
from .denoiser import ConvDenoiser, make_inputs
from .errors import DomainError, NumericError
from .tcr import TcrConfig, tcr_and_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DiffusionSchedule:
    """Noise schedule; timesteps are 1-based, ``betas[t - 1]`` is beta_t."""

    betas: tuple[float, ...]

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1:
            raise DomainError("schedule needs at least one beta")
        if not np.all((b > 0) & (b < 1)):
            raise DomainError("betas must lie in (0, 1)")
        object.__setattr__(self, "betas", tuple(float(x) for x in b))
        object.__setattr__(self, "_beta", b)
        object.__setattr__(self, "_alpha_bar", np.cumprod(1.0 - b))

    @classmethod
    def linear(cls, n_steps: int = 100, beta_start: float | None = None,
               beta_end: float | None = None) -> "DiffusionSchedule":
        """Linear ramp. Defaults rescale the 1000-step (1e-4, 0.02) ramp by
        ``1000 / n_steps`` so short schedules still end close to pure noise."""
        if n_steps < 1:
            raise DomainError(f"n_steps must be >= 1, got {n_steps}")
        scale = 1000.0 / n_steps
        lo = min(1e-4 * scale, 0.5) if beta_start is None else beta_start
        hi = min(0.02 * scale, 0.999) if beta_end is None else beta_end
        return cls(tuple(np.linspace(lo, hi, n_steps)))

    @property
    def n_steps(self) -> int:
        return len(self.betas)

    def _check(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.n_steps):
            raise DomainError(f"timestep {t} outside [1, {self.n_steps}]")
        return t.astype(np.int64) - 1

    def beta(self, t):
        return self._beta[self._check(t)]

    def alpha(self, t):
        return 1.0 - self.beta(t)

    def alpha_bar(self, t):
        return self._alpha_bar[self._check(t)]


def _per_sample(v, ndim):
    v = np.asarray(v, dtype=np.float64)
    return v.reshape(v.shape + (1,) * (ndim - v.ndim)) if v.ndim else v


def forward_noise(x0, t, eps, schedule: DiffusionSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps. ``t`` may be one value per batch row."""
    grid = x0.grid if isinstance(x0, RAMap) else np.asarray(x0, dtype=np.float64)
    ab = _per_sample(schedule.alpha_bar(t), grid.ndim)
    return np.sqrt(ab) * grid + np.sqrt(1.0 - ab) * eps


def reconstruct_x0(x_t, t, eps_pred, schedule: DiffusionSchedule) -> np.ndarray:
    """Invert the forward process with a noise estimate. Not clamped."""
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    if not (np.all(np.isfinite(x_t)) and np.all(np.isfinite(eps_pred))):
        raise NumericError(f"non-finite input to reconstruct_x0 at t={t}")
    ab = _per_sample(schedule.alpha_bar(t), x_t.ndim)
    return (x_t - np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(ab)


def mse_loss(eps, eps_pred) -> float:
    eps = np.asarray(eps, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    if eps.shape != eps_pred.shape:
        raise DomainError(f"shape mismatch {eps.shape} vs {eps_pred.shape}")
    return float(np.mean((eps - eps_pred) ** 2))


def _conf_array(confmap) -> np.ndarray:
    return confmap.channels if isinstance(confmap, ConfMap) else np.asarray(confmap, dtype=np.float64)


def denoise_step(x_t, t: int, confmap, model: ConvDenoiser, schedule: DiffusionSchedule,
                 rng: SeededRng) -> np.ndarray:
    """One ancestral step t -> t-1; noise is added only for t > 1.

    Accepts a single map (H, W) with (Nc, H, W) conditioning, or batches.
    """
    if t < 1:
        raise DomainError(f"denoise_step needs t >= 1, got {t}")
    x_t = np.asarray(x_t, dtype=np.float64)
    conf = _conf_array(confmap)
    single = x_t.ndim == 2
    xb = x_t[None] if single else x_t
    cb = conf[None] if single else conf
    eps_hat = model.forward(make_inputs(xb, cb, t, schedule.n_steps))
    beta = float(schedule.beta(t))
    ab = float(schedule.alpha_bar(t))
    mean = (xb - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(1.0 - beta)
    if t > 1:
        mean = mean + np.sqrt(beta) * rng.normal(mean.shape)
    return mean[0] if single else mean


def sample_grids(confmaps: np.ndarray, model: ConvDenoiser, schedule: DiffusionSchedule,
                 rng: SeededRng) -> np.ndarray:
    """Ancestral sampling for a batch of conditioning maps (B, Nc, H, W) -> (B, H, W) in [0, 1]."""
    confmaps = np.asarray(confmaps, dtype=np.float64)
    b, _, h, w = confmaps.shape
    x = rng.normal((b, h, w))
    for t in range(schedule.n_steps, 0, -1):
        x = denoise_step(x, t, confmaps, model, schedule, rng)
    if not np.all(np.isfinite(x)):
        raise NumericError("sampling produced non-finite values")
    return np.clip(x, 0.0, 1.0)


def sample(confmap: ConfMap, model: ConvDenoiser, schedule: DiffusionSchedule, rng: SeededRng) -> RAMap:
    grid = sample_grids(confmap.channels[None], model, schedule, rng)[0]
    return RAMap(grid, confmap.geometry)


def loss_and_gradient(model: ConvDenoiser, x0: np.ndarray, confmaps: np.ndarray,
                      schedule: DiffusionSchedule, tcr_config: TcrConfig, lambda_tcr: float,
                      rng: SeededRng | None = None, t=None, eps=None):
    """Total objective ``mse + lambda_tcr * tcr`` on a batch and its exact parameter gradient.

    ``x0``: (B, H, W); ``confmaps``: (B, Nc, H, W). Timesteps and noise are drawn
    from ``rng`` unless passed explicitly. Both terms are means, so the loss is
    the batch mean of per-sample losses.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    confmaps = np.asarray(confmaps, dtype=np.float64)
    if x0.ndim != 3 or x0.shape[0] == 0:
        raise DomainError("x0 must be a non-empty (B, H, W) batch")
    b = x0.shape[0]
    if t is None:
        t = rng.integers(1, schedule.n_steps + 1, size=b)
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (b,))
    if eps is None:
        eps = rng.normal(x0.shape)
    eps = np.asarray(eps, dtype=np.float64)

    x_t = forward_noise(x0, t, eps, schedule)
    eps_hat, cache = model.forward(make_inputs(x_t, confmaps, t, schedule.n_steps), keep_cache=True)
    diff = eps_hat - eps
    mse = float(np.mean(diff * diff))
    g_eps = 2.0 * diff / diff.size
    loss = mse
    sel = np.arange(b) if tcr_config.max_timestep is None else np.flatnonzero(t <= tcr_config.max_timestep)
    if lambda_tcr > 0 and sel.size:
        # regularizer is averaged over the whole batch, zero for unselected rows
        ts = t[sel]
        x0_hat = reconstruct_x0(x_t[sel], ts, eps_hat[sel], schedule)
        reg, g_x0 = tcr_and_grad(x0_hat, x0[sel], tcr_config)
        frac = sel.size / b
        ab = _per_sample(schedule.alpha_bar(ts), 3)
        g_eps[sel] -= lambda_tcr * frac * np.sqrt(1.0 - ab) / np.sqrt(ab) * g_x0
        loss = mse + lambda_tcr * frac * reg
    if not np.isfinite(loss):
        per = np.mean(diff * diff, axis=(1, 2))
        bad = [int(i) for i in np.flatnonzero(~np.isfinite(per))] or list(range(b))
        raise NumericError(f"non-finite loss; batch indices {bad}, timesteps {[int(t[i]) for i in bad]}")
    grad = model.backward(cache, g_eps)
    return loss, grad


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 3e-5
    weight_decay: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    epochs: int = 50
    steps: int | None = None

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise DomainError("need lr > 0, batch_size >= 1, epochs >= 0")
        if self.steps is not None and self.steps < 0:
            raise DomainError("steps must be >= 0")


@dataclass
class AdamState:
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def ensure(self, n: int) -> "AdamState":
        if self.m is None:
            self.m = np.zeros(n)
        if self.v is None:
            self.v = np.zeros(n)
        return self


def adam_update(params: np.ndarray, grad: np.ndarray, state: AdamState, cfg: OptimizerConfig) -> np.ndarray:
    state.ensure(params.size)
    g = grad + cfg.weight_decay * params
    state.step += 1
    state.m = cfg.beta1 * state.m + (1 - cfg.beta1) * g
    state.v = cfg.beta2 * state.v + (1 - cfg.beta2) * g * g
    m_hat = state.m / (1 - cfg.beta1 ** state.step)
    v_hat = state.v / (1 - cfg.beta2 ** state.step)
    return params - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


@dataclass
class TrainResult:
    model: ConvDenoiser
    history: list[float] = field(default_factory=list)
    opt_state: AdamState = field(default_factory=AdamState)


def train(model: ConvDenoiser, x0: np.ndarray, confmaps: np.ndarray, schedule: DiffusionSchedule,
          opt: OptimizerConfig, tcr_config: TcrConfig, rng: SeededRng,
          opt_state: AdamState | None = None) -> TrainResult:
    """Minibatch Adam on ``(x0, confmap)`` pairs; reshuffles every epoch.

    Runs ``opt.steps`` updates when set, otherwise ``opt.epochs`` full passes.
    The input model is not modified.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    confmaps = np.asarray(confmaps, dtype=np.float64)
    n = x0.shape[0]
    if n == 0:
        raise DomainError("training set is empty")
    per_epoch = -(-n // opt.batch_size)
    total = opt.steps if opt.steps is not None else opt.epochs * per_epoch
    model = ConvDenoiser(model.spec, model.params, compute_dtype=model.compute_dtype)
    state = opt_state if opt_state is not None else AdamState()
    state.ensure(model.params.size)
    history: list[float] = []
    order: np.ndarray = np.empty(0, dtype=np.int64)
    for step in range(total):
        pos = (step % per_epoch) * opt.batch_size
        if pos == 0:
            order = rng.permutation(n)
        idx = order[pos:pos + opt.batch_size]
        try:
            loss, grad = loss_and_gradient(model, x0[idx], confmaps[idx], schedule, tcr_config,
                                           tcr_config.lambda_tcr, rng)
        except NumericError as exc:
            raise NumericError(f"training diverged at step {step}: {exc}") from None
        model.params = adam_update(model.params, grad, state, opt)
        if not np.all(np.isfinite(model.params)):
            raise NumericError(f"training diverged at step {step}: non-finite parameters")
        history.append(loss)
        if step % 500 == 0:
            log.debug("step %d loss %.5f", step, loss)
    return TrainResult(model, history, state)
