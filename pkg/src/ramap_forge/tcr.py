"""Target-consistency regularizer: CFAR-like adaptive threshold, soft detection
maps and a focal consistency loss, with an exact backward pass."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DomainError

PROB_EPS = 1e-7


@dataclass(frozen=True)
class TcrConfig:
    window: int = 9
    w: float = 3.0
    alpha: float = 10.0
    gamma: float = 2.0
    lambda_tcr: float = 0.1
    max_timestep: int | None = 10  # apply only where t <= max_timestep; None means every t

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise DomainError(f"window must be an odd integer >= 3, got {self.window}")
        if self.w < 0 or self.gamma < 0 or self.lambda_tcr < 0:
            raise DomainError("w, gamma and lambda_tcr must be >= 0")
        if not self.alpha > 0:
            raise DomainError(f"alpha must be > 0, got {self.alpha}")
        if self.max_timestep is not None and self.max_timestep < 1:
            raise DomainError(f"max_timestep must be >= 1, got {self.max_timestep}")


@lru_cache(maxsize=32)
def pooling_matrix(n: int, window: int) -> np.ndarray:
    """(n, n) operator for a centred moving average with reflect padding.

    Box pooling of a 2-D map ``x`` is ``A_r @ x @ A_c.T``; the adjoint is
    ``A_r.T @ g @ A_c``.
    """
    h = window // 2
    padded = np.pad(np.eye(n), ((h, h), (0, 0)), mode="reflect")
    csum = np.vstack([np.zeros((1, n)), np.cumsum(padded, axis=0)])
    mat = (csum[window:] - csum[:-window]) / window
    mat.setflags(write=False)
    return mat


def _pool(x: np.ndarray, window: int) -> np.ndarray:
    a_r = pooling_matrix(x.shape[-2], window)
    a_c = pooling_matrix(x.shape[-1], window)
    return a_r @ x @ a_c.T


def _pool_adjoint(g: np.ndarray, window: int) -> np.ndarray:
    a_r = pooling_matrix(g.shape[-2], window)
    a_c = pooling_matrix(g.shape[-1], window)
    return a_r.T @ g @ a_c


def local_stats(x: np.ndarray, window: int):
    mean = _pool(x, window)
    var = _pool(x * x, window) - mean * mean
    return mean, np.sqrt(np.maximum(var, 0.0)), var


def adaptive_threshold(x: np.ndarray, config: TcrConfig) -> np.ndarray:
    mean, std, _ = local_stats(np.asarray(x, dtype=np.float64), config.window)
    return mean + config.w * std


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def probability_map(x: np.ndarray, threshold: np.ndarray, alpha: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != np.shape(threshold):
        raise DomainError(f"shape mismatch {x.shape} vs {np.shape(threshold)}")
    return sigmoid(alpha * (x - threshold))


def detection_map(x: np.ndarray, config: TcrConfig) -> np.ndarray:
    """Soft detection map of ``x`` against its own adaptive threshold."""
    return probability_map(x, adaptive_threshold(x, config), config.alpha)


def focal_terms(p: np.ndarray, p_hat: np.ndarray, gamma: float) -> np.ndarray:
    """Per-cell focal consistency loss (non-negative)."""
    q = np.clip(p_hat, PROB_EPS, 1 - PROB_EPS)
    return -(p * (1 - q) ** gamma * np.log(q) + (1 - p) * q ** gamma * np.log(1 - q))


def tcr(x0_hat: np.ndarray, x0: np.ndarray, config: TcrConfig) -> float:
    return tcr_and_grad(x0_hat, x0, config, need_grad=False)[0]


def tcr_and_grad(x0_hat: np.ndarray, x0: np.ndarray, config: TcrConfig, need_grad: bool = True):
    """Mean focal loss between detection maps of ``x0_hat`` and ``x0``.

    Returns ``(loss, d loss / d x0_hat)``; the gradient flows through the
    adaptive threshold of ``x0_hat`` as well. Extra leading axes are treated as
    a batch: the loss is the batch mean.
    """
    x = np.asarray(x0_hat, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    if x.shape != x0.shape:
        raise DomainError(f"shape mismatch {x.shape} vs {x0.shape}")
    win, w, alpha, gamma = config.window, config.w, config.alpha, config.gamma

    p = detection_map(x0, config)
    mean, std, var = local_stats(x, win)
    s = sigmoid(alpha * (x - mean - w * std))
    terms = focal_terms(p, s, gamma)
    n = terms.size
    loss = float(terms.sum() / n)
    if not need_grad:
        return loss, None

    inside = (s > PROB_EPS) & (s < 1 - PROB_EPS)
    q = np.clip(s, PROB_EPS, 1 - PROB_EPS)
    log_q, log_1q = np.log(q), np.log(1 - q)
    # d/dq of -(p (1-q)^g log q + (1-p) q^g log(1-q))
    if gamma == 0:
        dq = -(p / q - (1 - p) / (1 - q))
    else:
        dq = -(p * (-gamma * (1 - q) ** (gamma - 1) * log_q + (1 - q) ** gamma / q)
               + (1 - p) * (gamma * q ** (gamma - 1) * log_1q - q ** gamma / (1 - q)))
    g_z = np.where(inside, dq * s * (1 - s), 0.0) / n
    g_x = alpha * g_z
    g_tau = -alpha * g_z
    pos = var > 0
    g_var = np.where(pos, w * g_tau / (2 * np.where(pos, std, 1.0)), 0.0)
    g_mean = g_tau - 2 * mean * g_var
    g_x = g_x + _pool_adjoint(g_mean, win) + 2 * x * _pool_adjoint(g_var, win)
    return loss, g_x
