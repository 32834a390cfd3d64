"""Small convolutional noise predictor driven from numpy, with torch doing the convolutions.

Input channels are ``[x_t, confmap channels..., t/T]``; every stage is a
'same' zero-padded convolution, followed by tanh except for the last.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import FormatError

CHECKPOINT_MAGIC = b"DNSR"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DenoiserSpec:
    in_channels: int = 5
    hidden: int = 8
    n_stages: int = 3
    kernel: int = 3
    out_channels: int = 1

    def __post_init__(self):
        if self.n_stages < 1 or self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("need n_stages >= 1 and an odd kernel size")
        if min(self.in_channels, self.hidden, self.out_channels) < 1:
            raise ValueError("channel counts must be positive")

    def layer_shapes(self) -> list[tuple[int, int, int]]:
        """(out, in, k) per stage."""
        chans = [self.in_channels] + [self.hidden] * (self.n_stages - 1) + [self.out_channels]
        return [(chans[s + 1], chans[s], self.kernel) for s in range(self.n_stages)]

    @property
    def n_params(self) -> int:
        return sum(o * c * k * k + o for o, c, k in self.layer_shapes())


def set_torch_threads(n: int = 1) -> None:
    """Intra-op threads for the convolutions; the maps are tiny, so 1 is usually fastest."""
    torch.set_num_threads(max(1, int(n)))


def _conv(x, weight, bias):
    return F.conv2d(x, weight, bias, padding=weight.shape[-1] // 2)


class ConvDenoiser:
    """Flat float64 parameter vector; convolutions run in torch at ``compute_dtype``.

    The backward pass is reverse-mode through the conv stack, seeded with an
    externally supplied output gradient so losses can live in numpy.
    """

    def __init__(self, spec: DenoiserSpec, params: np.ndarray | None = None, rng=None,
                 compute_dtype=np.float64):
        self.spec = spec
        if params is None:
            params = self.init_params(spec, rng)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (spec.n_params,):
            raise ValueError(f"expected {spec.n_params} parameters, got {params.shape}")
        self.params = params.copy()
        self.compute_dtype = np.dtype(compute_dtype)

    @staticmethod
    def init_params(spec: DenoiserSpec, rng) -> np.ndarray:
        gen = rng.generator if hasattr(rng, "generator") else np.random.default_rng(rng)
        chunks = []
        shapes = spec.layer_shapes()
        for s, (o, c, k) in enumerate(shapes):
            scale = np.sqrt(1.0 / (c * k * k))
            if s == len(shapes) - 1:
                scale *= 0.1
            chunks.append(gen.standard_normal(o * c * k * k) * scale)
            chunks.append(np.zeros(o))
        return np.concatenate(chunks)

    def _tensors(self, requires_grad: bool):
        flat = torch.from_numpy(self.params.astype(self.compute_dtype))
        flat.requires_grad_(requires_grad)
        out, pos = [], 0
        for o, c, k in self.spec.layer_shapes():
            nw = o * c * k * k
            out.append((flat[pos:pos + nw].view(o, c, k, k), flat[pos + nw:pos + nw + o]))
            pos += nw + o
        return flat, out

    def forward(self, inputs: np.ndarray, keep_cache: bool = False):
        """inputs: (B, C_in, H, W) -> (B, H, W) predicted noise."""
        if inputs.shape[1] != self.spec.in_channels:
            raise ValueError(f"expected {self.spec.in_channels} input channels, got {inputs.shape[1]}")
        x = torch.from_numpy(np.ascontiguousarray(inputs, dtype=self.compute_dtype))
        with torch.set_grad_enabled(keep_cache):
            flat, layers = self._tensors(keep_cache)
            for s, (w, b) in enumerate(layers):
                x = _conv(x, w, b)
                if s < len(layers) - 1:
                    x = torch.tanh(x)
            out = x[:, 0]
        result = out.detach().numpy().astype(np.float64)
        return (result, (flat, out)) if keep_cache else result

    def backward(self, cache, grad_out: np.ndarray) -> np.ndarray:
        """Gradient of a scalar w.r.t. the flat parameters, given d/d(output)."""
        flat, out = cache
        out.backward(torch.from_numpy(np.ascontiguousarray(grad_out, dtype=self.compute_dtype)))
        return flat.grad.numpy().astype(np.float64)

    def __call__(self, inputs):
        return self.forward(inputs)


def make_inputs(x_t: np.ndarray, confmaps: np.ndarray, t, n_steps: int) -> np.ndarray:
    """Stack noisy maps (B,H,W), conditioning (B,Nc,H,W) and t/T into (B, Nc+2, H, W)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    b, h, w = x_t.shape
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
    tchan = np.broadcast_to((t / n_steps)[:, None, None, None], (b, 1, h, w))
    return np.concatenate([x_t[:, None], np.asarray(confmaps, dtype=np.float64), tchan], axis=1)


# --- checkpoint -------------------------------------------------------------

_CKPT_HEAD = struct.Struct("<4sH5IQ")


def checkpoint_bytes(model: ConvDenoiser, opt_state=None) -> bytes:
    """Serialize parameters and Adam state (step, first and second moments)."""
    s = model.spec
    n = s.n_params
    head = _CKPT_HEAD.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, s.n_stages, s.in_channels,
                           s.hidden, s.out_channels, s.kernel, n)
    if opt_state is None:
        step, m, v = 0, np.zeros(n), np.zeros(n)
    else:
        step, m, v = opt_state.step, opt_state.m, opt_state.v
    return b"".join([
        head,
        np.asarray(model.params, dtype="<f4").tobytes(),
        struct.pack("<Q", step),
        np.asarray(m, dtype="<f4").tobytes(),
        np.asarray(v, dtype="<f4").tobytes(),
    ])


def save_checkpoint(path, model: ConvDenoiser, opt_state=None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, opt_state))


def load_checkpoint(path):
    """Returns ``(model, AdamState)``."""
    from .diffusion import AdamState

    buf = Path(path).read_bytes()
    if len(buf) < _CKPT_HEAD.size:
        raise FormatError(f"{path}: truncated checkpoint header")
    magic, version, n_stages, c_in, hidden, c_out, kernel, n = _CKPT_HEAD.unpack_from(buf)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    try:
        spec = DenoiserSpec(c_in, hidden, n_stages, kernel, c_out)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if spec.n_params != n:
        raise FormatError(f"{path}: parameter count {n} inconsistent with architecture ({spec.n_params})")
    expected = _CKPT_HEAD.size + 4 * n + 8 + 8 * n
    if len(buf) != expected:
        raise FormatError(f"{path}: size mismatch, expected {expected} bytes, got {len(buf)}")
    off = _CKPT_HEAD.size
    params = np.frombuffer(buf, "<f4", n, off).astype(np.float64)
    off += 4 * n
    (step,) = struct.unpack_from("<Q", buf, off)
    off += 8
    m = np.frombuffer(buf, "<f4", n, off).astype(np.float64)
    v = np.frombuffer(buf, "<f4", n, off + 4 * n).astype(np.float64)
    if not (np.all(np.isfinite(params)) and np.all(np.isfinite(m)) and np.all(np.isfinite(v))):
        raise FormatError(f"{path}: non-finite values in checkpoint")
    return ConvDenoiser(spec, params), AdamState(step, m, v)
