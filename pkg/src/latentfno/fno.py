"""One-dimensional Fourier neural operator with a hand-written backward pass.

Architecture: affine lifting to ``hidden`` channels, ``n_layers`` blocks of

    v <- act(W v + b + irfft(R . rfft(v)[:m]))

and a two-layer pointwise projection to one output channel.  ``R`` is a
complex ``(modes, hidden, hidden)`` tensor indexed by absolute frequency bin,
so the same weights apply at every grid resolution; when a grid has fewer
than ``modes`` non-negative bins, all of them are kept.

Spectral truncation is computed either with a cached partial DFT basis (a
dense matmul, faster when few modes are kept) or with real FFTs.  Both give
identical results up to rounding.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
import scipy.fft
from scipy.special import erf

from .errors import ConfigError, InvalidInputError

ACTIVATIONS = ("gelu", "gelu_exact", "linear")
MATMUL_MAX_MODES = 128
SPECTRAL_BACKEND = "auto"  # "auto" | "matmul" | "fft"


@dataclass(frozen=True)
class FnoConfig:
    n_layers: int = 12
    hidden: int = 24
    modes: int = 256
    in_channels: int = 23
    projection: int = 96
    activation: str = "gelu"
    out_scale: float = 1.0
    out_shift: float = 0.0

    def __post_init__(self):
        for name in ("n_layers", "hidden", "modes", "in_channels", "projection"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        if not (math.isfinite(self.out_scale) and self.out_scale != 0 and math.isfinite(self.out_shift)):
            raise ConfigError("output scale must be finite and nonzero")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FnoConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown FNO config key(s): {sorted(unknown)}")
        return cls(**d)


def parameter_shapes(cfg: FnoConfig) -> "OrderedDict[str, tuple]":
    H, P = cfg.hidden, cfg.projection
    shapes = OrderedDict()
    shapes["lift.w"] = (H, cfg.in_channels)
    shapes["lift.b"] = (H,)
    for l in range(cfg.n_layers):
        shapes[f"layer{l}.spectral"] = (cfg.modes, H, H)
        shapes[f"layer{l}.w"] = (H, H)
        shapes[f"layer{l}.b"] = (H,)
    shapes["proj1.w"] = (P, H)
    shapes["proj1.b"] = (P,)
    shapes["proj2.w"] = (1, P)
    shapes["proj2.b"] = (1,)
    return shapes


def is_spectral(name: str) -> bool:
    return name.endswith(".spectral")


class FnoParameters:
    """Named parameter arrays; spectral weights are complex."""

    def __init__(self, config: FnoConfig, arrays: dict):
        self.config = config
        shapes = parameter_shapes(config)
        if list(arrays) != list(shapes):
            missing = set(shapes) ^ set(arrays)
            if missing:
                raise InvalidInputError(f"parameter names do not match config: {sorted(missing)}")
            arrays = {k: arrays[k] for k in shapes}
        for name, shape in shapes.items():
            if tuple(arrays[name].shape) != shape:
                raise InvalidInputError(f"{name}: shape {arrays[name].shape} != {shape}")
        self.arrays = OrderedDict(arrays)

    @property
    def real_dtype(self):
        return self.arrays["lift.w"].dtype

    def __getitem__(self, name):
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    def copy(self) -> "FnoParameters":
        return FnoParameters(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def astype(self, real_dtype) -> "FnoParameters":
        real_dtype = np.dtype(real_dtype)
        cplx = np.result_type(real_dtype, np.complex64)
        return FnoParameters(self.config, {
            k: v.astype(cplx if is_spectral(k) else real_dtype) for k, v in self.arrays.items()})

    def with_config(self, config: FnoConfig) -> "FnoParameters":
        return FnoParameters(config, self.arrays)

    def n_scalars(self) -> int:
        return sum(v.size * (2 if np.iscomplexobj(v) else 1) for v in self.arrays.values())


def init_params(cfg: FnoConfig, seed: int = 0, dtype=np.float32) -> FnoParameters:
    """Fan-in scaled uniform init; spectral weights scaled by 1/(H*H)."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)
    cplx = np.result_type(dtype, np.complex64)
    arrays = OrderedDict()
    for name, shape in parameter_shapes(cfg).items():
        if is_spectral(name):
            scale = 1.0 / (shape[1] * shape[2])
            w = scale * (rng.uniform(0, 1, shape) + 1j * rng.uniform(0, 1, shape))
            arrays[name] = w.astype(cplx)
        elif name.endswith(".w"):
            bound = 1.0 / math.sqrt(shape[1])
            arrays[name] = rng.uniform(-bound, bound, shape).astype(dtype)
        else:
            arrays[name] = np.zeros(shape, dtype=dtype)
    return FnoParameters(cfg, arrays)


# -- activations -------------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)


def _act(z, kind):
    """Returns (activation, cache for the derivative)."""
    if kind == "linear":
        return z, None
    if kind == "gelu":
        u = _GELU_C * (z + 0.044715 * (z * z * z))
        th = np.tanh(u)
        return 0.5 * z * (1 + th), th
    cdf = 0.5 * (1 + erf(z / math.sqrt(2)))
    return z * cdf, cdf


def _act_grad(z, cache, kind):
    if kind == "linear":
        return np.ones_like(z)
    if kind == "gelu":
        th = cache
        du = _GELU_C * (1 + 3 * 0.044715 * z * z)
        return 0.5 * (1 + th) + 0.5 * z * (1 - th * th) * du
    pdf = np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    return cache + z * pdf


def activation(z, kind="gelu"):
    return _act(np.asarray(z), kind)[0]


# -- truncated spectral transforms ---------------------------------------------

def kept_modes(n: int, modes: int) -> int:
    return min(modes, n // 2 + 1)


def inverse_weights(n: int, m: int) -> np.ndarray:
    """Hermitian multiplicity c_k: 1 at DC and Nyquist, 2 elsewhere."""
    c = np.full(m, 2.0)
    c[0] = 1.0
    if n % 2 == 0 and m == n // 2 + 1:
        c[-1] = 1.0
    return c


class _MatmulPlan:
    """Truncated rfft / irfft as products with cached real bases."""

    def __init__(self, n, m, dtype):
        self.n, self.m = n, m
        t = np.arange(n)
        k = np.arange(m)
        theta = 2 * np.pi * (np.outer(t, k) % n) / n
        cos, sin = np.cos(theta), np.sin(theta)
        self.fwd = np.ascontiguousarray(np.concatenate([cos, -sin], axis=1).astype(dtype))
        c = inverse_weights(n, m)[:, None] / n
        self.inv = np.ascontiguousarray(np.concatenate([c * cos.T, -c * sin.T], axis=0).astype(dtype))

    def forward(self, v):
        z = v @ self.fwd
        return z[..., :self.m], z[..., self.m:]

    def inverse(self, yr, yi):
        return np.concatenate([yr, yi], axis=-1) @ self.inv

    def inverse_adjoint(self, g):
        z = g @ self.inv.T
        return z[..., :self.m], z[..., self.m:]

    def forward_adjoint(self, gr, gi):
        return np.concatenate([gr, gi], axis=-1) @ self.fwd.T


class _FftPlan:
    def __init__(self, n, m, dtype):
        self.n, self.m, self.dtype = n, m, np.dtype(dtype)
        self.c_over_n = (inverse_weights(n, m) / n).astype(dtype)
        self.n_over_c = (n / inverse_weights(n, m)).astype(dtype)

    def _pad(self, z):
        full = np.zeros(z.shape[:-1] + (self.n // 2 + 1,), dtype=z.dtype)
        full[..., :self.m] = z
        return full

    def forward(self, v):
        z = scipy.fft.rfft(v, axis=-1)[..., :self.m]
        return z.real.astype(self.dtype), z.imag.astype(self.dtype)

    def inverse(self, yr, yi):
        return scipy.fft.irfft(self._pad(yr + 1j * yi), n=self.n, axis=-1).astype(self.dtype)

    def inverse_adjoint(self, g):
        z = scipy.fft.rfft(g, axis=-1)[..., :self.m] * self.c_over_n
        return z.real.astype(self.dtype), z.imag.astype(self.dtype)

    def forward_adjoint(self, gr, gi):
        z = (gr + 1j * gi) * self.n_over_c
        return scipy.fft.irfft(self._pad(z), n=self.n, axis=-1).astype(self.dtype)


@lru_cache(maxsize=16)
def _plan(n, m, dtype_str, backend):
    if backend == "auto":
        backend = "matmul" if m <= MATMUL_MAX_MODES else "fft"
    cls = {"matmul": _MatmulPlan, "fft": _FftPlan}[backend]
    return cls(n, m, np.dtype(dtype_str))


def spectral_plan(n, m, dtype, backend=None):
    backend = backend or SPECTRAL_BACKEND
    if backend not in ("auto", "matmul", "fft"):
        raise ConfigError(f"unknown spectral backend {backend!r}")
    return _plan(int(n), int(m), np.dtype(dtype).str, backend)


def _mix(Vr, Vi, R):
    """Per-mode channel mixing: Y[b,k,o] = sum_i V[b,i,k] R[k,i,o]."""
    V = (Vr + 1j * Vi).transpose(2, 0, 1)          # (m, B, I)
    Y = np.matmul(V, R)                             # (m, B, O)
    Y = Y.transpose(1, 2, 0)                        # (B, O, m)
    return V, Y


def spectral_conv(v, weights, backend=None) -> np.ndarray:
    """``irfft(R . rfft(v)[:m])`` over the last axis of ``(B, I, n)`` or ``(I, n)``."""
    v = np.asarray(v)
    single = v.ndim == 2
    if single:
        v = v[None]
    if v.ndim != 3 or v.shape[1] != weights.shape[1]:
        raise InvalidInputError(f"input shape {v.shape} does not match weights {weights.shape}")
    real = np.result_type(v.dtype, weights.real.dtype)
    n = v.shape[-1]
    m = kept_modes(n, weights.shape[0])
    plan = spectral_plan(n, m, real, backend)
    Vr, Vi = plan.forward(v.astype(real, copy=False))
    _, Y = _mix(Vr, Vi, weights[:m])
    out = plan.inverse(np.ascontiguousarray(Y.real, dtype=real), np.ascontiguousarray(Y.imag, dtype=real))
    return out[0] if single else out


# -- forward / backward -------------------------------------------------------

def _pointwise(w, b, v):
    """Channel mixing of ``(B, C, n)`` by ``(O, C)`` plus bias."""
    return np.matmul(w, v) + b[:, None]


def forward(params: FnoParameters, x, keep: bool = False, backend=None):
    """Surrogate voltage for input channels ``x`` of shape ``(B, C, n)`` or ``(C, n)``.

    With ``keep=True`` also returns the cache consumed by :func:`backward`.
    """
    cfg = params.config
    x = np.asarray(x)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1] != cfg.in_channels:
        raise InvalidInputError(f"expected (B, {cfg.in_channels}, n) input, got {x.shape}")
    dt = params.real_dtype
    x = x.astype(dt, copy=False)
    n = x.shape[-1]
    if n < 2:
        raise InvalidInputError("grid must have at least 2 points")
    m = kept_modes(n, cfg.modes)
    plan = spectral_plan(n, m, dt, backend)

    v = _pointwise(params["lift.w"], params["lift.b"], x)
    layers = []
    for l in range(cfg.n_layers):
        Vr, Vi = plan.forward(v)
        V, Y = _mix(Vr, Vi, params[f"layer{l}.spectral"][:m])
        s = plan.inverse(np.ascontiguousarray(Y.real), np.ascontiguousarray(Y.imag))
        z = _pointwise(params[f"layer{l}.w"], params[f"layer{l}.b"], v) + s
        v_next, ac = _act(z, cfg.activation)
        layers.append((v, V, z, ac) if keep else None)
        v = v_next
    q_pre = _pointwise(params["proj1.w"], params["proj1.b"], v)
    q, qc = _act(q_pre, cfg.activation)
    out = _pointwise(params["proj2.w"], params["proj2.b"], q)[:, 0, :]
    out = out * dt.type(cfg.out_scale) + dt.type(cfg.out_shift)
    result = out[0] if single else out
    if not keep:
        return result
    cache = {"x": x, "layers": layers, "v_last": v, "q_pre": q_pre, "q": q, "qc": qc,
             "plan": plan, "m": m, "single": single}
    return result, cache


def backward(params: FnoParameters, cache: dict, g_out, need_input_grad: bool = False):
    """Gradients of ``sum(g_out * forward(x))`` with respect to all parameters.

    Spectral gradients follow the convention ``dL/dRe + i dL/dIm``.  Returns
    a dict of gradients (and the input gradient when requested).
    """
    cfg = params.config
    dt = params.real_dtype
    plan, m = cache["plan"], cache["m"]
    g = np.asarray(g_out, dtype=dt)
    if cache["single"]:
        g = g[None]
    g = g * dt.type(cfg.out_scale)
    grads = OrderedDict()

    q, q_pre, qc, v = cache["q"], cache["q_pre"], cache["qc"], cache["v_last"]
    grads["proj2.w"] = np.einsum("bn,bpn->p", g, q)[None, :].astype(dt)
    grads["proj2.b"] = np.array([g.sum()], dtype=dt)
    gq = params["proj2.w"][0][None, :, None] * g[:, None, :]
    gq *= _act_grad(q_pre, qc, cfg.activation)
    grads["proj1.w"] = np.tensordot(gq, v, axes=([0, 2], [0, 2])).astype(dt)
    grads["proj1.b"] = gq.sum(axis=(0, 2)).astype(dt)
    gv = np.matmul(params["proj1.w"].T, gq)

    layer_grads = {}
    for l in reversed(range(cfg.n_layers)):
        v_in, V, z, ac = cache["layers"][l]
        gz = gv * _act_grad(z, ac, cfg.activation)
        gW = np.tensordot(gz, v_in, axes=([0, 2], [0, 2])).astype(dt)
        gb = gz.sum(axis=(0, 2)).astype(dt)
        gYr, gYi = plan.inverse_adjoint(gz)
        G = (gYr + 1j * gYi).transpose(2, 0, 1)       # (m, B, O)
        R = params[f"layer{l}.spectral"]
        gR = np.zeros_like(R)
        gR[:m] = np.matmul(np.conj(V).transpose(0, 2, 1), G)   # (m, I, O)
        gV = np.matmul(G, np.conj(R[:m]).transpose(0, 2, 1))   # (m, B, I)
        gV = gV.transpose(1, 2, 0)
        gv = np.matmul(params[f"layer{l}.w"].T, gz) + plan.forward_adjoint(
            np.ascontiguousarray(gV.real), np.ascontiguousarray(gV.imag))
        layer_grads[l] = (gR, gW, gb)

    x = cache["x"]
    grads["lift.w"] = np.tensordot(gv, x, axes=([0, 2], [0, 2])).astype(dt)
    grads["lift.b"] = gv.sum(axis=(0, 2)).astype(dt)
    ordered = OrderedDict()
    ordered["lift.w"], ordered["lift.b"] = grads["lift.w"], grads["lift.b"]
    for l in range(cfg.n_layers):
        gR, gW, gb = layer_grads[l]
        ordered[f"layer{l}.spectral"] = gR
        ordered[f"layer{l}.w"] = gW
        ordered[f"layer{l}.b"] = gb
    for k in ("proj1.w", "proj1.b", "proj2.w", "proj2.b"):
        ordered[k] = grads[k]
    if need_input_grad:
        gx = np.matmul(params["lift.w"].T, gv)
        return ordered, (gx[0] if cache["single"] else gx)
    return ordered


def predict(params: FnoParameters, x, batch_size: int = 16, backend=None) -> np.ndarray:
    """Chunked inference for ``(B, C, n)`` inputs."""
    x = np.asarray(x)
    if x.ndim == 2:
        return forward(params, x, backend=backend)
    outs = [forward(params, x[i:i + batch_size], backend=backend)
            for i in range(0, x.shape[0], batch_size)]
    return np.concatenate(outs, axis=0) if outs else np.empty((0, x.shape[-1]), params.real_dtype)
