"""Frequency-modulated sinusoidal encodings and input-channel assembly.

A scalar feature ``p`` becomes ``2K`` time series

    [sin(2^0 pi p t), cos(2^0 pi p t), ..., sin(2^(K-1) pi p t), cos(2^(K-1) pi p t)]

where ``t`` is time normalized by a fixed window length (``time_scale_ms``),
so that the same physical instant gets the same embedding at every grid
resolution.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvalidInputError
from .signal import Stimulus, TimeGrid, render_stimulus

LATENT_LO, LATENT_HI = 0.5, 3.5
LATENT_FEATURES = ("i_thr", "s_thr", "ahp_depth")


class LatentExtrapolationWarning(UserWarning):
    """A latent coordinate fell outside the normalization bounds."""


@dataclass(frozen=True)
class EmbeddingConfig:
    k_current: int = 9
    k_feature: int = 1
    include_raw_current: bool = True
    features: tuple = ("i_thr", "s_thr")
    time_scale_ms: float = 515.0

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        if self.k_current < 1 or self.k_feature < 1:
            raise ConfigError("embedding frequency counts must be >= 1")
        bad = [f for f in self.features if f not in LATENT_FEATURES]
        if bad or len(set(self.features)) != len(self.features):
            raise ConfigError(f"embedding features must be distinct names from {LATENT_FEATURES}")
        if not self.time_scale_ms > 0:
            raise ConfigError("time_scale_ms must be positive")

    @property
    def n_channels(self) -> int:
        return int(self.include_raw_current) + 2 * self.k_current + 2 * self.k_feature * len(self.features)


@dataclass(frozen=True)
class LatentBounds:
    """Per-feature (min, max) of the training ensemble."""

    ranges: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, (lo, hi) in self.ranges.items():
            if name not in LATENT_FEATURES:
                raise ConfigError(f"unknown latent feature {name!r}")
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise ConfigError(f"degenerate normalization bounds for {name}: ({lo}, {hi})")

    @classmethod
    def from_models(cls, models, features=LATENT_FEATURES[:2]) -> "LatentBounds":
        ranges = {}
        for name in features:
            vals = np.array([getattr(m, name) for m in models], dtype=float)
            ranges[name] = (float(np.min(vals)), float(np.max(vals)))
        return cls(ranges)


@dataclass(frozen=True)
class LatentPoint:
    """Normalized latent coordinates; nominal range is [0.5, 3.5] per axis."""

    i_thr_norm: float
    s_thr_norm: float
    ahp_depth_norm: float = float("nan")
    out_of_bounds: bool = False

    def coordinate(self, name: str) -> float:
        return getattr(self, f"{name}_norm")

    def as_array(self, features=LATENT_FEATURES[:2]) -> np.ndarray:
        return np.array([self.coordinate(f) for f in features])

    @classmethod
    def from_array(cls, xy, features=LATENT_FEATURES[:2]) -> "LatentPoint":
        kw = {f"{f}_norm": float(x) for f, x in zip(features, xy)}
        kw.setdefault("i_thr_norm", 2.0)
        kw.setdefault("s_thr_norm", 2.0)
        vals = [float(x) for x in xy]
        kw["out_of_bounds"] = any(not LATENT_LO - 1e-12 <= x <= LATENT_HI + 1e-12 for x in vals)
        return cls(**kw)


def nerf_embed(p: float, t, K: int) -> np.ndarray:
    """``(2K, len(t))`` stack of sin/cos with frequencies ``2^k pi p``."""
    if int(K) != K or K < 1:
        raise InvalidInputError(f"K must be an integer >= 1, got {K}")
    t = np.asarray(t, dtype=np.float64)
    phase = np.pi * float(p) * (2.0 ** np.arange(K))[:, None] * t[None, :]
    out = np.empty((2 * K, t.shape[0]))
    out[0::2] = np.sin(phase)
    out[1::2] = np.cos(phase)
    return out


def _affine(raw: float, lo: float, hi: float) -> float:
    return LATENT_LO + (LATENT_HI - LATENT_LO) * (raw - lo) / (hi - lo)


def normalize_latent(raw_i_thr: float, raw_s_thr: float, bounds: LatentBounds,
                     raw_ahp_depth: float | None = None) -> LatentPoint:
    """Map raw features affinely so each bound pair goes to (0.5, 3.5)."""
    raw = {"i_thr": raw_i_thr, "s_thr": raw_s_thr, "ahp_depth": raw_ahp_depth}
    kw = {}
    oob = False
    for name, (lo, hi) in bounds.ranges.items():
        if not lo < hi:
            raise ConfigError(f"degenerate normalization bounds for {name}")
        if raw[name] is None:
            raise InvalidInputError(f"no raw value supplied for latent feature {name}")
        x = _affine(float(raw[name]), lo, hi)
        oob |= not LATENT_LO - 1e-12 <= x <= LATENT_HI + 1e-12
        kw[f"{name}_norm"] = x
    for name in ("i_thr", "s_thr"):
        if f"{name}_norm" not in kw:
            raise ConfigError(f"normalization bounds missing for {name}")
    if oob:
        warnings.warn(f"latent point {kw} lies outside [{LATENT_LO}, {LATENT_HI}]",
                      LatentExtrapolationWarning, stacklevel=2)
    return LatentPoint(**kw, out_of_bounds=oob)


def model_latent(model, bounds: LatentBounds) -> LatentPoint:
    ahp = model.ahp_depth if "ahp_depth" in bounds.ranges else None
    return normalize_latent(model.i_thr, model.s_thr, bounds, ahp)


def normalized_time(grid: TimeGrid, cfg: EmbeddingConfig) -> np.ndarray:
    return (grid.times - grid.t0) / cfg.time_scale_ms


def assemble_input(stim: Stimulus, latent: LatentPoint, cfg: EmbeddingConfig) -> np.ndarray:
    """``(n_channels, n)`` stack: current, amplitude embedding, feature embeddings."""
    t = normalized_time(stim.grid, cfg)
    parts = []
    if cfg.include_raw_current:
        parts.append(render_stimulus(stim)[None, :])
    parts.append(nerf_embed(stim.amplitude, t, cfg.k_current))
    for name in cfg.features:
        parts.append(nerf_embed(latent.coordinate(name), t, cfg.k_feature))
    return np.concatenate(parts, axis=0)


def assemble_batch(grid: TimeGrid, onset: float, duration: float, amplitudes,
                   latents: np.ndarray, cfg: EmbeddingConfig,
                   dtype=np.float32) -> np.ndarray:
    """Vectorized ``assemble_input`` for a batch sharing one grid and window.

    ``latents`` is ``(B, len(cfg.features))`` in ``cfg.features`` order.
    """
    amps = np.asarray(amplitudes, dtype=np.float64).reshape(-1)
    lat = np.asarray(latents, dtype=np.float64).reshape(len(amps), len(cfg.features))
    t = normalized_time(grid, cfg)
    B = len(amps)
    out = np.empty((B, cfg.n_channels, grid.n), dtype=dtype)
    c = 0
    if cfg.include_raw_current:
        out[:, 0, :] = 0
        out[:, 0, grid.window(onset, onset + duration)] = amps[:, None]
        c = 1

    def fill(values, K):
        nonlocal c
        freq = np.pi * (2.0 ** np.arange(K))
        phase = values[:, None, None] * freq[None, :, None] * t[None, None, :]
        out[:, c:c + 2 * K:2, :] = np.sin(phase)
        out[:, c + 1:c + 2 * K:2, :] = np.cos(phase)
        c += 2 * K

    fill(amps, cfg.k_current)
    for j in range(len(cfg.features)):
        fill(lat[:, j], cfg.k_feature)
    return out
