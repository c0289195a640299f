"""Uniform time grids, voltage traces, step stimuli and the numerics on them.

FFT convention used throughout the package: the forward transform is
unnormalized and the inverse carries the ``1/n`` factor, i.e.

    X[k] = sum_t x[t] exp(-2 pi i k t / n)
    x[t] = (1/n) sum_k X[k] exp(2 pi i k t / n)

so a constant sequence ``c`` of length ``n`` has ``X[0] = n * c``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .errors import FormatError, InvalidInputError, TruncatedFileError

MAGIC = b"NOBL"
TRACE_VERSION = 1
KIND_TRACE = 1
_TRACE_HEADER = struct.Struct("<4sHHddQ")

# Anti-alias filter used by lowpass_decimate.
FILTER_ORDER = 8
CUTOFF_FRACTION = 0.8

# Tolerance (in units of dt) when mapping a time to a grid index.
_INDEX_SLACK = 1e-7


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    dt: float
    n: int

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise InvalidInputError(f"dt must be positive, got {self.dt}")
        if int(self.n) != self.n or self.n < 2:
            raise InvalidInputError(f"grid needs n >= 2 samples, got {self.n}")
        object.__setattr__(self, "n", int(self.n))

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n)

    @property
    def t_end(self) -> float:
        """Right edge of the sampled window, ``t0 + n * dt``."""
        return self.t0 + self.n * self.dt

    def index_at(self, t: float) -> int:
        """Index of the first sample whose time is >= ``t``."""
        return int(math.ceil((t - self.t0) / self.dt - _INDEX_SLACK))

    def window(self, start: float, stop: float) -> slice:
        """Samples with ``start <= time < stop``, clipped to the grid."""
        i0 = min(max(self.index_at(start), 0), self.n)
        i1 = min(max(self.index_at(stop), 0), self.n)
        return slice(i0, max(i0, i1))

    def decimated(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.t0, self.dt * factor, self.n // factor)


@dataclass(frozen=True)
class Trace:
    grid: TimeGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 1 or v.shape[0] != self.grid.n:
            raise InvalidInputError(
                f"trace has {v.shape} values for a grid of {self.grid.n} samples")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("trace values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def times(self) -> np.ndarray:
        return self.grid.times


@dataclass(frozen=True)
class Stimulus:
    """Square current step of ``amplitude`` nA on ``[onset, onset + duration)``."""

    grid: TimeGrid
    amplitude: float
    onset: float
    duration: float

    def __post_init__(self):
        if not math.isfinite(self.amplitude):
            raise InvalidInputError("stimulus amplitude must be finite")
        if self.duration <= 0:
            raise InvalidInputError(f"stimulus duration must be positive, got {self.duration}")
        slack = _INDEX_SLACK * self.grid.dt
        if self.onset < self.grid.t0 - slack:
            raise InvalidInputError(
                f"stimulus onset {self.onset} precedes grid start {self.grid.t0}")
        if self.onset + self.duration > self.grid.t_end + slack:
            raise InvalidInputError(
                f"stimulus ends at {self.onset + self.duration} past grid end {self.grid.t_end}")

    @property
    def stop(self) -> float:
        return self.onset + self.duration

    @property
    def window(self) -> slice:
        return self.grid.window(self.onset, self.stop)

    def on_grid(self, grid: TimeGrid) -> "Stimulus":
        return Stimulus(grid, self.amplitude, self.onset, self.duration)

    def with_amplitude(self, amplitude: float) -> "Stimulus":
        return Stimulus(self.grid, float(amplitude), self.onset, self.duration)


def render_stimulus(s: Stimulus) -> np.ndarray:
    out = np.zeros(s.grid.n)
    out[s.window] = s.amplitude
    return out


def lowpass_decimate(tr: Trace, factor: int) -> Trace:
    """Zero-phase low-pass filter then keep every ``factor``-th sample.

    The Butterworth cutoff sits at ``CUTOFF_FRACTION`` of the Nyquist
    frequency of the decimated grid.  Trailing samples that do not fill a
    whole decimation block are dropped, so ``n' = n // factor``.
    """
    if int(factor) != factor or factor < 1:
        raise InvalidInputError(f"decimation factor must be an integer >= 1, got {factor}")
    factor = int(factor)
    if factor == 1:
        return tr
    if tr.grid.n <= factor:
        raise InvalidInputError(f"cannot decimate {tr.grid.n} samples by {factor}")
    grid = tr.grid.decimated(factor)
    sos = _antialias_sos(factor)
    filtered = sps.sosfiltfilt(sos, np.asarray(tr.values, dtype=np.float64))
    return Trace(grid, filtered[::factor][: grid.n].copy())


def _antialias_sos(factor: int) -> np.ndarray:
    return sps.butter(FILTER_ORDER, CUTOFF_FRACTION / factor, output="sos")


SUBSAMPLE_STRATEGIES = ("filter_decimate", "filter_truncate", "truncate", "decimate")


def _spectral_truncate(values: np.ndarray, n_out: int) -> np.ndarray:
    """Keep the lowest ``n_out // 2 + 1`` bins and resynthesize on ``n_out`` points."""
    n = values.shape[-1]
    X = np.fft.rfft(values)[: n_out // 2 + 1]
    return np.fft.irfft(X, n_out) * (n_out / n)


def subsample(tr: Trace, factor: int, strategy: str = "filter_decimate") -> Trace:
    """Reduce the sampling rate by ``factor`` with one of four strategies.

    ``filter_decimate`` low-pass filters then keeps every ``factor``-th
    sample; ``filter_truncate`` filters then truncates the spectrum;
    ``truncate`` truncates the spectrum only; ``decimate`` keeps every
    ``factor``-th sample without filtering.  All return ``n // factor`` samples
    on the decimated grid.  Spectral truncation treats the trace as periodic,
    so a mismatch between the first and last samples rings near the ends.
    """
    if strategy not in SUBSAMPLE_STRATEGIES:
        raise InvalidInputError(f"unknown subsampling strategy {strategy!r}")
    if strategy == "filter_decimate":
        return lowpass_decimate(tr, factor)
    if int(factor) != factor or factor < 1:
        raise InvalidInputError(f"decimation factor must be an integer >= 1, got {factor}")
    factor = int(factor)
    if factor == 1:
        return tr
    if tr.grid.n <= factor:
        raise InvalidInputError(f"cannot decimate {tr.grid.n} samples by {factor}")
    grid = tr.grid.decimated(factor)
    v = np.asarray(tr.values, dtype=np.float64)
    if strategy == "decimate":
        return Trace(grid, v[::factor][: grid.n].copy())
    if strategy == "filter_truncate":
        v = sps.sosfiltfilt(_antialias_sos(factor), v)
    # resynthesize on the span actually covered by the decimated grid
    span = grid.n * factor
    return Trace(grid, _spectral_truncate(v[:span], grid.n))


def relative_lp_error(x, y, p: float = 2.0, eps: float = 0.0) -> float:
    """``||x - y||_p / (||y||_p + eps)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise InvalidInputError(f"length mismatch: {x.shape} vs {y.shape}")
    if p < 1:
        raise InvalidInputError(f"p must be >= 1, got {p}")
    if eps < 0:
        raise InvalidInputError("eps must be non-negative")
    num = np.sum(np.abs(x - y) ** p) ** (1.0 / p)
    den = np.sum(np.abs(y) ** p) ** (1.0 / p) + eps
    if den == 0:
        return 0.0 if num == 0 else math.inf
    return float(num / den)


def rfft(x) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-1] < 1:
        raise InvalidInputError("rfft needs at least one sample")
    return np.fft.rfft(x, axis=-1)


def irfft(X, n: int) -> np.ndarray:
    if n < 1:
        raise InvalidInputError(f"irfft length must be >= 1, got {n}")
    X = np.asarray(X)
    if X.shape[-1] > n // 2 + 1:
        raise InvalidInputError(f"{X.shape[-1]} bins do not fit a length-{n} signal")
    return np.fft.irfft(X, n, axis=-1)


def write_trace(path, tr: Trace) -> None:
    values = np.asarray(tr.values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_TRACE_HEADER.pack(MAGIC, TRACE_VERSION, KIND_TRACE,
                                    tr.grid.t0, tr.grid.dt, tr.grid.n))
        fh.write(values.tobytes())


def read_trace(path) -> Trace:
    raw = Path(path).read_bytes()
    if len(raw) < _TRACE_HEADER.size:
        raise TruncatedFileError(f"{path}: truncated trace header")
    magic, version, kind, t0, dt, n = _TRACE_HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != TRACE_VERSION or kind != KIND_TRACE:
        raise FormatError(f"{path}: unsupported trace version/kind {version}/{kind}")
    body = raw[_TRACE_HEADER.size:]
    if len(body) < 4 * n:
        raise TruncatedFileError(f"{path}: expected {n} samples, found {len(body) // 4}")
    if len(body) > 4 * n:
        raise FormatError(f"{path}: {len(body) - 4 * n} trailing bytes after samples")
    values = np.frombuffer(body, dtype="<f4").astype(np.float64)
    return Trace(TimeGrid(t0, dt, n), values)
