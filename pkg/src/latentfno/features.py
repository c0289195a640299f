"""Electrophysiological feature extraction, F-I curves and threshold search.

Conventions (all configurable through keyword arguments):

* a spike is an upward crossing of ``threshold`` (default -20 mV) with its
  peak at the largest sample before the next downward crossing;
* the first after-hyperpolarization (AHP) is the minimum between the first
  and second peaks, or between the first peak and the end of the stimulus
  when there is a single spike;
* ``AP1_width`` is measured at the level halfway between the first peak and
  that AHP minimum, with linear interpolation of both crossings;
* AP amplitudes are taken from the trough preceding each spike (stimulus
  onset for the first one);
* undefined features are ``None``, never a sentinel number.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, LatentFNOError, ThresholdNotFoundError
from .signal import Stimulus, Trace

FEATURE_NAMES = (
    "AHP_depth",
    "AHP_time_from_peak",
    "AHP1_depth_from_peak",
    "AP1_peak",
    "AP1_width",
    "decay_time_constant_after_stim",
    "depol_block",
    "inv_first_ISI",
    "mean_AP_amplitude",
    "mean_frequency",
    "sag_amplitude",
    "spikecount",
    "steady_state_voltage",
    "steady_state_voltage_stimend",
    "time_to_first_spike",
    "voltage_base",
)

FEATURE_UNITS = {
    "AHP_depth": "mV", "AHP_time_from_peak": "ms", "AHP1_depth_from_peak": "mV",
    "AP1_peak": "mV", "AP1_width": "ms", "decay_time_constant_after_stim": "ms",
    "depol_block": "bool", "inv_first_ISI": "Hz", "mean_AP_amplitude": "mV",
    "mean_frequency": "Hz", "sag_amplitude": "mV", "spikecount": "count",
    "steady_state_voltage": "mV", "steady_state_voltage_stimend": "mV",
    "time_to_first_spike": "ms", "voltage_base": "mV",
}

DEFAULT_THRESHOLD = -20.0
DECAY_WINDOW = 50.0
BLOCK_LEVEL = -40.0
BLOCK_DURATION = 50.0
HYPER_BLOCK_DROP = 30.0
# Post-stimulus deviations below this (mV) are treated as already settled.
MIN_DECAY_DEVIATION = 1e-6


@dataclass(frozen=True)
class SpikeEvents:
    peak_times: np.ndarray
    peak_values: np.ndarray
    peak_indices: np.ndarray
    threshold: float

    def __len__(self):
        return len(self.peak_indices)


class FeatureSet(dict):
    """Feature name -> value, with ``None`` marking undefined entries."""

    def defined(self, name: str) -> bool:
        return self.get(name) is not None

    def to_text(self) -> str:
        lines = []
        for name in FEATURE_NAMES:
            value = self.get(name)
            lines.append(f"{name} = {'undefined' if value is None else repr(float(value))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "FeatureSet":
        out = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            name, _, raw = line.partition("=")
            name, raw = name.strip(), raw.strip()
            if name not in FEATURE_UNITS:
                raise InvalidInputError(f"unknown feature {name!r}")
            out[name] = None if raw == "undefined" else float(raw)
        return out


@dataclass(frozen=True)
class FICurve:
    amplitudes: np.ndarray
    rates: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.amplitudes, dtype=float)
        r = np.asarray(self.rates, dtype=float)
        if a.shape != r.shape:
            raise InvalidInputError("amplitudes and rates differ in length")
        if np.any(np.diff(a) <= 0):
            raise InvalidInputError("F-I amplitudes must be strictly increasing")
        if np.any(r < 0):
            raise InvalidInputError("firing rates must be non-negative")
        object.__setattr__(self, "amplitudes", a)
        object.__setattr__(self, "rates", r)


def detect_spikes(tr: Trace, threshold: float = DEFAULT_THRESHOLD) -> SpikeEvents:
    v = np.asarray(tr.values, dtype=np.float64)
    above = v > threshold
    ups = np.flatnonzero(~above[:-1] & above[1:]) + 1
    downs = np.flatnonzero(above[:-1] & ~above[1:]) + 1
    peaks = []
    for up in ups:
        k = np.searchsorted(downs, up)
        end = downs[k] if k < len(downs) else len(v)
        peaks.append(up + int(np.argmax(v[up:end])))
    idx = np.asarray(peaks, dtype=np.int64)
    return SpikeEvents(tr.grid.t0 + tr.grid.dt * idx, v[idx], idx, threshold)


def _mean(x) -> float | None:
    return float(np.mean(x)) if len(x) else None


def _crossing_time(t0, dt, i, vi, vj, level):
    """Time where the segment (i, vi) -> (i+1, vj) reaches ``level``."""
    return t0 + dt * (i + (level - vi) / (vj - vi))


def _half_width(v: np.ndarray, t0: float, dt: float, peak: int, level: float) -> float | None:
    i = peak
    while i > 0 and v[i - 1] > level:
        i -= 1
    if i == 0:
        return None
    t_rise = _crossing_time(t0, dt, i - 1, v[i - 1], v[i], level)
    j = peak
    while j < len(v) - 1 and v[j + 1] > level:
        j += 1
    if j == len(v) - 1:
        return None
    t_fall = _crossing_time(t0, dt, j, v[j], v[j + 1], level)
    return float(t_fall - t_rise)


def _runs(mask: np.ndarray):
    """(start, stop) index pairs of consecutive True runs."""
    if not len(mask):
        return []
    d = np.diff(np.concatenate([[0], mask.astype(np.int8), [0]]))
    return list(zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)))


def extract_features(tr: Trace, stim: Stimulus, threshold: float = DEFAULT_THRESHOLD,
                     decay_window: float = DECAY_WINDOW) -> FeatureSet:
    """All sixteen features of one trace under a square stimulus.

    Only ``stim.onset``, ``stim.duration`` and ``stim.amplitude`` are used,
    so the stimulus may live on a different grid than the trace.
    """
    g = tr.grid
    slack = 1e-7 * g.dt
    if stim.onset < g.t0 - slack or stim.stop > g.t_end + slack:
        raise InvalidInputError(
            f"stimulus window [{stim.onset}, {stim.stop}) outside trace [{g.t0}, {g.t_end})")
    v = np.asarray(tr.values, dtype=np.float64)
    t0, dt = g.t0, g.dt
    onset, stop, dur = stim.onset, stim.stop, stim.duration
    w_stim = g.window(onset, stop)
    w_pre = g.window(onset - 0.1 * (onset - t0), onset)
    w_end = g.window(stop - 0.1 * dur, stop)
    w_post = g.window(stop, g.t_end)

    fs = FeatureSet.fromkeys(FEATURE_NAMES)
    vb = _mean(v[w_pre])
    fs["voltage_base"] = vb
    fs["steady_state_voltage"] = _mean(v[w_post])
    fs["steady_state_voltage_stimend"] = _mean(v[w_end])

    spikes = detect_spikes(tr, threshold)
    idx = spikes.peak_indices
    fs["spikecount"] = float(len(idx))
    i_on, i_off = w_stim.start, w_stim.stop
    in_stim = idx[(idx >= i_on) & (idx < i_off)]
    fs["mean_frequency"] = len(in_stim) / (dur / 1000.0)
    fs["inv_first_ISI"] = 1000.0 / float((idx[1] - idx[0]) * dt) if len(idx) >= 2 else 0.0

    after_onset = idx[idx >= i_on]
    if len(after_onset):
        fs["time_to_first_spike"] = float(t0 + dt * after_onset[0] - onset)

    if len(idx):
        p1 = int(idx[0])
        fs["AP1_peak"] = float(v[p1])
        ahp_end = int(idx[1]) if len(idx) >= 2 else (i_off if p1 < i_off else len(v))
        if ahp_end > p1 + 1:
            a = p1 + 1 + int(np.argmin(v[p1 + 1:ahp_end]))
            ahp = float(v[a])
            fs["AHP_time_from_peak"] = (a - p1) * dt
            fs["AHP1_depth_from_peak"] = float(v[p1]) - ahp
            if vb is not None:
                fs["AHP_depth"] = ahp - vb
            fs["AP1_width"] = _half_width(v, t0, dt, p1, 0.5 * (float(v[p1]) + ahp))
        amps = []
        for k, p in enumerate(idx):
            start = int(idx[k - 1]) if k else (i_on if p > i_on else 0)
            amps.append(float(v[p]) - float(np.min(v[start:p + 1])))
        fs["mean_AP_amplitude"] = float(np.mean(amps))
    elif i_off > i_on and fs["steady_state_voltage_stimend"] is not None:
        fs["sag_amplitude"] = fs["steady_state_voltage_stimend"] - float(np.min(v[w_stim]))

    if vb is not None:
        w_decay = g.window(stop, stop + decay_window)
        dev = v[w_decay] - vb
        if len(dev) >= 3 and np.all(np.abs(dev) > MIN_DECAY_DEVIATION) and (np.all(dev > 0) or np.all(dev < 0)):
            tt = t0 + dt * np.arange(w_decay.start, w_decay.stop)
            slope = np.polyfit(tt - stop, np.log(np.abs(dev)), 1)[0]
            if slope < 0:
                fs["decay_time_constant_after_stim"] = float(-1.0 / slope)

    block = 0.0
    seg = v[w_stim]
    min_len = BLOCK_DURATION / dt
    for a, b in _runs(seg > BLOCK_LEVEL):
        if b - a > min_len and not np.any((in_stim >= i_on + a) & (in_stim < i_on + b)):
            block = 1.0
    if vb is not None:
        for a, b in _runs(seg < vb - HYPER_BLOCK_DROP):
            if b - a > min_len:
                block = 1.0
    fs["depol_block"] = block
    return fs


def _rate(tr: Trace, stim: Stimulus, threshold: float) -> float:
    idx = detect_spikes(tr, threshold).peak_indices
    w = tr.grid.window(stim.onset, stim.stop)
    n = np.count_nonzero((idx >= w.start) & (idx < w.stop))
    return n / (stim.duration / 1000.0)


def _annotated(sim, amplitude):
    try:
        return sim(amplitude)
    except LatentFNOError as exc:
        exc.args = (f"amplitude {amplitude} nA: {exc}",) + exc.args[1:]
        raise


def fi_curve(sim, amplitudes, stim: Stimulus, threshold: float = DEFAULT_THRESHOLD) -> FICurve:
    """Firing rate (spikes inside the stimulus per second) at each amplitude."""
    amplitudes = np.asarray(amplitudes, dtype=float).reshape(-1)
    if np.any(np.diff(amplitudes) <= 0):
        raise InvalidInputError("F-I amplitudes must be strictly increasing")
    rates = [_rate(_annotated(sim, a), stim, threshold) for a in amplitudes]
    return FICurve(amplitudes, np.array(rates))


def threshold_features(sim, amplitude_range, stim: Stimulus, tol: float = 1e-3,
                       delta: float = 0.01, threshold: float = DEFAULT_THRESHOLD) -> tuple:
    """``(i_thr, s_thr)`` by bisection on fires/silent and a forward difference.

    "Fires" means at least one spike inside the stimulus window of ``stim``.
    ``i_thr`` is the firing end of the final bracket, so it always elicits
    a spike.
    """
    lo, hi = (float(x) for x in amplitude_range)
    if not lo < hi or tol <= 0:
        raise InvalidInputError("need lo < hi and tol > 0")

    def rate(a):
        return _rate(_annotated(sim, a), stim, threshold)

    if rate(hi) == 0:
        raise ThresholdNotFoundError(f"no spikes at the top of the range ({hi} nA)")
    if rate(lo) > 0:
        raise ThresholdNotFoundError(f"already firing at the bottom of the range ({lo} nA)")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if rate(mid) > 0:
            hi = mid
        else:
            lo = mid
    return hi, (rate(hi + delta) - rate(hi)) / delta


def feature_table(traces, stims, threshold: float = DEFAULT_THRESHOLD) -> list:
    return [extract_features(t, s, threshold) for t, s in zip(traces, stims)]


def feature_vector(fsets, name: str) -> np.ndarray:
    """Feature values as floats with NaN marking undefined entries."""
    return np.array([math.nan if f.get(name) is None else f[name] for f in fsets], dtype=float)
