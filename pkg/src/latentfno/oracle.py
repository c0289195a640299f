"""Conductance-based point-neuron simulator and jittered model ensembles.

The membrane follows a fast-spiking Hodgkin-Huxley-type formulation
(instantaneous Na activation, inactivating Na, delayed-rectifier K, leak)
plus a slow hyperpolarization-activated cation current that produces sag:

    C dV/dt = I/A - gNa m_inf^3 h (V-ENa) - gK n^4 (V-EK) - gL (V-EL) - gh r (V-Eh)

with ``I`` in nA converted to uA/cm^2 through the membrane area ``A``.
Integration is fixed-step RK4 from the resting equilibrium.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq

from . import kernels
from .errors import (ConfigError, EnsembleGenerationError, InvalidInputError,
                     NumericalBlowupError, ThresholdNotFoundError)
from .signal import Stimulus, TimeGrid, Trace

log = logging.getLogger(__name__)

PARAM_FIELDS = ("c_m", "g_na", "g_k", "g_l", "g_h", "e_na", "e_k", "e_l", "e_h", "phi")
CONDUCTANCES = ("g_na", "g_k", "g_l", "g_h")
REFERENCE_DT = 0.02
DEFAULT_RANGE = (-0.11, 0.28)


@dataclass(frozen=True)
class PointNeuronParams:
    c_m: float = 1.0          # uF/cm^2
    g_na: float = 35.0        # mS/cm^2
    g_k: float = 9.0
    g_l: float = 0.1
    g_h: float = 0.06
    e_na: float = 55.0        # mV
    e_k: float = -90.0
    e_l: float = -65.0
    e_h: float = -43.0
    phi: float = 2.0          # gating temperature factor
    area_cm2: float = 1e-4

    def __post_init__(self):
        for name in CONDUCTANCES:
            if not getattr(self, name) >= 0:
                raise InvalidInputError(f"{name} must be >= 0")
        if not self.c_m > 0:
            raise InvalidInputError("membrane capacitance must be positive")
        if not self.e_k < self.e_l < self.e_na:
            raise InvalidInputError("reversal potentials must satisfy E_K < E_L < E_Na")
        if not (self.phi > 0 and self.area_cm2 > 0):
            raise InvalidInputError("phi and area must be positive")

    def vector(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in PARAM_FIELDS], dtype=np.float64)

    def current_density(self, amps_na) -> np.ndarray:
        """nA -> uA/cm^2."""
        return np.asarray(amps_na, dtype=np.float64) * 1e-3 / self.area_cm2

    @classmethod
    def from_dict(cls, d: dict) -> "PointNeuronParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown neuron parameter(s): {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True)
class HofModel:
    params: PointNeuronParams
    i_thr: float
    s_thr: float
    id: int
    ahp_depth: float = math.nan


@dataclass
class HofEnsemble:
    models: list
    seed: int
    jitter_spec: dict
    base: PointNeuronParams = field(default_factory=PointNeuronParams)

    def __post_init__(self):
        ids = [m.id for m in self.models]
        if len(set(ids)) != len(ids):
            raise InvalidInputError("ensemble model ids must be unique")

    def by_id(self, model_id: int) -> HofModel:
        for m in self.models:
            if m.id == model_id:
                return m
        raise KeyError(model_id)

    def subset(self, ids) -> "HofEnsemble":
        ids = list(ids)
        return HofEnsemble([self.by_id(i) for i in ids], self.seed, dict(self.jitter_spec), self.base)

    def to_dict(self) -> dict:
        return {
            "format": "latentfno-ensemble",
            "version": 1,
            "seed": self.seed,
            "jitter_spec": self.jitter_spec,
            "base": asdict(self.base),
            "models": [
                {"id": m.id, "i_thr": m.i_thr, "s_thr": m.s_thr,
                 "ahp_depth": None if math.isnan(m.ahp_depth) else m.ahp_depth,
                 "params": asdict(m.params)}
                for m in self.models
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HofEnsemble":
        models = [
            HofModel(PointNeuronParams.from_dict(m["params"]), float(m["i_thr"]),
                     float(m["s_thr"]), int(m["id"]),
                     math.nan if m.get("ahp_depth") is None else float(m["ahp_depth"]))
            for m in d["models"]
        ]
        return cls(models, int(d["seed"]), dict(d["jitter_spec"]),
                   PointNeuronParams.from_dict(d["base"]))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "HofEnsemble":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class OracleConfig:
    """Simulation protocol shared by ensemble generation and datasets."""

    dt: float = REFERENCE_DT
    t_stop: float = 515.0
    onset: float = 50.0
    duration: float = 400.0
    amplitude_range: tuple = DEFAULT_RANGE
    spike_threshold: float = -20.0
    threshold_tol: float = 1e-3
    slope_step: float = 0.01
    ahp_reference_amplitude: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "amplitude_range", tuple(float(x) for x in self.amplitude_range))
        reference_amplitude_range(self)
        if not 0 < self.dt <= REFERENCE_DT + 1e-12:
            raise ConfigError(f"oracle dt must be in (0, {REFERENCE_DT}] ms, got {self.dt}")
        if self.onset < 0 or self.onset + self.duration > self.t_stop or self.duration <= 0:
            raise ConfigError("stimulus window must lie inside [0, t_stop]")

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(0.0, self.dt, int(round(self.t_stop / self.dt)))

    def stimulus(self, amplitude: float) -> Stimulus:
        return Stimulus(self.grid, float(amplitude), self.onset, self.duration)


def reference_amplitude_range(config: OracleConfig | None = None) -> tuple:
    lo, hi = DEFAULT_RANGE if config is None else config.amplitude_range
    if not lo < hi:
        raise ConfigError(f"amplitude_range: lo ({lo}) must be < hi ({hi})")
    return (lo, hi)


def steady_gates(v):
    """Steady-state (h, n, r) at membrane potential ``v``."""
    v = np.asarray(v, dtype=np.float64)
    ah = 0.07 * np.exp(-(v + 58.0) / 20.0)
    bh = 1.0 / (np.exp(-0.1 * (v + 28.0)) + 1.0)
    x = v + 34.0
    with np.errstate(invalid="ignore", divide="ignore"):
        an = np.where(np.abs(x) < 1e-5, 0.1, 0.01 * x / -np.expm1(-x / 10.0))
    bn = 0.125 * np.exp(-(v + 44.0) / 80.0)
    r = 1.0 / (1.0 + np.exp((v + 75.0) / 5.5))
    return ah / (ah + bh), an / (an + bn), r


def _equilibrium_rate(p: np.ndarray, v: float) -> float:
    h, n, r = steady_gates(v)
    return kernels.derivative(p, 0.0, np.array([v, h, n, r]))[0]


@lru_cache(maxsize=4096)
def resting_state(params: PointNeuronParams) -> tuple:
    """Stable zero-current equilibrium ``(V, h, n, r)`` nearest to E_L."""
    p = params.vector()
    vs = np.arange(params.e_k + 0.5, -20.0, 0.25)
    f = np.array([_equilibrium_rate(p, v) for v in vs])
    roots = []
    for i in np.nonzero((f[:-1] > 0) & (f[1:] <= 0))[0]:
        roots.append(brentq(lambda v: _equilibrium_rate(p, v), vs[i], vs[i + 1], xtol=1e-13))
    if not roots:
        raise NumericalBlowupError(math.nan, "no stable resting potential found")
    v0 = min(roots, key=lambda v: abs(v - params.e_l))
    h, n, r = steady_gates(v0)
    return (float(v0), float(h), float(n), float(r))


def _fine_grid(grid: TimeGrid, dt: float) -> int:
    ratio = grid.dt / dt
    k = int(round(ratio))
    if k < 1 or abs(ratio - k) > 1e-9 * k:
        raise InvalidInputError(f"stimulus grid dt {grid.dt} is not a multiple of solver dt {dt}")
    return k


def simulate(params: PointNeuronParams, stim: Stimulus, dt: float = REFERENCE_DT,
             amplitude_range: tuple | None = None) -> Trace:
    """RK4 membrane voltage on the stimulus grid."""
    return simulate_batch([params], [stim], dt, amplitude_range)[0]


def simulate_batch(params_list, stims, dt: float = REFERENCE_DT,
                   amplitude_range: tuple | None = None, threads: int = 1) -> list:
    """Simulate many (params, stimulus) pairs; results keep input order.

    All stimuli must share one grid.  ``threads > 1`` splits rows across a
    thread pool (the compiled kernel releases the GIL).
    """
    if len(params_list) != len(stims):
        raise InvalidInputError("params and stimuli counts differ")
    if not stims:
        return []
    if not 0 < dt <= REFERENCE_DT + 1e-12:
        raise InvalidInputError(f"solver dt must be <= {REFERENCE_DT} ms, got {dt}")
    grid = stims[0].grid
    if any(s.grid != grid for s in stims):
        raise InvalidInputError("all stimuli in a batch must share one grid")
    lo, hi = amplitude_range or DEFAULT_RANGE
    for s in stims:
        if not lo - 1e-12 <= s.amplitude <= hi + 1e-12:
            raise InvalidInputError(f"amplitude {s.amplitude} nA outside supported range [{lo}, {hi}]")
    k = _fine_grid(grid, dt)
    nt = (grid.n - 1) * k + 1
    fine = TimeGrid(grid.t0, dt, nt)
    sl = [fine.window(s.onset, s.stop) for s in stims]

    P = np.stack([p.vector() for p in params_list])
    Y0 = np.array([resting_state(p) for p in params_list])
    I = np.zeros((len(stims), nt))
    for row, (p, s, w) in enumerate(zip(params_list, stims, sl)):
        I[row, w] = p.current_density(s.amplitude)
    out = np.empty((len(stims), nt))

    def run(rows: slice):
        return kernels.integrate_batch(P[rows], I[rows], dt, Y0[rows], out[rows])

    bounds = np.linspace(0, len(stims), max(1, min(threads, len(stims))) + 1).astype(int)
    parts = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    if len(parts) > 1:
        with ThreadPoolExecutor(len(parts)) as pool:
            codes = [c for chunk in pool.map(run, parts) for c in chunk]
    else:
        codes = run(parts[0])
    traces = []
    for row, code in enumerate(codes):
        if code != -1:
            raise NumericalBlowupError(fine.t0 + code * dt)
        traces.append(Trace(grid, out[row, ::k].copy()))
    return traces


def trace_producer(params: PointNeuronParams, config: OracleConfig):
    """Closure amplitude -> Trace used by F-I and threshold searches."""
    def sim(amplitude: float) -> Trace:
        return simulate(params, config.stimulus(amplitude), config.dt,
                        amplitude_range=(-math.inf, math.inf))
    return sim


def measure_model(params: PointNeuronParams, config: OracleConfig, model_id: int = 0) -> HofModel:
    from . import features

    sim = trace_producer(params, config)
    stim = config.stimulus(0.0)
    i_thr, s_thr = features.threshold_features(
        sim, config.amplitude_range, tol=config.threshold_tol, delta=config.slope_step,
        stim=stim, threshold=config.spike_threshold)
    ref = sim(config.ahp_reference_amplitude)
    fs = features.extract_features(ref, stim.with_amplitude(config.ahp_reference_amplitude),
                                   threshold=config.spike_threshold)
    ahp = fs["AHP_depth"]
    return HofModel(params, i_thr, s_thr, model_id, math.nan if ahp is None else ahp)


DEFAULT_JITTER = {"g_na": 0.15, "g_k": 0.15, "g_l": 0.15, "g_h": 0.15}


def generate_ensemble(base: PointNeuronParams, count: int, jitter_spec: dict | None = None,
                      seed: int = 0, config: OracleConfig | None = None,
                      max_retries: int = 20, threads: int = 1) -> HofEnsemble:
    """Jitter conductances by independent uniform factors in ``[1-j, 1+j]``.

    Every model gets its own child seed so that the result does not depend
    on the worker count.  Draws that never fire in the amplitude range, fire
    without input (``i_thr <= 0``) or blow up numerically are redrawn.
    """
    if count < 1:
        raise InvalidInputError("ensemble count must be >= 1")
    config = config or OracleConfig()
    jitter_spec = dict(DEFAULT_JITTER if jitter_spec is None else jitter_spec)
    for name, bound in jitter_spec.items():
        if name not in CONDUCTANCES:
            raise ConfigError(f"jitter only applies to conductances, got {name!r}")
        if not 0 <= bound < 1:
            raise ConfigError(f"jitter bound for {name} must be in [0, 1)")
    children = np.random.SeedSequence(seed).spawn(count)

    def build(idx):
        rng = np.random.default_rng(children[idx])
        for attempt in range(max_retries + 1):
            changes = {name: getattr(base, name) * rng.uniform(1 - b, 1 + b)
                       for name, b in sorted(jitter_spec.items())}
            params = replace(base, **changes)
            try:
                model = measure_model(params, config, idx)
            except (ThresholdNotFoundError, NumericalBlowupError) as exc:
                log.info("model %d attempt %d rejected: %s", idx, attempt, exc)
                continue
            if model.s_thr > 0 and model.i_thr > 0:
                return model
            log.info("model %d attempt %d rejected: i_thr=%g s_thr=%g",
                     idx, attempt, model.i_thr, model.s_thr)
        raise EnsembleGenerationError(f"model {idx}: no firing draw after {max_retries + 1} attempts")

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            models = list(pool.map(build, range(count)))
    else:
        models = [build(i) for i in range(count)]
    return HofEnsemble(models, seed, jitter_spec, base)
