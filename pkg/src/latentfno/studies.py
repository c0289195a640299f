"""Subsampling fidelity study and surrogate-vs-oracle throughput benchmark."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .embedding import assemble_batch
from .evaluation import feature_error
from .features import FEATURE_NAMES, extract_features
from .fno import forward
from .oracle import OracleConfig, simulate, simulate_batch
from .signal import SUBSAMPLE_STRATEGIES, Stimulus, subsample


@dataclass
class SubsampleStudy:
    factors: tuple
    strategies: tuple
    features: tuple
    errors: dict = field(default_factory=dict)   # (strategy, factor, feature) -> rel L2
    spikecount_mismatches: dict = field(default_factory=dict)  # (strategy, factor) -> count
    n_traces: int = 0

    def table(self) -> str:
        lines = [f"# relative L2 of features, subsampled vs raw oracle traces (n={self.n_traces})"]
        for strat in self.strategies:
            lines.append(f"## strategy {strat}")
            lines.append("feature " + " ".join(f"x{f}" for f in self.factors))
            for name in self.features:
                vals = [self.errors[(strat, f, name)] for f in self.factors]
                lines.append(name + " " + " ".join(f"{v:.3e}" for v in vals))
            lines.append("spikecount_mismatches " + " ".join(
                str(self.spikecount_mismatches[(strat, f)]) for f in self.factors))
        return "\n".join(lines) + "\n"


def study_traces(params_list, amplitudes, config: OracleConfig, threads: int = 1):
    stims = [config.stimulus(a) for a in amplitudes]
    return simulate_batch(params_list, stims, config.dt, config.amplitude_range, threads), stims


def subsample_study(traces, stims, factors=range(1, 9), strategies=SUBSAMPLE_STRATEGIES,
                    features=FEATURE_NAMES, threshold: float = -20.0) -> SubsampleStudy:
    """Per-feature relative error of each subsampling strategy and factor."""
    factors, strategies, features = tuple(factors), tuple(strategies), tuple(features)
    raw = [extract_features(t, s, threshold) for t, s in zip(traces, stims)]
    out = SubsampleStudy(factors, strategies, features, n_traces=len(traces))
    for strat in strategies:
        for f in factors:
            sub = []
            for t, s in zip(traces, stims):
                ts = subsample(t, f, strat)
                sub.append(extract_features(ts, Stimulus(ts.grid, s.amplitude, s.onset, s.duration),
                                            threshold))
            for name in features:
                out.errors[(strat, f, name)] = feature_error(sub, raw, name).rel_l2
            out.spikecount_mismatches[(strat, f)] = sum(
                a["spikecount"] != b["spikecount"] for a, b in zip(sub, raw))
    return out


@dataclass
class BenchmarkReport:
    n: int
    grid_points: int
    oracle_seconds: float
    surrogate_seconds: dict           # batch size -> seconds for n traces

    def ratio(self, batch_size: int) -> float:
        return self.oracle_seconds / self.surrogate_seconds[batch_size]

    def to_text(self) -> str:
        lines = [f"traces {self.n}", f"grid_points {self.grid_points}",
                 f"oracle_seconds {self.oracle_seconds:.4f}",
                 f"oracle_traces_per_s {self.n / self.oracle_seconds:.3f}"]
        for b, s in sorted(self.surrogate_seconds.items()):
            lines.append(f"surrogate_batch{b}_seconds {s:.4f}")
            lines.append(f"surrogate_batch{b}_traces_per_s {self.n / s:.3f}")
            lines.append(f"speedup_batch{b} {self.ratio(b):.3f}")
        return "\n".join(lines) + "\n"


def benchmark(cp: Checkpoint, params_list, latents, amplitudes, config: OracleConfig,
              batch_sizes=(1, 16), subsample_factor: int = 1) -> BenchmarkReport:
    """Time ``n`` oracle solves against ``n`` surrogate inferences at the same grid.

    The surrogate grid is the oracle output grid decimated by
    ``subsample_factor`` (1 means the solver's own resolution).
    """
    n = len(amplitudes)
    t0 = time.perf_counter()
    for p, a in zip(params_list, amplitudes):
        simulate(p, config.stimulus(a), config.dt, config.amplitude_range)
    oracle_s = time.perf_counter() - t0
    grid = config.grid.decimated(subsample_factor) if subsample_factor > 1 else config.grid
    L = np.asarray(latents, dtype=float)
    amps = np.asarray(amplitudes, dtype=float)
    sur = {}
    for b in batch_sizes:
        x = assemble_batch(grid, config.onset, config.duration, amps[:min(b, n)], L[:min(b, n)],
                           cp.embedding, cp.params.real_dtype)
        forward(cp.params, x[:1])         # warm caches for this grid
        t0 = time.perf_counter()
        for s in range(0, n, b):
            k = min(b, n - s)
            xb = assemble_batch(grid, config.onset, config.duration, amps[s:s + k], L[s:s + k],
                                cp.embedding, cp.params.real_dtype)
            forward(cp.params, xb)
        sur[b] = time.perf_counter() - t0
    return BenchmarkReport(n, grid.n, oracle_s, sur)
