"""Skew-normal amplitude sampling, dataset assembly and the NOBL-DS v1 container.

Container layout::

    "NOBL" | u16 version | u16 kind=3 | u32 header length | header | blocks

The header is UTF-8 JSON holding counts, grid, subsample factor, the
ensemble manifest, normalization bounds, one metadata row per sample
(index, model id, amplitude, split, latent coordinates) and the byte offset
and shape of every array block.  Blocks are contiguous little-endian f32,
offsets relative to the first byte after the header.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import skewnorm

from .embedding import (LATENT_FEATURES, EmbeddingConfig, LatentBounds, assemble_batch,
                        model_latent)
from .errors import (ConfigError, DatasetError, FormatError, InvalidInputError,
                     NumericalBlowupError, TruncatedFileError)
from .oracle import DEFAULT_RANGE, HofEnsemble, OracleConfig, simulate_batch
from .signal import MAGIC, Stimulus, TimeGrid, Trace, lowpass_decimate

log = logging.getLogger(__name__)

DS_VERSION = 1
KIND_DATASET = 3
SPLITS = ("train", "validation", "test")
_MIN_ACCEPTANCE = 0.01


@dataclass(frozen=True)
class AmplitudeSampler:
    """Skew-normal amplitudes restricted to ``support`` by rejection.

    Defaults put the mode near 0.024 nA, inside the peri-threshold window
    [0, 0.05] nA, with about a fifth of the mass on negative amplitudes and
    half above 0.05 nA.
    """

    loc: float = -0.03
    scale: float = 0.13
    shape: float = 4.0
    support: tuple = DEFAULT_RANGE
    tail_ratio: float = 2.0     # required P(x > 0.05) / P(x < 0) of the defaults

    def __post_init__(self):
        object.__setattr__(self, "support", tuple(float(x) for x in self.support))
        lo, hi = self.support
        if not lo < hi:
            raise ConfigError(f"sampler support: lo ({lo}) must be < hi ({hi})")
        if not self.scale > 0:
            raise ConfigError("sampler scale must be positive")
        if self.acceptance_rate() < _MIN_ACCEPTANCE:
            raise ConfigError(
                f"skew-normal mass inside support is {self.acceptance_rate():.2e} (< {_MIN_ACCEPTANCE})")

    def _dist(self):
        return skewnorm(self.shape, self.loc, self.scale)

    def acceptance_rate(self) -> float:
        d = self._dist()
        return float(d.cdf(self.support[1]) - d.cdf(self.support[0]))

    def pdf(self, x) -> np.ndarray:
        """Density of the truncated distribution."""
        x = np.asarray(x, dtype=float)
        lo, hi = self.support
        inside = (x >= lo) & (x <= hi)
        return np.where(inside, self._dist().pdf(x) / self.acceptance_rate(), 0.0)


def sample_amplitudes(sampler: AmplitudeSampler, n: int, rng) -> np.ndarray:
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    rng = np.random.default_rng(rng)
    lo, hi = sampler.support
    out = np.empty(0)
    d = sampler._dist()
    batch = int(n / sampler.acceptance_rate() * 1.1) + 16
    while out.size < n:
        draw = d.rvs(size=batch, random_state=rng)
        out = np.concatenate([out, draw[(draw >= lo) & (draw <= hi)]])
    return out[:n]


@dataclass
class Dataset:
    grid: TimeGrid
    onset: float
    duration: float
    subsample_factor: int
    amplitudes: np.ndarray          # (N,) nA
    model_ids: np.ndarray           # (N,) int
    latents: np.ndarray             # (N, len(latent_features)) normalized
    latent_features: tuple
    targets: np.ndarray             # (N, n) float32 mV
    splits: np.ndarray              # (N,) int8 index into SPLITS
    bounds: LatentBounds
    ensemble: HofEnsemble | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        N = len(self.amplitudes)
        self.amplitudes = np.asarray(self.amplitudes, dtype=np.float64)
        self.model_ids = np.asarray(self.model_ids, dtype=np.int64)
        self.latents = np.asarray(self.latents, dtype=np.float64).reshape(N, len(self.latent_features))
        self.splits = np.asarray(self.splits, dtype=np.int8)
        if self.targets.shape != (N, self.grid.n):
            raise DatasetError(f"targets shape {self.targets.shape} != ({N}, {self.grid.n})")
        if len(self.model_ids) != N or len(self.splits) != N:
            raise DatasetError("per-sample arrays differ in length")
        if N and (self.splits.min() < 0 or self.splits.max() >= len(SPLITS)):
            raise DatasetError("split tags must index train/validation/test")
        if self.ensemble is not None:
            known = {m.id for m in self.ensemble.models}
            missing = set(self.model_ids.tolist()) - known
            if missing:
                raise DatasetError(f"model ids {sorted(missing)} not in ensemble manifest")

    def __len__(self):
        return len(self.amplitudes)

    def stimulus(self, i: int) -> Stimulus:
        return Stimulus(self.grid, float(self.amplitudes[i]), self.onset, self.duration)

    def trace(self, i: int) -> Trace:
        return Trace(self.grid, self.targets[i].astype(np.float64))

    def indices(self, split: str) -> np.ndarray:
        return np.nonzero(self.splits == SPLITS.index(split))[0]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.grid, self.onset, self.duration, self.subsample_factor,
                       self.amplitudes[idx], self.model_ids[idx], self.latents[idx],
                       self.latent_features, self.targets[idx], self.splits[idx],
                       self.bounds, self.ensemble, dict(self.meta))

    def latent_columns(self, features) -> np.ndarray:
        missing = [f for f in features if f not in self.latent_features]
        if missing:
            raise DatasetError(f"dataset carries no latent values for {missing}")
        cols = [self.latent_features.index(f) for f in features]
        return self.latents[:, cols]

    def inputs(self, idx, emb: EmbeddingConfig, dtype=np.float32) -> np.ndarray:
        """Input channel stacks for samples ``idx``, assembled on demand."""
        idx = np.asarray(idx)
        return assemble_batch(self.grid, self.onset, self.duration, self.amplitudes[idx],
                              self.latent_columns(emb.features)[idx], emb, dtype)


def split_tags(n: int, split_spec, rng) -> np.ndarray:
    fr = np.asarray(split_spec, dtype=float)
    if fr.shape != (3,) or np.any(fr < 0) or not math.isclose(fr.sum(), 1.0, abs_tol=1e-9):
        raise ConfigError("split_spec must be three non-negative fractions summing to 1")
    n_train = int(round(fr[0] * n))
    n_val = int(round(fr[1] * n))
    n_val = min(n_val, n - n_train)
    tags = np.full(n, 2, dtype=np.int8)
    perm = np.random.default_rng(rng).permutation(n)
    tags[perm[:n_train]] = 0
    tags[perm[n_train:n_train + n_val]] = 1
    return tags


def _ensemble_bounds(ensemble: HofEnsemble) -> LatentBounds:
    ranges = {}
    for name in LATENT_FEATURES:
        vals = np.array([getattr(m, name) for m in ensemble.models], dtype=float)
        if np.all(np.isfinite(vals)) and vals.min() < vals.max():
            ranges[name] = (float(vals.min()), float(vals.max()))
    for name in ("i_thr", "s_thr"):
        if name not in ranges:
            raise DatasetError(f"ensemble has no spread in {name}; latent normalization undefined")
    return LatentBounds(ranges)


def build_dataset(ensemble: HofEnsemble, sampler: AmplitudeSampler, n_samples: int,
                  subsample_factor: int = 3, seed: int = 0, split_spec=(0.8, 0.1, 0.1),
                  config: OracleConfig | None = None, amplitudes=None,
                  bounds: LatentBounds | None = None, threads: int = 1,
                  max_retries: int = 5, chunk: int = 64) -> Dataset:
    """Simulate ``n_samples`` (amplitude, model) pairs and decimate the traces.

    ``amplitudes`` overrides the sampler draws.  ``bounds`` defaults to the
    ensemble's own feature ranges.
    """
    if not ensemble.models:
        raise DatasetError("ensemble is empty")
    if n_samples < 1:
        raise InvalidInputError("n_samples must be >= 1")
    config = config or OracleConfig()
    ss = np.random.SeedSequence(seed)
    amp_seed, model_seed, split_seed, retry_seed = ss.spawn(4)
    if amplitudes is None:
        amps = sample_amplitudes(sampler, n_samples, np.random.default_rng(amp_seed))
    else:
        amps = np.asarray(amplitudes, dtype=float).reshape(-1)
        if len(amps) != n_samples:
            raise InvalidInputError("forced amplitudes must match n_samples")
    models = ensemble.models
    which = np.random.default_rng(model_seed).integers(0, len(models), n_samples)
    retry_rng = np.random.default_rng(retry_seed)
    bounds = bounds or _ensemble_bounds(ensemble)

    fine_grid = config.grid
    grid = fine_grid.decimated(subsample_factor) if subsample_factor > 1 else fine_grid
    targets = np.empty((n_samples, grid.n), dtype=np.float32)
    incidents = 0
    for start in range(0, n_samples, chunk):
        rows = list(range(start, min(start + chunk, n_samples)))
        pending = rows
        try:
            traces = simulate_batch([models[which[r]].params for r in rows],
                                    [config.stimulus(amps[r]) for r in rows], config.dt,
                                    sampler.support, threads=threads)
        except NumericalBlowupError:
            traces = None
        else:
            for r, tr in zip(rows, traces):
                targets[r] = lowpass_decimate(tr, subsample_factor).values
            pending = []
        for attempt in range(max_retries + 1):
            if not pending:
                break
            failed = []
            for r in pending:
                stim = config.stimulus(amps[r])
                try:
                    tr = simulate_batch([models[which[r]].params], [stim], config.dt,
                                        sampler.support)[0]
                except NumericalBlowupError as exc:
                    incidents += 1
                    log.warning("sample %d (model %d, %.4f nA) blew up: %s; redrawing",
                                r, models[which[r]].id, amps[r], exc)
                    amps[r] = sample_amplitudes(sampler, 1, retry_rng)[0]
                    failed.append(r)
                    continue
                targets[r] = lowpass_decimate(tr, subsample_factor).values
            pending = failed
        if pending:
            raise DatasetError(f"samples {pending} kept blowing up after {max_retries} retries")

    lat_names = tuple(bounds.ranges)
    lat_by_model = {}
    for m in models:
        p = model_latent(m, bounds)
        lat_by_model[m.id] = [p.coordinate(f) for f in lat_names]
    ids = np.array([models[w].id for w in which])
    latents = np.array([lat_by_model[i] for i in ids])
    splits = split_tags(n_samples, split_spec, np.random.default_rng(split_seed))
    meta = {"seed": seed, "split_spec": list(split_spec), "oracle": _oracle_dict(config),
            "sampler": asdict(sampler), "incidents": incidents}
    return Dataset(grid, config.onset, config.duration, subsample_factor, amps, ids, latents,
                   lat_names, targets, splits, bounds, ensemble, meta)


def _oracle_dict(config: OracleConfig) -> dict:
    d = asdict(config)
    d["amplitude_range"] = list(d["amplitude_range"])
    return d


# -- container ----------------------------------------------------------------

def encode_dataset(ds: Dataset) -> bytes:
    blocks = {"targets": np.ascontiguousarray(ds.targets, dtype="<f4")}
    offsets, pos = {}, 0
    for name, arr in blocks.items():
        offsets[name] = {"offset": pos, "shape": list(arr.shape), "dtype": "<f4"}
        pos += arr.nbytes
    rows = [[i, int(ds.model_ids[i]), float(ds.amplitudes[i]), SPLITS[ds.splits[i]],
             [float(x) for x in ds.latents[i]]] for i in range(len(ds))]
    header = {
        "format": "NOBL-DS",
        "count": len(ds),
        "grid": {"t0": ds.grid.t0, "dt": ds.grid.dt, "n": ds.grid.n},
        "stimulus": {"onset": ds.onset, "duration": ds.duration},
        "subsample_factor": ds.subsample_factor,
        "latent_features": list(ds.latent_features),
        "bounds": {k: list(v) for k, v in ds.bounds.ranges.items()},
        "ensemble": None if ds.ensemble is None else ds.ensemble.to_dict(),
        "split_counts": {s: int(np.sum(ds.splits == i)) for i, s in enumerate(SPLITS)},
        "meta": ds.meta,
        "columns": ["index", "model_id", "amplitude_nA", "split", "latent"],
        "samples": rows,
        "blocks": offsets,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<HHI", DS_VERSION, KIND_DATASET, len(hb)), hb]
    parts += [a.tobytes() for a in blocks.values()]
    return b"".join(parts)


def decode_dataset(data: bytes, path="<bytes>") -> Dataset:
    if len(data) < 12:
        raise TruncatedFileError(f"{path}: dataset truncated in header")
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic, not a dataset file")
    version, kind, hlen = struct.unpack_from("<HHI", data, 4)
    if version != DS_VERSION or kind != KIND_DATASET:
        raise FormatError(f"{path}: unsupported dataset version/kind {version}/{kind}")
    if len(data) < 12 + hlen:
        raise TruncatedFileError(f"{path}: dataset header truncated")
    try:
        h = json.loads(data[12:12 + hlen].decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt dataset header") from exc
    body = memoryview(data)[12 + hlen:]
    arrays = {}
    for name, spec in h["blocks"].items():
        shape = tuple(spec["shape"])
        nbytes = 4 * int(np.prod(shape))
        if spec["offset"] + nbytes > len(body):
            raise TruncatedFileError(f"{path}: block {name} truncated")
        arrays[name] = np.frombuffer(body[spec["offset"]:spec["offset"] + nbytes],
                                     dtype="<f4").reshape(shape).astype(np.float32)
    rows = h["samples"]
    g = h["grid"]
    ens = None if h["ensemble"] is None else HofEnsemble.from_dict(h["ensemble"])
    return Dataset(
        TimeGrid(g["t0"], g["dt"], g["n"]), h["stimulus"]["onset"], h["stimulus"]["duration"],
        h["subsample_factor"],
        np.array([r[2] for r in rows], dtype=float), np.array([r[1] for r in rows], dtype=int),
        np.array([r[4] for r in rows], dtype=float).reshape(len(rows), len(h["latent_features"])),
        tuple(h["latent_features"]), arrays["targets"],
        np.array([SPLITS.index(r[3]) for r in rows], dtype=np.int8),
        LatentBounds({k: tuple(v) for k, v in h["bounds"].items()}), ens, h["meta"])


def save_dataset(ds: Dataset, path) -> str:
    """Write the container; returns its SHA-256 digest."""
    data = encode_dataset(ds)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_dataset(path) -> Dataset:
    return decode_dataset(Path(path).read_bytes(), path)
