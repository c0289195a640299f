"""Latent-space regions, sampling and surrogate queries over many latents."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint
from .embedding import LATENT_HI, LATENT_LO, LatentPoint, assemble_batch
from .errors import GeometryError, InvalidInputError
from .features import FEATURE_NAMES, FICurve, extract_features, fi_curve
from .fno import forward
from .signal import Stimulus, Trace

DEFAULT_RADIUS = 0.15


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


@dataclass(frozen=True)
class LatentRegion:
    """Convex polygon (CCW vertices) or disc (center, radius) in latent space."""

    vertices: np.ndarray | None = None
    center: tuple | None = None
    radius: float = 0.0

    def __post_init__(self):
        if self.vertices is not None:
            v = np.asarray(self.vertices, dtype=float)
            if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
                raise GeometryError("hull needs at least 3 vertices")
            object.__setattr__(self, "vertices", v)
        elif self.center is None or not self.radius > 0:
            raise GeometryError("disc region needs a center and a positive radius")

    @property
    def is_hull(self) -> bool:
        return self.vertices is not None

    def area(self) -> float:
        if not self.is_hull:
            return float(np.pi * self.radius ** 2)
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))

    def bounding_box(self) -> tuple:
        if self.is_hull:
            lo, hi = self.vertices.min(axis=0), self.vertices.max(axis=0)
            return (float(lo[0]), float(hi[0])), (float(lo[1]), float(hi[1]))
        cx, cy = self.center
        r = self.radius
        return (cx - r, cx + r), (cy - r, cy + r)

    def contains(self, points, tol: float = 1e-12) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        if not self.is_hull:
            d = p - np.asarray(self.center)
            return np.hypot(d[:, 0], d[:, 1]) <= self.radius + tol
        v = self.vertices
        inside = np.ones(len(p), dtype=bool)
        for a, b in zip(v, np.roll(v, -1, axis=0)):
            cr = (b[0] - a[0]) * (p[:, 1] - a[1]) - (b[1] - a[1]) * (p[:, 0] - a[0])
            inside &= cr >= -tol
        return inside


def convex_hull(points) -> LatentRegion:
    """Monotone-chain hull, counterclockwise, collinear boundary points dropped."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise GeometryError("points must be an (n, 2) array")
    uniq = sorted(set(map(tuple, pts)))
    if len(uniq) < 3:
        raise GeometryError("convex hull needs at least 3 distinct points")
    lower, upper = [], []
    for p in uniq:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(uniq):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        raise GeometryError("all points are collinear")
    return LatentRegion(vertices=np.array(hull))


def sample_in_hull(region: LatentRegion, n: int, seed=0) -> np.ndarray:
    """Uniform points in a convex hull via fan triangulation and barycentric draws."""
    if not region.is_hull:
        raise GeometryError("sample_in_hull needs a hull region")
    rng = np.random.default_rng(seed)
    v = region.vertices
    a = v[0]
    b, c = v[1:-1], v[2:]
    areas = 0.5 * np.abs((b[:, 0] - a[0]) * (c[:, 1] - a[1]) - (b[:, 1] - a[1]) * (c[:, 0] - a[0]))
    tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    w0, w1, w2 = 1 - s, s * (1 - r2), s * r2
    return w0[:, None] * a + w1[:, None] * b[tri] + w2[:, None] * c[tri]


@dataclass(frozen=True)
class NeighborhoodSample:
    points: np.ndarray
    n_outside_box: int


def sample_neighborhood(center, radius: float = DEFAULT_RADIUS, n: int = 50,
                        seed=0) -> NeighborhoodSample:
    """Uniform disc samples (``sqrt(u)`` radial draw) around ``center``.

    Points outside the nominal [0.5, 3.5]^2 box are kept and counted.
    """
    if not radius > 0:
        raise GeometryError("radius must be positive")
    if isinstance(center, LatentPoint):
        center = center.as_array()
    c = np.asarray(center, dtype=float).reshape(2)
    rng = np.random.default_rng(seed)
    r = radius * np.sqrt(rng.random(n))
    th = 2 * np.pi * rng.random(n)
    pts = c + np.stack([r * np.cos(th), r * np.sin(th)], axis=1)
    outside = int(np.sum(np.any((pts < LATENT_LO) | (pts > LATENT_HI), axis=1)))
    return NeighborhoodSample(pts, outside)


@dataclass
class EnsembleResult:
    latents: list
    traces: list
    stimulus: Stimulus
    checkpoint_digest: str

    def values(self) -> np.ndarray:
        return np.stack([t.values for t in self.traces]) if self.traces else np.empty((0, self.stimulus.grid.n))

    def median(self) -> np.ndarray:
        return np.median(self.values(), axis=0)


def _latent_matrix(latents, features) -> np.ndarray:
    rows = []
    for p in latents:
        if isinstance(p, LatentPoint):
            rows.append([p.coordinate(f) for f in features])
        else:
            rows.append(np.asarray(p, dtype=float).reshape(len(features)))
    return np.asarray(rows, dtype=float)


def ensemble_predict(cp: Checkpoint, stim: Stimulus, latents, batch_size: int = 16,
                     threads: int = 1) -> EnsembleResult:
    """One surrogate trace per latent point, in input order."""
    latents = list(latents)
    if not latents:
        raise InvalidInputError("latents must be nonempty")
    emb = cp.embedding
    L = _latent_matrix(latents, emb.features)
    dtype = cp.params.real_dtype

    def run(start):
        stop = min(start + batch_size, len(L))
        x = assemble_batch(stim.grid, stim.onset, stim.duration,
                           np.full(stop - start, stim.amplitude), L[start:stop], emb, dtype)
        try:
            return forward(cp.params, x)
        except Exception as exc:
            raise type(exc)(f"latents {start}..{stop - 1}: {exc}") from exc

    starts = list(range(0, len(L), batch_size))
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(threads) as pool:
            chunks = list(pool.map(run, starts))
    else:
        chunks = [run(s) for s in starts]
    vals = np.concatenate(chunks, axis=0)
    traces = [Trace(stim.grid, v.astype(np.float64)) for v in vals]
    return EnsembleResult(latents, traces, stim, cp.digest())


def surrogate_producer(cp: Checkpoint, latent, template: Stimulus):
    """Closure amplitude -> predicted Trace for one latent point."""
    def sim(amplitude: float) -> Trace:
        return ensemble_predict(cp, template.with_amplitude(amplitude), [latent]).traces[0]
    return sim


def surrogate_fi_curve(cp: Checkpoint, latent, amplitudes, template: Stimulus,
                       threshold: float = -20.0) -> FICurve:
    return fi_curve(surrogate_producer(cp, latent, template), amplitudes, template, threshold)


@dataclass
class FeatureGrid:
    xs: np.ndarray
    ys: np.ndarray
    values: np.ndarray        # (ny, nx), NaN where undefined or masked
    mask: np.ndarray          # True where the lattice point is inside the region
    feature: str
    evaluations: int


def feature_grid(cp: Checkpoint, stim: Stimulus, region: LatentRegion, resolution,
                 feature: str, threshold: float = -20.0, batch_size: int = 16) -> FeatureGrid:
    """Feature values of surrogate traces on a lattice over the region's bounding box."""
    if feature not in FEATURE_NAMES:
        raise InvalidInputError(f"unknown feature {feature!r}")
    nx, ny = (resolution, resolution) if np.isscalar(resolution) else resolution
    if nx < 2 or ny < 2:
        raise InvalidInputError("resolution must be >= 2 per axis")
    (x0, x1), (y0, y1) = region.bounding_box()
    xs, ys = np.linspace(x0, x1, nx), np.linspace(y0, y1, ny)
    X, Y = np.meshgrid(xs, ys)
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    mask = region.contains(pts, tol=1e-9)
    values = np.full(len(pts), np.nan)
    inside = np.nonzero(mask)[0]
    if len(inside):
        res = ensemble_predict(cp, stim, [pts[i] for i in inside], batch_size)
        for i, tr in zip(inside, res.traces):
            v = extract_features(tr, stim, threshold)[feature]
            values[i] = np.nan if v is None else v
    return FeatureGrid(xs, ys, values.reshape(ny, nx), mask.reshape(ny, nx), feature, len(inside))
