"""Adam, plateau learning-rate decay, the relative-L4 training loop and
feature-weighted fine-tuning."""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .dataset import Dataset
from .embedding import EmbeddingConfig
from .errors import ConfigError, DatasetError, InvalidInputError, TrainingError
from .features import extract_features
from .fno import FnoConfig, FnoParameters, backward, forward, init_params

log = logging.getLogger(__name__)

LOSS_EPS = 1e-8


# -- optimizer ------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 0.004
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _real_view(a: np.ndarray) -> np.ndarray:
    return a.view(a.real.dtype) if np.iscomplexobj(a) else a


def adam_step(state: OptimizerState, params: FnoParameters, grads: dict) -> FnoParameters:
    """In-place bias-corrected Adam update; complex weights update as (re, im) pairs."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter block {name!r}")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        if name not in grads:
            continue
        pv = _real_view(p)
        gv = _real_view(np.ascontiguousarray(grads[name], dtype=p.dtype))
        if pv.shape != gv.shape:
            raise InvalidInputError(f"gradient shape mismatch for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(pv)
            state.v[name] = np.zeros_like(pv)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * gv
        v *= b2
        v += (1 - b2) * gv * gv
        pv -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(pv.dtype)
    return params


@dataclass
class SchedulerState:
    factor: float = 0.4
    patience: int = 4
    min_lr: float = 1e-6
    best: float = math.inf
    stale: int = 0

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ConfigError("plateau factor must be in (0, 1)")
        if self.patience < 0:
            raise ConfigError("plateau patience must be >= 0")


def plateau_step(sched: SchedulerState, opt: OptimizerState, val_loss: float) -> float:
    """Decay ``opt.lr`` once more than ``patience`` epochs pass without improvement."""
    if val_loss < sched.best:
        sched.best = val_loss
        sched.stale = 0
    else:
        sched.stale += 1
        if sched.stale > sched.patience:
            opt.lr = max(opt.lr * sched.factor, sched.min_lr)
            sched.stale = 0
    return opt.lr


# -- losses ---------------------------------------------------------------------

def relative_l4_loss(pred: np.ndarray, target: np.ndarray, eps: float = LOSS_EPS):
    """Batch-mean relative L4 error and its gradient with respect to ``pred``."""
    e = pred.astype(np.float64) - target
    num = np.sum(e ** 4, axis=-1) ** 0.25
    den = np.sum(np.asarray(target, np.float64) ** 4, axis=-1) ** 0.25 + eps
    B = pred.shape[0]
    with np.errstate(invalid="ignore", divide="ignore"):
        coef = np.where(num > 0, 1.0 / (num ** 3 * den * B), 0.0)
    grad = (e ** 3) * coef[:, None]
    return float(np.mean(num / den)), grad.astype(pred.dtype)


def relative_l2_per_sample(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    e = np.asarray(pred, np.float64) - target
    return np.sqrt(np.sum(e * e, axis=-1)) / np.sqrt(np.sum(np.asarray(target, np.float64) ** 2, axis=-1))


@dataclass(frozen=True)
class FeatureWindows:
    """Index windows on a dataset grid used by differentiable features."""

    stim: slice
    stimend: slice
    post: slice
    pre: slice

    @classmethod
    def for_dataset(cls, ds: Dataset) -> "FeatureWindows":
        g, on, dur = ds.grid, ds.onset, ds.duration
        stop = on + dur
        return cls(g.window(on, stop), g.window(stop - 0.1 * dur, stop),
                   g.window(stop, g.t_end), g.window(on - 0.1 * (on - g.t0), on))


def _window_mean(v, w):
    grad = np.zeros_like(v)
    n = w.stop - w.start
    grad[:, w] = 1.0 / n
    return v[:, w].mean(axis=1), grad


def differentiable_feature(name: str, v: np.ndarray, win: FeatureWindows):
    """Feature values ``(B,)`` and their Jacobian rows ``(B, n)`` for a batch.

    Extrema route the gradient to the sample that attains them.
    """
    v = np.asarray(v, dtype=np.float64)
    if name == "steady_state_voltage":
        return _window_mean(v, win.post)
    if name == "steady_state_voltage_stimend":
        return _window_mean(v, win.stimend)
    if name == "voltage_base":
        return _window_mean(v, win.pre)
    if name == "sag_amplitude":
        end, grad = _window_mean(v, win.stimend)
        seg = v[:, win.stim]
        k = np.argmin(seg, axis=1)
        rows = np.arange(v.shape[0])
        grad[rows, win.stim.start + k] -= 1.0
        return end - seg[rows, k], grad
    raise InvalidInputError(f"no differentiable formulation for feature {name!r}")


DIFFERENTIABLE_FEATURES = ("sag_amplitude", "steady_state_voltage",
                           "steady_state_voltage_stimend", "voltage_base")


def relative_feature_loss(pred_f, true_f, eps: float = LOSS_EPS):
    """Batch relative L2 ``||f - f*|| / (||f*|| + eps)`` and d/d f."""
    r = pred_f - true_f
    num = math.sqrt(float(np.sum(r * r)))
    den = math.sqrt(float(np.sum(true_f * true_f))) + eps
    grad = r / (num * den) if num > 0 else np.zeros_like(r)
    return num / den, grad


# -- training loop ----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    lr: float = 0.004
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    loss_eps: float = LOSS_EPS
    plateau_factor: float = 0.4
    plateau_patience: int = 4
    min_lr: float = 1e-6
    seed: int = 0
    max_steps: int = 0              # 0 means no step cap
    target_val: float = 0.0         # stop once the validation score falls below this
    normalize_output: bool = True
    eval_batch_size: int = 32

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.epochs < 0 or self.batch_size < 1 or self.max_steps < 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and max_steps >= 0 required")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if not all(0 <= b < 1 for b in self.betas) or len(self.betas) != 2:
            raise ConfigError("Adam betas must be two numbers in [0, 1)")
        if self.eval_batch_size < 1:
            raise ConfigError("eval_batch_size must be >= 1")


@dataclass
class HistoryRow:
    epoch: int
    train_l4: float
    val_l2: float
    lr: float
    feature_err: float = math.nan
    seconds: float = 0.0


def history_text(rows) -> str:
    lines = ["# epoch train_l4 val_l2 lr feature_err seconds"]
    for r in rows:
        lines.append(f"{r.epoch} {r.train_l4:.8g} {r.val_l2:.8g} {r.lr:.8g} "
                     f"{r.feature_err:.8g} {r.seconds:.3f}")
    return "\n".join(lines) + "\n"


def parse_history(text: str) -> list:
    rows = []
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        e, l4, l2, lr, fe, s = line.split()
        rows.append(HistoryRow(int(e), float(l4), float(l2), float(lr), float(fe), float(s)))
    return rows


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def evaluate_l2(params: FnoParameters, ds: Dataset, idx, emb: EmbeddingConfig,
                batch_size: int = 32) -> np.ndarray:
    """Per-sample relative L2 of the surrogate on ``idx``."""
    out = []
    idx = np.asarray(idx)
    for s in range(0, len(idx), batch_size):
        b = idx[s:s + batch_size]
        pred = forward(params, ds.inputs(b, emb, params.real_dtype))
        out.append(relative_l2_per_sample(pred, ds.targets[b]))
    return np.concatenate(out) if out else np.empty(0)


def predict_dataset(params: FnoParameters, ds: Dataset, idx, emb: EmbeddingConfig,
                    batch_size: int = 32) -> np.ndarray:
    idx = np.asarray(idx)
    parts = [forward(params, ds.inputs(idx[s:s + batch_size], emb, params.real_dtype))
             for s in range(0, len(idx), batch_size)]
    return np.concatenate(parts) if parts else np.empty((0, ds.grid.n), np.float32)


def _check_splits(ds: Dataset):
    """Train and validation indices; an empty validation split falls back to train."""
    tr, va = ds.indices("train"), ds.indices("validation")
    if len(ds) == 0 or len(tr) == 0:
        raise DatasetError("training needs a nonempty train split")
    if len(va) == 0:
        log.warning("no validation samples; validating on the training split")
        va = tr
    return tr, va


def _dump_batch(batch, ds, loss) -> str:
    amps = ", ".join(f"{a:.4f}" for a in ds.amplitudes[batch])
    return (f"non-finite loss {loss} on batch of samples {batch.tolist()} "
            f"(model ids {ds.model_ids[batch].tolist()}, amplitudes [{amps}] nA)")


def _run_epochs(params, ds, emb, cfg: TrainConfig, step_fn, val_fn, start_epoch=0,
                progress=None):
    """Shared loop: returns (best params, history rows)."""
    tr, va = _check_splits(ds)
    opt = OptimizerState(cfg.lr, cfg.betas, cfg.adam_eps)
    sched = SchedulerState(cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr)
    rng = np.random.default_rng(cfg.seed)
    history = []
    best, best_val = params.copy(), math.inf
    steps = 0
    for epoch in range(start_epoch + 1, start_epoch + cfg.epochs + 1):
        t0 = time.perf_counter()
        order = tr[rng.permutation(len(tr))]
        losses = []
        for s in range(0, len(order), cfg.batch_size):
            batch = order[s:s + cfg.batch_size]
            loss, grads = step_fn(params, batch)
            if not math.isfinite(loss):
                err = TrainingError(_dump_batch(batch, ds, loss))
                err.batch_indices = batch
                raise err
            adam_step(opt, params, grads)
            losses.append(loss)
            steps += 1
            if cfg.max_steps and steps >= cfg.max_steps:
                break
        val, feat, score = val_fn(params, va)
        row = HistoryRow(epoch, float(np.mean(losses)), val, opt.lr, feat,
                         time.perf_counter() - t0)
        history.append(row)
        log.info("epoch %d train_l4 %.5f val %.5f lr %.2e (%.1fs)",
                 epoch, row.train_l4, row.val_l2, row.lr, row.seconds)
        if progress:
            progress(row)
        if score < best_val:
            best_val, best = score, params.copy()
        plateau_step(sched, opt, score)
        if cfg.max_steps and steps >= cfg.max_steps:
            break
        if score < cfg.target_val:
            log.info("validation score %.5f below target %.5f; stopping", score, cfg.target_val)
            break
    return best, history, steps


def output_normalization(ds: Dataset, idx) -> tuple:
    t = ds.targets[idx]
    return float(np.std(t)) or 1.0, float(np.mean(t))


def train(fno_cfg: FnoConfig, emb: EmbeddingConfig, ds: Dataset, cfg: TrainConfig = TrainConfig(),
          progress=None, init: FnoParameters | None = None):
    """Minimize batch-mean relative L4 error; keep the best-validation weights.

    Returns ``(checkpoint, history)``.  With ``normalize_output`` the
    output affine map is fixed to the training-target mean and spread.
    """
    tr, _ = _check_splits(ds)
    if fno_cfg.in_channels != emb.n_channels:
        raise ConfigError(f"FNO in_channels {fno_cfg.in_channels} != embedding channels {emb.n_channels}")
    ds.latent_columns(emb.features)
    if init is None:
        if cfg.normalize_output:
            scale, shift = output_normalization(ds, tr)
            fno_cfg = FnoConfig(**{**asdict(fno_cfg), "out_scale": scale, "out_shift": shift})
        params = init_params(fno_cfg, cfg.seed, np.float32)
    else:
        params = init.copy()

    def step(p, batch):
        x = ds.inputs(batch, emb, p.real_dtype)
        pred, cache = forward(p, x, keep=True)
        loss, g = relative_l4_loss(pred, ds.targets[batch], cfg.loss_eps)
        return loss, backward(p, cache, g)

    def val(p, va):
        l2 = float(np.mean(evaluate_l2(p, ds, va, emb, cfg.eval_batch_size)))
        return l2, math.nan, l2

    best, history, steps = _run_epochs(params, ds, emb, cfg, step, val, progress=progress)
    text = history_text(history)
    meta = {"kind": "train", "epochs": len(history), "steps": steps, "seed": cfg.seed,
            "subsample_factor": ds.subsample_factor,
            "best_val_l2": min((r.val_l2 for r in history), default=math.nan),
            "history_digest": _digest(text), "train_config": _cfg_dict(cfg)}
    return Checkpoint(best, emb, ds.bounds, _json_safe(meta)), history


def _cfg_dict(cfg) -> dict:
    d = asdict(cfg)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def _json_safe(d):
    if isinstance(d, dict):
        return {k: _json_safe(v) for k, v in d.items()}
    if isinstance(d, float) and not math.isfinite(d):
        return None
    return d


def feature_targets(ds: Dataset, feature: str, threshold: float = -20.0) -> np.ndarray:
    """Reference feature values of every target; rejects undefined entries."""
    vals = np.empty(len(ds))
    for i in range(len(ds)):
        fs = extract_features(ds.trace(i), ds.stimulus(i), threshold)
        if not fs.defined(feature):
            raise DatasetError(f"{feature} is undefined on sample {i} "
                               f"(amplitude {ds.amplitudes[i]:.4f} nA)")
        vals[i] = fs[feature]
    return vals


def finetune(cp: Checkpoint, ds: Dataset, feature: str = "sag_amplitude", lam: float = 25.0,
             cfg: TrainConfig = TrainConfig(lr=2e-4, plateau_patience=3, epochs=30),
             progress=None):
    """Continue training on ``L4 + lam * relative-L2(feature)``.

    The feature is recomputed on predictions with a differentiable
    formulation; every target must define it.  Returns ``(checkpoint, history)``.
    """
    if feature not in DIFFERENTIABLE_FEATURES:
        raise InvalidInputError(f"no differentiable formulation for feature {feature!r}")
    if lam < 0:
        raise ConfigError("feature weight must be >= 0")
    emb = cp.embedding
    ftrue = feature_targets(ds, feature)
    win = FeatureWindows.for_dataset(ds)
    params = cp.params.copy()

    def step(p, batch):
        x = ds.inputs(batch, emb, p.real_dtype)
        pred, cache = forward(p, x, keep=True)
        loss, g = relative_l4_loss(pred, ds.targets[batch], cfg.loss_eps)
        if lam:
            f, jac = differentiable_feature(feature, pred, win)
            lf, gf = relative_feature_loss(f, ftrue[batch], cfg.loss_eps)
            loss += lam * lf
            g = g + (lam * gf[:, None] * jac).astype(g.dtype)
        return loss, backward(p, cache, g)

    def val(p, va):
        pred = predict_dataset(p, ds, va, emb, cfg.eval_batch_size)
        l2 = float(np.mean(relative_l2_per_sample(pred, ds.targets[va])))
        f, _ = differentiable_feature(feature, pred, win)
        fe, _ = relative_feature_loss(f, ftrue[va], cfg.loss_eps)
        return l2, fe, l2 + lam * fe

    start = int(cp.metadata.get("epochs", 0) or 0)
    best, history, steps = _run_epochs(params, ds, emb, cfg, step, val, start, progress)
    text = history_text(history)
    meta = dict(cp.metadata)
    meta.update({"kind": "finetune", "feature": feature, "lambda": lam,
                 "finetune_epochs": len(history), "finetune_steps": steps,
                 "history_digest": _digest(text), "finetune_config": _cfg_dict(cfg)})
    return Checkpoint(best, emb, cp.bounds, _json_safe(meta)), history
