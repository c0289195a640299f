"""Voltage and feature error reports for surrogate predictions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset
from .embedding import EmbeddingConfig
from .features import extract_features
from .fno import FnoParameters
from .signal import Trace
from .training import predict_dataset, relative_l2_per_sample

REPORT_FEATURES = ("spikecount", "AP1_width", "mean_AP_amplitude", "steady_state_voltage",
                   "mean_frequency", "sag_amplitude")


@dataclass
class FeatureError:
    name: str
    rel_l2: float
    both_defined: int
    total: int
    pred_only: int = 0
    true_only: int = 0


@dataclass
class EvaluationReport:
    n: int
    voltage_l2_mean: float
    voltage_l2_median: float
    features: dict = field(default_factory=dict)
    never_fires: int = 0          # spiking targets whose prediction has no spike
    spiking_targets: int = 0

    def to_text(self) -> str:
        lines = [f"samples {self.n}",
                 f"voltage_rel_l2_mean {self.voltage_l2_mean:.6f}",
                 f"voltage_rel_l2_median {self.voltage_l2_median:.6f}",
                 f"spiking_targets {self.spiking_targets}",
                 f"predicted_silent_on_spiking {self.never_fires}",
                 "# feature rel_l2 both_defined total pred_only true_only"]
        for fe in self.features.values():
            lines.append(f"{fe.name} {fe.rel_l2:.6f} {fe.both_defined} {fe.total} "
                         f"{fe.pred_only} {fe.true_only}")
        return "\n".join(lines) + "\n"


def feature_error(pred_sets, true_sets, name: str) -> FeatureError:
    """Dataset-level relative L2 over samples where both values are defined."""
    p, t = [], []
    pred_only = true_only = 0
    for fp, ft in zip(pred_sets, true_sets):
        dp, dt = fp.defined(name), ft.defined(name)
        if dp and dt:
            p.append(fp[name])
            t.append(ft[name])
        elif dp:
            pred_only += 1
        elif dt:
            true_only += 1
    if not t:
        return FeatureError(name, math.nan, 0, len(true_sets), pred_only, true_only)
    p, t = np.asarray(p), np.asarray(t)
    den = np.linalg.norm(t)
    err = np.linalg.norm(p - t) / den if den > 0 else (0.0 if np.allclose(p, t) else math.inf)
    return FeatureError(name, float(err), len(t), len(true_sets), pred_only, true_only)


def compare_traces(pred: np.ndarray, ds: Dataset, idx, names=REPORT_FEATURES,
                   threshold: float = -20.0) -> EvaluationReport:
    idx = np.asarray(idx)
    l2 = relative_l2_per_sample(pred, ds.targets[idx])
    pred_sets, true_sets = [], []
    never, spiking = 0, 0
    for row, i in enumerate(idx):
        stim = ds.stimulus(int(i))
        ft = extract_features(ds.trace(int(i)), stim, threshold)
        fp = extract_features(Trace(ds.grid, pred[row].astype(np.float64)), stim, threshold)
        true_sets.append(ft)
        pred_sets.append(fp)
        if ft["spikecount"] > 0:
            spiking += 1
            never += fp["spikecount"] == 0
    feats = {n: feature_error(pred_sets, true_sets, n) for n in names}
    return EvaluationReport(len(idx), float(np.mean(l2)), float(np.median(l2)), feats,
                            int(never), spiking)


def evaluate_checkpoint(params: FnoParameters, emb: EmbeddingConfig, ds: Dataset, idx,
                        names=REPORT_FEATURES, batch_size: int = 32) -> EvaluationReport:
    pred = predict_dataset(params, ds, idx, emb, batch_size)
    return compare_traces(pred, ds, idx, names)
