"""``latentfno`` command-line interface.

Exit codes: 0 success, 2 configuration error, 3 data-generation failure,
4 training failure, 5 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_from_dict, load_config
from .dataset import Dataset, build_dataset, load_dataset, save_dataset
from .embedding import model_latent
from .errors import (ConfigError, DatasetError, EnsembleGenerationError, FormatError,
                     InvalidInputError, NumericalBlowupError, ThresholdNotFoundError,
                     TrainingError)
from .evaluation import evaluate_checkpoint
from .features import FEATURE_NAMES, extract_features, fi_curve
from .latent import (convex_hull, ensemble_predict, feature_grid, sample_in_hull,
                     sample_neighborhood, surrogate_fi_curve)
from .oracle import HofEnsemble, generate_ensemble, simulate, trace_producer
from .signal import write_trace
from .studies import benchmark, study_traces, subsample_study
from .training import finetune, history_text, relative_l2_per_sample, train

log = logging.getLogger("latentfno")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAIN, EXIT_IO = 0, 2, 3, 4, 5


class _Fail(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        over["threads"] = args.threads
    return replace(cfg, **over) if over else cfg


def _write(path: Path, text: str):
    path.write_text(text, encoding="utf-8")
    return path


def _latent_arg(text: str):
    try:
        vals = [float(x) for x in text.split(",")]
    except ValueError as exc:
        raise InvalidInputError(f"latent must be comma-separated numbers, got {text!r}") from exc
    return np.asarray(vals)


def _resolve_latent(args, cp):
    """Latent vector from ``--latent`` or ``--model-id`` with ``--ensemble``."""
    if args.latent:
        return _latent_arg(args.latent), None
    if args.model_id is None or not args.ensemble:
        raise InvalidInputError("give --latent or both --model-id and --ensemble")
    model = HofEnsemble.load(args.ensemble).by_id(args.model_id)
    p = model_latent(model, cp.bounds)
    return p.as_array(cp.embedding.features), model


# -- commands -------------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig):
    out = _out_dir(args)
    e = cfg.ensemble
    try:
        ens = generate_ensemble(cfg.neuron, e.count, e.jitter, e.seed, cfg.oracle,
                                e.max_retries, cfg.threads)
    except (EnsembleGenerationError, NumericalBlowupError, ThresholdNotFoundError) as exc:
        raise _Fail(EXIT_DATA, f"ensemble generation failed: {exc}")
    ens.save(out / "ensemble.json")
    train_ids = [m.id for m in ens.models[:e.count - e.held_out]]
    held = [m.id for m in ens.models[e.count - e.held_out:]]
    try:
        ds = build_dataset(ens.subset(train_ids), cfg.sampler, cfg.data.n_samples,
                           cfg.data.subsample_factor, cfg.seed, cfg.data.split, cfg.oracle,
                           threads=cfg.threads)
    except (DatasetError, NumericalBlowupError) as exc:
        raise _Fail(EXIT_DATA, f"dataset generation failed: {exc}")
    ds.meta["held_out_ids"] = held
    ds.meta["config"] = cfg.to_dict()
    digest = save_dataset(ds, out / "dataset.nobl")
    spiking = sum(extract_features(ds.trace(i), ds.stimulus(i))["spikecount"] > 0
                  for i in range(len(ds)))
    hist, _ = np.histogram(ds.amplitudes, bins=13, range=cfg.sampler.support)
    print(f"samples {len(ds)}")
    print(f"grid_points {ds.grid.n}")
    print(f"spiking_fraction {spiking / len(ds):.4f}")
    print(f"amplitude_histogram {' '.join(map(str, hist))}")
    print(f"amplitude_histogram_digest {hashlib.sha256(hist.tobytes()).hexdigest()[:16]}")
    print(f"train_models {train_ids} held_out_models {held}")
    print(f"dataset_digest {digest}")


def _history_path(out: Path, name: str, history) -> Path:
    return _write(out / name, history_text(history))


def cmd_train(args, cfg: RunConfig):
    out = _out_dir(args)
    ds = load_dataset(args.data)
    try:
        cp, history = train(cfg.fno_config(), cfg.embedding, ds, cfg.training)
    except TrainingError as exc:
        raise _Fail(EXIT_TRAIN, f"training aborted: {exc}")
    cp.metadata["config"] = cfg.to_dict()
    save_checkpoint(cp, out / "checkpoint.nobl")
    _history_path(out, "history.log", history)
    final = history[-1].val_l2 if history else float("nan")
    print(f"epochs {len(history)}")
    print(f"final_val_l2 {final:.6f}")
    print(f"checkpoint_digest {cp.digest()}")


def restrict_for_feature(ds: Dataset, feature: str, max_amplitude: float) -> Dataset:
    """Samples below ``max_amplitude`` whose target defines ``feature``."""
    keep = [i for i in range(len(ds)) if ds.amplitudes[i] < max_amplitude
            and extract_features(ds.trace(i), ds.stimulus(i)).defined(feature)]
    if not keep:
        raise DatasetError(f"no samples define {feature} below {max_amplitude} nA")
    return ds.subset(keep)


def cmd_finetune(args, cfg: RunConfig):
    out = _out_dir(args)
    cp = load_checkpoint(args.checkpoint)
    ft = cfg.finetune
    lam = ft.lam if args.lam is None else args.lam
    ds = restrict_for_feature(load_dataset(args.data), ft.feature, ft.max_amplitude)
    try:
        cp2, history = finetune(cp, ds, ft.feature, lam, cfg.finetune_train_config())
    except TrainingError as exc:
        raise _Fail(EXIT_TRAIN, f"fine-tuning aborted: {exc}")
    save_checkpoint(cp2, out / "checkpoint.nobl")
    _history_path(out, "history.log", history)
    print(f"samples {len(ds)} lambda {lam}")
    if history:
        print(f"final_val_l2 {history[-1].val_l2:.6f} final_feature_err {history[-1].feature_err:.6f}")
    print(f"checkpoint_digest {cp2.digest()}")


def cmd_predict(args, cfg: RunConfig):
    out = _out_dir(args)
    cp = load_checkpoint(args.checkpoint)
    latent, model = _resolve_latent(args, cp)
    stim = _stimulus(cfg, cp, args.amplitude, args.subsample_factor)
    tr = ensemble_predict(cp, stim, [latent]).traces[0]
    write_trace(out / "prediction.trace", tr)
    fs = extract_features(tr, stim)
    _write(out / "prediction_features.txt", fs.to_text())
    print(f"grid_points {tr.grid.n}")
    print(fs.to_text(), end="")


def _stimulus(cfg: RunConfig, cp, amplitude: float, factor: int | None):
    factor = factor or (cp.metadata.get("subsample_factor") or cfg.data.subsample_factor)
    stim = cfg.oracle.stimulus(amplitude)
    grid = stim.grid.decimated(factor) if factor > 1 else stim.grid
    return type(stim)(grid, amplitude, stim.onset, stim.duration)


def _summary(res, stim) -> str:
    lines = ["# index latent spikecount steady_state_voltage sag_amplitude"]
    for i, (p, tr) in enumerate(zip(res.latents, res.traces)):
        fs = extract_features(tr, stim)
        coords = ",".join(f"{x:.4f}" for x in np.asarray(p, dtype=float).ravel())
        lines.append(f"{i} {coords} {fs['spikecount']:.0f} {fs['steady_state_voltage']:.4f} "
                     f"{'undefined' if fs['sag_amplitude'] is None else format(fs['sag_amplitude'], '.4f')}")
    return "\n".join(lines) + "\n"


def _save_result(out: Path, res, stim, name: str):
    from .dataset import Dataset as DS
    from .embedding import LatentBounds
    vals = res.values().astype(np.float32)
    lat = np.asarray([np.asarray(p, dtype=float).ravel() for p in res.latents])
    feats = ("i_thr", "s_thr")[:lat.shape[1]] if lat.shape[1] <= 2 else ("i_thr", "s_thr", "ahp_depth")
    ds = DS(stim.grid, stim.onset, stim.duration, 1, np.full(len(vals), stim.amplitude),
            np.full(len(vals), -1), lat, feats, vals, np.zeros(len(vals), np.int8),
            LatentBounds({}), None, {"checkpoint_digest": res.checkpoint_digest})
    save_dataset(ds, out / f"{name}.nobl")
    _write(out / f"{name}.txt", _summary(res, stim))


def cmd_ensemble(args, cfg: RunConfig):
    out = _out_dir(args)
    cp = load_checkpoint(args.checkpoint)
    stim = _stimulus(cfg, cp, args.amplitude, args.subsample_factor)
    ens = HofEnsemble.load(args.ensemble)
    pts = np.array([model_latent(m, cp.bounds).as_array() for m in ens.models])
    n = args.n or cfg.latent.n_hull
    region = convex_hull(pts)
    latents = sample_in_hull(region, n, cfg.seed)
    res = ensemble_predict(cp, stim, list(latents), threads=cfg.threads)
    _save_result(out, res, stim, "ensemble")
    print(f"latents {len(latents)} hull_vertices {len(region.vertices)}")
    print(f"median_spikecount {np.median([extract_features(t, stim)['spikecount'] for t in res.traces]):.1f}")


def cmd_interpolate(args, cfg: RunConfig):
    out = _out_dir(args)
    cp = load_checkpoint(args.checkpoint)
    ens = HofEnsemble.load(args.ensemble)
    model = ens.by_id(args.model_id)
    center = model_latent(model, cp.bounds).as_array()
    radius = args.radius or cfg.latent.radius
    nb = sample_neighborhood(center, radius, args.n or cfg.latent.n_neighbors, cfg.seed)
    lines = ["# amplitude median_rel_l2_vs_oracle"]
    for amp in args.amplitudes:
        stim = _stimulus(cfg, cp, amp, args.subsample_factor)
        res = ensemble_predict(cp, stim, list(nb.points), threads=cfg.threads)
        truth = _oracle_on(stim, model, cfg)
        err = relative_l2_per_sample(res.median()[None], truth[None])[0]
        lines.append(f"{amp:.4f} {err:.6f}")
        _save_result(out, res, stim, f"neighborhood_{amp:+.3f}")
    lines.append(f"# points_outside_box {nb.n_outside_box}")
    text = "\n".join(lines) + "\n"
    _write(out / "interpolation.txt", text)
    print(text, end="")


def _oracle_on(stim, model, cfg: RunConfig) -> np.ndarray:
    from .signal import lowpass_decimate
    full = simulate(model.params, cfg.oracle.stimulus(stim.amplitude), cfg.oracle.dt,
                    (-np.inf, np.inf))
    factor = int(round(stim.grid.dt / full.grid.dt))
    return lowpass_decimate(full, factor).values


def cmd_evaluate(args, cfg: RunConfig):
    cp = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    idx = ds.indices(args.split)
    if len(idx) == 0:
        raise DatasetError(f"split {args.split!r} is empty")
    rep = evaluate_checkpoint(cp.params, cp.embedding, ds, idx)
    text = rep.to_text()
    if args.out:
        _write(_out_dir(args) / f"evaluate_{args.split}.txt", text)
    print(text, end="")


def cmd_fi_curve(args, cfg: RunConfig):
    cp = load_checkpoint(args.checkpoint)
    latent, model = _resolve_latent(args, cp)
    lo, hi = cfg.oracle.amplitude_range
    amps = np.linspace(lo, hi, args.points)
    stim = _stimulus(cfg, cp, 0.0, args.subsample_factor)
    fi = surrogate_fi_curve(cp, latent, amps, stim)
    ref = fi_curve(trace_producer(model.params, cfg.oracle), amps, cfg.oracle.stimulus(0.0)) if model else None
    lines = ["# amplitude_nA surrogate_rate_Hz" + (" oracle_rate_Hz" if ref else "")]
    for i, a in enumerate(amps):
        row = f"{a:.4f} {fi.rates[i]:.3f}"
        if ref:
            row += f" {ref.rates[i]:.3f}"
        lines.append(row)
    text = "\n".join(lines) + "\n"
    if args.out:
        _write(_out_dir(args) / "fi_curve.txt", text)
    print(text, end="")


def cmd_feature_grid(args, cfg: RunConfig):
    cp = load_checkpoint(args.checkpoint)
    if args.feature not in FEATURE_NAMES:
        raise InvalidInputError(f"unknown feature {args.feature!r}")
    ens = HofEnsemble.load(args.ensemble)
    pts = np.array([model_latent(m, cp.bounds).as_array() for m in ens.models])
    region = convex_hull(pts)
    stim = _stimulus(cfg, cp, args.amplitude, args.subsample_factor)
    res = args.resolution or cfg.latent.grid_resolution
    fg = feature_grid(cp, stim, region, res, args.feature)
    lines = [f"# {args.feature} on a {len(fg.xs)}x{len(fg.ys)} lattice; nan = masked or undefined",
             "# y\\x " + " ".join(f"{x:.4f}" for x in fg.xs)]
    for j, y in enumerate(fg.ys):
        lines.append(f"{y:.4f} " + " ".join(f"{v:.4f}" for v in fg.values[j]))
    lines.append(f"# evaluations {fg.evaluations}")
    text = "\n".join(lines) + "\n"
    if args.out:
        _write(_out_dir(args) / f"feature_grid_{args.feature}.txt", text)
    print(text, end="")


def cmd_subsample_study(args, cfg: RunConfig):
    rng = np.random.default_rng(cfg.seed)
    e = cfg.ensemble
    ens = HofEnsemble.load(args.ensemble) if args.ensemble else generate_ensemble(
        cfg.neuron, e.count, e.jitter, e.seed, cfg.oracle, e.max_retries, cfg.threads)
    amps = rng.uniform(*cfg.sampler.support, size=args.n)
    params = [ens.models[i].params for i in rng.integers(0, len(ens.models), args.n)]
    traces, stims = study_traces(params, amps, cfg.oracle, cfg.threads)
    st = subsample_study(traces, stims, range(1, args.max_factor + 1))
    text = st.table()
    if args.out:
        _write(_out_dir(args) / "subsample_study.txt", text)
    print(text, end="")


def cmd_benchmark(args, cfg: RunConfig):
    cp = load_checkpoint(args.checkpoint)
    b = cfg.benchmark
    n = args.n or b.n
    ens = HofEnsemble.load(args.ensemble)
    rng = np.random.default_rng(cfg.seed)
    models = [ens.models[i] for i in rng.integers(0, len(ens.models), n)]
    lat = [model_latent(m, cp.bounds).as_array(cp.embedding.features) for m in models]
    amps = rng.uniform(*cfg.sampler.support, size=n)
    sizes = tuple(args.batch_size) if args.batch_size else b.batch_sizes
    rep = benchmark(cp, [m.params for m in models], lat, amps, cfg.oracle, sizes,
                    b.subsample_factor)
    text = rep.to_text()
    if args.out:
        _write(_out_dir(args) / "benchmark.txt", text)
    print(text, end="")


# -- parser -----------------------------------------------------------------------

COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "finetune": cmd_finetune,
    "predict": cmd_predict, "ensemble": cmd_ensemble, "interpolate": cmd_interpolate,
    "evaluate": cmd_evaluate, "fi-curve": cmd_fi_curve, "feature-grid": cmd_feature_grid,
    "subsample-study": cmd_subsample_study, "benchmark": cmd_benchmark,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="latentfno", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--threads", type=int)

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_)

    def latent_opts(p):
        p.add_argument("--latent", help="comma-separated normalized latent coordinates")
        p.add_argument("--model-id", type=int)
        p.add_argument("--ensemble", help="ensemble manifest")

    def grid_opts(p):
        p.add_argument("--subsample-factor", type=int, default=None,
                       help="output grid decimation relative to the solver grid")

    add("gen-data", "generate an oracle ensemble and a training dataset")
    p = add("train", "train a surrogate")
    p.add_argument("--data", required=True)
    p = add("finetune", "fine-tune with a feature-weighted loss")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--lam", type=float)
    p = add("predict", "predict one trace")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--amplitude", type=float, required=True)
    latent_opts(p)
    grid_opts(p)
    p = add("ensemble", "predict traces for latents sampled in the training hull")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ensemble", required=True)
    p.add_argument("--amplitude", type=float, required=True)
    p.add_argument("--n", type=int)
    grid_opts(p)
    p = add("interpolate", "neighborhood ensemble around a model's latent vs the oracle")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ensemble", required=True)
    p.add_argument("--model-id", type=int, required=True)
    p.add_argument("--amplitudes", type=float, nargs="+", default=[0.1, -0.11])
    p.add_argument("--radius", type=float)
    p.add_argument("--n", type=int)
    grid_opts(p)
    p = add("evaluate", "voltage and feature errors on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "validation", "test"))
    p = add("fi-curve", "surrogate F-I curve (and oracle's when a model id is given)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--points", type=int, default=20)
    latent_opts(p)
    grid_opts(p)
    p = add("feature-grid", "feature heat-map over the training hull")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ensemble", required=True)
    p.add_argument("--feature", required=True)
    p.add_argument("--amplitude", type=float, default=0.1)
    p.add_argument("--resolution", type=int)
    grid_opts(p)
    p = add("subsample-study", "feature error vs subsampling factor and strategy")
    p.add_argument("--ensemble")
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--max-factor", type=int, default=8)
    p = add("benchmark", "surrogate vs oracle throughput")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ensemble", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--batch-size", type=int, nargs="+")
    return ap


_NEEDS_OUT = {"gen-data", "train", "finetune", "predict", "ensemble", "interpolate"}


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command in _NEEDS_OUT and not args.out:
        args.out = "."
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except _Fail as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except (EnsembleGenerationError, NumericalBlowupError, ThresholdNotFoundError) as exc:
        print(f"data generation error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (InvalidInputError, DatasetError, KeyError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
