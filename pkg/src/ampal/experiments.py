"""Active-learning loop, sampling baselines, validation and reporting.

Every random choice in a run is derived from ``ExperimentConfig.seed`` through
fixed stream tags, so two runs with the same configuration label the same
knob settings and train bit-identical models when executed single-threaded.
"""

import json
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .acquisition import AcquisitionConfig, propose
from .baselines import BetaParams, component_histogram, fit_beta, sample_beta, sample_uniform
from .model import ModelConfig, forward, init_model
from .oracle import KNOB_NAMES, OracleConfig, label, simulate_amp
from .persistence import RunLog, read_wav, save_checkpoint, save_dataset
from .signals import plucked_dry
from .training import LabeledDataset, TrainConfig, mse, train_ensemble, train_model

# stream tags for np.random.SeedSequence([seed, tag, ...])
_INITIAL, _ENSEMBLE, _PROPOSE, _FINAL, _UNIFORM, _BETA, _FALLBACK = range(1, 8)

DUPLICATE_TOL = 1e-9


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    acquisition: AcquisitionConfig = field(default_factory=AcquisitionConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    ensemble_size: int = 4
    initial_points: int = 10
    budget: int = 64
    seed: int = 0
    dry_seconds: float = 10.0
    dry_seed: int = 1
    dry_path: str = None
    note_length: float = 0.25
    val_seconds: float = 30.0
    val_seed: int = 2
    val_paths: tuple = ()
    n_val_settings: int = 64
    val_settings_seed: int = 3
    beta_alpha: float = 0.5
    beta_beta: float = 0.5
    workers: int = 1
    output_dir: str = None

    def validate(self):
        if self.ensemble_size < 2:
            raise ValueError(f"ensemble_size must be >= 2, got {self.ensemble_size}")
        if not 1 <= self.initial_points <= self.budget:
            raise ValueError(
                f"need 1 <= initial_points <= budget, got {self.initial_points} and {self.budget}"
            )
        if self.n_val_settings < 1:
            raise ValueError("n_val_settings must be >= 1")
        if self.model.knob_count != len(KNOB_NAMES):
            raise ValueError(f"the oracle has {len(KNOB_NAMES)} knobs; model.knob_count is {self.model.knob_count}")
        self.model.validate()
        self.acquisition.validate()
        BetaParams(self.beta_alpha, self.beta_beta)
        return self

    def to_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.to_dict() if hasattr(v, "to_dict") else (list(v) if isinstance(v, tuple) else v)
        return out

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for name, sub in (("model", ModelConfig), ("train", TrainConfig),
                          ("acquisition", AcquisitionConfig), ("oracle", OracleConfig)):
            if name in d:
                kw[name] = sub.from_dict(d.pop(name))
        if "val_paths" in d:
            d["val_paths"] = tuple(d["val_paths"])
        return cls(**kw, **d)

    def with_overrides(self, overrides):
        """Apply ``{"section.field" or "field": value}`` overrides."""
        d = self.to_dict()
        for key, value in overrides.items():
            parts = key.split(".")
            target = d
            for p in parts[:-1]:
                if p not in target or not isinstance(target[p], dict):
                    raise ValueError(f"unknown config section {p!r} in {key!r}")
                target = target[p]
            if parts[-1] not in target:
                raise ValueError(f"unknown config key {key!r}")
            target[parts[-1]] = value
        if "model.dilations" in overrides and "model.layers" not in overrides:
            d["model"]["layers"] = None      # derived from the new dilations
        return ExperimentConfig.from_dict(d)


def load_config(path):
    """Read an :class:`ExperimentConfig` from a JSON text file.

    The file may name a ``preset`` whose values the remaining keys override.
    """
    d = json.loads(Path(path).read_text())
    base = preset(d.pop("preset", "default"))
    merged = base.to_dict()
    for key, value in d.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            if key == "model" and "dilations" in value and "layers" not in value:
                value = {**value, "layers": None}
            merged[key] = {**merged[key], **value}
        else:
            merged[key] = value
    return ExperimentConfig.from_dict(merged)


def preset(name):
    """Named configurations.

    ``default`` follows the reference experiment (ensemble of 4, 10 initial
    points, 64 labels, 50 epochs). ``compact`` shrinks the model, the audio
    and the ascent so a full comparison fits in well under an hour on one
    core.
    """
    if name == "default":
        return ExperimentConfig()
    if name == "compact":
        return ExperimentConfig(
            model=ModelConfig(channels=4, dilations=(1, 2, 4, 8, 16, 32), head_channels=4),
            train=TrainConfig(epochs=50, chunk_length=1024, batch_size=4, lr=1e-2),
            acquisition=AcquisitionConfig(ascent_steps=100, probe_length=1024, precision="float32"),
            dry_seconds=4096 / 16000,
            note_length=0.03,
            val_seconds=2.0,
        )
    if name == "tiny":
        return ExperimentConfig(
            model=ModelConfig(channels=2, dilations=(1, 2), head_channels=2),
            train=TrainConfig(epochs=2, chunk_length=128, batch_size=8, lr=1e-2),
            acquisition=AcquisitionConfig(restarts=4, ascent_steps=5, probe_length=128),
            initial_points=4, budget=8, dry_seconds=256 / 16000, note_length=0.005,
            val_seconds=512 / 16000, n_val_settings=4,
        )
    raise ValueError(f"unknown preset {name!r} (expected default, compact or tiny)")


def _seed(*parts):
    return np.random.SeedSequence([int(p) for p in parts])


def _int_seeds(seq, n):
    return [int(s) for s in seq.generate_state(n, dtype=np.uint32)]


def dry_signal(config):
    if config.dry_path:
        x = read_wav(config.dry_path)
        if x.sample_rate != config.oracle.sample_rate:
            raise ValueError(
                f"dry input is {x.sample_rate} Hz but the oracle runs at {config.oracle.sample_rate} Hz"
            )
        return x
    return plucked_dry(config.dry_seconds, config.oracle.sample_rate, config.dry_seed, config.note_length)


def validation_signals(config):
    if config.val_paths:
        sigs = [read_wav(p) for p in config.val_paths]
        for p, s in zip(config.val_paths, sigs):
            if s.sample_rate != config.oracle.sample_rate:
                raise ValueError(f"{p}: {s.sample_rate} Hz, oracle runs at {config.oracle.sample_rate} Hz")
        return sigs
    return [plucked_dry(config.val_seconds, config.oracle.sample_rate, config.val_seed, config.note_length)]


def evaluate(params, val_signals, n_val_settings, oracle, seed, batch=8):
    """Mean MSE over ``n_val_settings`` uniform knob vectors and every validation signal."""
    if isinstance(oracle, OracleConfig) and any(v.sample_rate != oracle.sample_rate for v in val_signals):
        raise ValueError("validation audio and oracle sample rates differ")
    G = np.stack(sample_uniform(n_val_settings, params.config.knob_count, seed))
    errs = []
    for v in val_signals:
        for s in range(0, n_val_settings, batch):
            gb = G[s:s + batch]
            pred = forward(params, v.samples, gb)
            for i, g in enumerate(gb):
                target = oracle(v, g) if callable(oracle) else simulate_amp(v, g, oracle)
                errs.append(mse(pred[i], target))
    return float(np.mean(errs))


def _final_model(config, dataset, log, tag):
    seq = _seed(config.seed, _FINAL)
    init_seed, shuffle = _int_seeds(seq, 2)
    t0 = time.perf_counter()
    params, hist = train_model(init_model(config.model, init_seed), dataset,
                               replace(config.train, shuffle_seed=shuffle))
    if log is not None:
        log.append("final_train", strategy=tag, size=len(dataset), init_seed=init_seed,
                   losses=hist, wall_time=time.perf_counter() - t0)
    return params


def _validate_and_log(config, params, log, strategy):
    val = validation_signals(config)
    err = evaluate(params, val, config.n_val_settings, config.oracle, config.val_settings_seed)
    log.append("validation", strategy=strategy, mse=err)
    return err


def _output(config, strategy):
    if config.output_dir is None:
        return None
    d = Path(config.output_dir) / strategy
    d.mkdir(parents=True, exist_ok=True)
    return d


def _finish(config, dataset, params, log, strategy, out):
    err = _validate_and_log(config, params, log, strategy)
    log.append("dataset", strategy=strategy, g=[g.tolist() for g in dataset.knobs()])
    if out is not None:
        save_dataset(dataset, out / "dataset")
        save_checkpoint(out / "model.ckpt", params, {"strategy": strategy, "validation_mse": err,
                                                     "seed": config.seed})
    return err


def _is_duplicate(g, existing):
    return bool(len(existing)) and bool(np.any(np.max(np.abs(existing - g), axis=1) <= DUPLICATE_TOL))


def run_active_learning(config, progress=None):
    """Ensemble-disagreement active learning up to ``config.budget`` labels.

    Returns ``(dataset, final_params, ensemble, log)``; ``ensemble`` is the
    last round's ensemble (None if no round ran).
    """
    config.validate()
    out = _output(config, "active")
    log = RunLog(out / "runlog.jsonl" if out is not None else None)
    log.append("config", strategy="active", config=config.to_dict())
    say = progress or (lambda msg: None)
    x = dry_signal(config)
    k = config.model.knob_count
    dataset = LabeledDataset(x)
    initial = sample_uniform(config.initial_points, k, _seed(config.seed, _INITIAL))
    for g in initial:
        label(dataset, g, config.oracle)
    log.append("initial", g=[g.tolist() for g in initial])
    ensemble, rnd = None, 0
    while len(dataset) < config.budget:
        t0 = time.perf_counter()
        seeds = _int_seeds(_seed(config.seed, _ENSEMBLE, rnd), config.ensemble_size)
        try:
            ensemble = train_ensemble(dataset, config.ensemble_size, seeds, config.train,
                                      config.model, workers=config.workers)
            result = propose(ensemble, x, config.acquisition, rng_seed=_seed(config.seed, _PROPOSE, rnd))
        except Exception as exc:
            raise RuntimeError(f"active learning round {rnd} (dataset size {len(dataset)}): {exc}") from exc
        existing = dataset.knobs()
        fresh = [i for i in result.selected if not _is_duplicate(result.candidates[i].g, existing)]
        fallback = False
        if not fresh:
            others = sorted((i for i in range(len(result.candidates))
                             if not _is_duplicate(result.candidates[i].g, existing)),
                            key=lambda i: -result.candidates[i].D)
            fresh = others[:1]
        remaining = config.budget - len(dataset)
        chosen = sorted(fresh, key=lambda i: -result.candidates[i].D)[:remaining]
        new_g = [result.candidates[i].g for i in chosen]
        if not new_g:
            fallback = True
            new_g = sample_uniform(1, k, _seed(config.seed, _FALLBACK, rnd))
        for g in new_g:
            label(dataset, g, config.oracle)
        log.append(
            "round", round=rnd, dataset_size=len(dataset), ensemble_seeds=seeds,
            acquisition=result.to_record(), labeled=[g.tolist() for g in new_g],
            labeled_D=[result.candidates[i].D for i in chosen], fallback=fallback,
            train_losses=[h[-1] for h in ensemble.histories], wall_time=time.perf_counter() - t0,
        )
        say(f"round {rnd} size {len(dataset)} labeled {len(new_g)} "
            f"max D {max(c.D for c in result.candidates):.3e}")
        rnd += 1
    params = _final_model(config, dataset, log, "active")
    err = _finish(config, dataset, params, log, "active", out)
    say(f"active validation mse {err:.6e}")
    return dataset, params, ensemble, log


def run_baseline(strategy, n, config, progress=None):
    """Label ``n == config.budget`` uniform or Beta-distributed settings and train one model.

    Returns ``(dataset, params, log)``.
    """
    config.validate()
    if n < 1:
        raise ValueError(f"baseline needs n >= 1 labels, got {n}")
    if n != config.budget:
        raise ValueError(f"baseline n ({n}) must equal the budget ({config.budget})")
    k = config.model.knob_count
    if strategy == "uniform":
        G = sample_uniform(n, k, _seed(config.seed, _UNIFORM))
    elif strategy == "beta":
        G = sample_beta(n, k, BetaParams(config.beta_alpha, config.beta_beta), _seed(config.seed, _BETA))
    else:
        raise ValueError(f"unknown strategy {strategy!r} (expected uniform or beta)")
    out = _output(config, strategy)
    log = RunLog(out / "runlog.jsonl" if out is not None else None)
    log.append("config", strategy=strategy, config=config.to_dict())
    dataset = LabeledDataset(dry_signal(config))
    for g in G:
        label(dataset, g, config.oracle)
    params = _final_model(config, dataset, log, strategy)
    err = _finish(config, dataset, params, log, strategy, out)
    if progress:
        progress(f"{strategy} validation mse {err:.6e}")
    return dataset, params, log


def deterministic_view(log):
    """Run-log records without wall-clock fields, for reproducibility checks."""
    def strip(v):
        if isinstance(v, dict):
            return {k: strip(w) for k, w in v.items() if k != "wall_time"}
        if isinstance(v, list):
            return [strip(w) for w in v]
        return v
    return [strip(r) for r in log.records]


@dataclass
class Report:
    rows: list            # (strategy, seed, mse) sorted by mse
    histogram: np.ndarray  # flattened active-learning components, or None
    beta: BetaParams       # fit to the same components, or None

    def format(self):
        lines = ["strategy      seed  validation_mse"]
        lines += [f"{s:<12} {seed:>5}  {m:.6e}" for s, seed, m in self.rows]
        if self.histogram is not None:
            edges = np.linspace(0.0, 1.0, len(self.histogram) + 1)
            lines.append("")
            lines.append("component histogram (active learning)")
            lines += [f"[{a:.1f}, {b:.1f}{']' if i == len(self.histogram) - 1 else ')'}  {c}"
                      for i, (a, b, c) in enumerate(zip(edges[:-1], edges[1:], self.histogram))]
        if self.beta is not None:
            lines.append("")
            lines.append(f"beta fit: alpha={self.beta.alpha:.4f} beta={self.beta.beta:.4f}")
        return "\n".join(lines)


def report(logs, bins=10):
    """Summarize completed run logs into a table, histogram and Beta fit."""
    rows, active_g = [], []
    for log in logs:
        cfg = log.events("config")
        seed = cfg[0]["config"]["seed"] if cfg else -1
        for v in log.events("validation"):
            rows.append((v["strategy"], seed, v["mse"]))
        for d in log.events("dataset"):
            if d["strategy"] == "active":
                active_g.extend(np.asarray(g) for g in d["g"])
    if not rows:
        raise ValueError("no completed runs (no validation records) in the given logs")
    rows.sort(key=lambda r: r[2])
    hist = component_histogram(active_g, bins) if active_g else None
    beta = fit_beta(np.concatenate(active_g)) if active_g else None
    return Report(rows, hist, beta)
