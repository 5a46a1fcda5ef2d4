"""MSE training of single models and seed-diversified ensembles."""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .model import AudioSignal, ModelParameters, as_knobs, forward_graph, init_model, param_tensors, receptive_field


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    chunk_length: int = 4096
    batch_size: int = 8
    lr: float = 1e-3
    lr_final: float = None     # if set, lr decays geometrically to this value at the last epoch
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    shuffle_seed: int = 0
    precision: str = "float32"
    verbose: bool = False

    def validate(self, rf=None):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if rf is not None and self.chunk_length < rf:
            raise ValueError(
                f"chunk_length {self.chunk_length} is shorter than the receptive field {rf}"
            )
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision}")
        if self.lr_final is not None and not self.lr_final > 0:
            raise ValueError("lr_final must be positive")

    def lr_at(self, epoch):
        if self.lr_final is None or self.epochs == 1:
            return self.lr
        return self.lr * (self.lr_final / self.lr) ** (epoch / (self.epochs - 1))

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def to_dict(self):
        return {
            "epochs": self.epochs, "chunk_length": self.chunk_length,
            "batch_size": self.batch_size, "lr": self.lr, "lr_final": self.lr_final, "beta1": self.beta1,
            "beta2": self.beta2, "eps": self.eps, "shuffle_seed": self.shuffle_seed,
            "precision": self.precision, "verbose": self.verbose,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class LabeledDataset:
    """A shared dry input ``x`` and its labeled ``(g, wet)`` pairs."""

    x: AudioSignal
    pairs: list = field(default_factory=list)

    def __len__(self):
        return len(self.pairs)

    def add(self, g, wet):
        g = as_knobs(g)
        if g.ndim != 1:
            raise ValueError("one knob vector per pair")
        if self.pairs and g.shape[0] != self.pairs[0][0].shape[0]:
            raise ValueError(f"knob count {g.shape[0]} differs from dataset's {self.pairs[0][0].shape[0]}")
        if len(wet) != len(self.x) or wet.sample_rate != self.x.sample_rate:
            raise ValueError(
                f"wet signal ({len(wet)} @ {wet.sample_rate} Hz) does not match "
                f"dry input ({len(self.x)} @ {self.x.sample_rate} Hz)"
            )
        self.pairs.append((g, wet))

    def knobs(self):
        if not self.pairs:
            return np.zeros((0, 0))
        return np.stack([g for g, _ in self.pairs])

    def copy(self):
        return LabeledDataset(self.x, [(g.copy(), w) for g, w in self.pairs])

    def __eq__(self, other):
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (
            self.x == other.x
            and len(self) == len(other)
            and all(np.array_equal(g1, g2) and w1 == w2
                    for (g1, w1), (g2, w2) in zip(self.pairs, other.pairs))
        )


def mse(a, b):
    """Mean squared difference of two equal-length signals."""
    a = a.samples if isinstance(a, AudioSignal) else np.asarray(a, dtype=np.float64)
    b = b.samples if isinstance(b, AudioSignal) else np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.mean(d * d))


@dataclass
class Chunk:
    dry: np.ndarray      # context + chunk, length rf - 1 + chunk_length (zero-padded)
    g: np.ndarray
    wet: np.ndarray      # chunk_length targets (zero-padded past the signal end)
    valid: int           # number of real target samples
    pair: int
    start: int


def make_chunks(dataset, config, rf):
    """Tile every pair into chunks with ``rf - 1`` samples of left context.

    Chunks are fixed length; the final one of a pair is zero-padded and its
    ``valid`` count marks the real samples. Order is pair-major, time-minor.
    """
    if len(dataset) == 0:
        raise ValueError("cannot make chunks from an empty dataset")
    config.validate(rf)
    L, ctx = config.chunk_length, rf - 1
    x = dataset.x.samples
    T = x.shape[0]
    padded = np.concatenate([np.zeros(ctx), x, np.zeros(L)])
    chunks = []
    for i, (g, wet) in enumerate(dataset.pairs):
        w = np.concatenate([wet.samples, np.zeros(L)])
        for start in range(0, T, L):
            valid = min(L, T - start)
            chunks.append(Chunk(
                dry=padded[start:start + ctx + L].copy(),
                g=g, wet=w[start:start + L].copy(), valid=valid, pair=i, start=start,
            ))
    return chunks


def _stack_chunks(chunks, dtype):
    dry = np.stack([c.dry for c in chunks])[:, None, :].astype(dtype)
    wet = np.stack([c.wet for c in chunks])[:, None, :].astype(dtype)
    g = np.stack([c.g for c in chunks]).astype(dtype)
    mask = np.zeros(wet.shape, dtype=dtype)
    for i, c in enumerate(chunks):
        mask[i, 0, :c.valid] = 1.0
    return dry, wet, g, mask


def chunk_loss(params, chunks, dtype=np.float64):
    """Sum of squared errors and valid-sample count over ``chunks`` (no gradients)."""
    cfg = params.config
    rf = receptive_field(cfg)
    dry, wet, g, mask = _stack_chunks(chunks, dtype)
    out = forward_graph(cfg, param_tensors(params, dtype=dtype), ad.constant(dry), ad.constant(g))
    pred = out.data[:, :, rf - 1:]
    err = (pred - wet) * mask
    return float(np.sum(err.astype(np.float64) ** 2)), float(mask.sum())


def train_model(init, dataset, config, log=None):
    """Minibatch Adam on MSE for ``config.epochs`` epochs.

    Returns ``(params, history)`` where ``history[e]`` is the mean squared
    error over all training samples seen during epoch ``e``.
    """
    cfg = init.config
    rf = receptive_field(cfg)
    config.validate(rf)
    dtype = config.dtype
    chunks = make_chunks(dataset, config, rf)
    dry, wet, G, mask = _stack_chunks(chunks, dtype)
    n = len(chunks)
    names = init.names()
    params = [init.arrays[k].astype(dtype) for k in names]
    state = ad.adam_init(params)
    rng = np.random.default_rng(config.shuffle_seed)
    total = float(mask.sum())
    history = []
    emit = log if log is not None else (print if config.verbose else None)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        hyper = ad.AdamHyper(config.lr_at(epoch), config.beta1, config.beta2, config.eps)
        sse = 0.0
        try:
            for s in range(0, n, config.batch_size):
                idx = np.sort(order[s:s + config.batch_size])
                leaves = [ad.leaf(p) for p in params]
                p = dict(zip(names, leaves))
                out = forward_graph(cfg, p, ad.constant(dry[idx]), ad.constant(G[idx]))
                m = mask[idx]
                loss = ad.mse_loss(out[:, :, rf - 1:], wet[idx], weight=m)
                grads = ad.backward(loss, leaves)
                params, state = ad.adam_step(params, grads, state, hyper)
                sse += float(loss.data) * float(m.sum())
        except (ad.NonFiniteError, FloatingPointError) as exc:
            raise TrainingDivergedError(f"training diverged in epoch {epoch}: {exc}") from exc
        epoch_loss = sse / total
        if not np.isfinite(epoch_loss):
            raise TrainingDivergedError(f"training diverged in epoch {epoch}: loss {epoch_loss}")
        history.append(epoch_loss)
        if emit is not None:
            emit(f"epoch {epoch} loss {epoch_loss:.9e}")
    arrays = {k: p.astype(np.float64) for k, p in zip(names, params)}
    return ModelParameters(cfg, arrays), history


@dataclass
class Ensemble:
    models: list
    histories: list = field(default_factory=list)
    seeds: list = field(default_factory=list)

    def __post_init__(self):
        if not self.models:
            raise ValueError("empty ensemble")
        c0 = self.models[0].config
        if any(m.config != c0 for m in self.models):
            raise ValueError("ensemble members must share one ModelConfig")

    @property
    def config(self):
        return self.models[0].config

    def __len__(self):
        return len(self.models)


def member_shuffle_seed(seed):
    return [int(seed), 0x5F]


def _train_member(args):
    model_config, seed, dataset, config = args
    init = init_model(model_config, seed)
    return train_model(init, dataset, replace(config, shuffle_seed=member_shuffle_seed(seed)))


def train_ensemble(dataset, M, seeds, config, model_config, workers=1):
    """Train ``M`` models that differ only by init seed and shuffle order."""
    seeds = [int(s) for s in seeds]
    if M != len(seeds):
        raise ValueError(f"M={M} but {len(seeds)} seeds given")
    if len(set(seeds)) != len(seeds):
        raise ValueError(f"ensemble seeds must be distinct, got {seeds}")
    jobs = [(model_config, s, dataset, config) for s in seeds]
    if workers > 1 and M > 1:
        with ProcessPoolExecutor(max_workers=min(workers, M)) as pool:
            results = list(pool.map(_train_member, jobs))
    else:
        results = [_train_member(j) for j in jobs]
    return Ensemble([r[0] for r in results], [r[1] for r in results], seeds)
