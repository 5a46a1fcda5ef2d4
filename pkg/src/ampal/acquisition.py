"""Ensemble disagreement and gradient-based search for the next knob settings.

Disagreement ``D(x, g)`` is the cross-model population variance of the
ensemble outputs, averaged over time. Its gradient with respect to ``g`` is
obtained by back-propagating through every member's forward pass (member
parameters held fixed). New settings are found by projected Adam ascent on
``D`` from several random starts, after which nearby optima are merged.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from . import autodiff as ad
from .model import AudioSignal, as_knobs, forward_graph, pad_silence, param_tensors, receptive_field


@dataclass(frozen=True)
class AcquisitionConfig:
    restarts: int = 10
    ascent_steps: int = 200
    ascent_lr: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    probe_length: int = 16384
    cluster_radius: float = 0.05
    precision: str = "float64"

    def validate(self):
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.ascent_steps < 0:
            raise ValueError("ascent_steps must be >= 0")
        if not self.cluster_radius > 0:
            raise ValueError("cluster_radius must be > 0")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision}")

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Candidate:
    g: np.ndarray
    D: float
    restart: int


@dataclass
class AcquisitionResult:
    candidates: list
    selected: list = field(default_factory=list)   # indices into candidates

    @property
    def selected_g(self):
        return [self.candidates[i].g for i in self.selected]

    @property
    def selected_D(self):
        return [self.candidates[i].D for i in self.selected]

    def to_record(self):
        return {
            "candidates": [
                {"g": c.g.tolist(), "D": c.D, "restart": c.restart} for c in self.candidates
            ],
            "selected": list(self.selected),
        }


def _sorted_stats(outputs):
    """Per-element mean and population variance over axis 0.

    Values are sorted along the model axis first so the result does not
    depend on member order, and taken relative to the smallest value so
    identical members give exactly zero.
    """
    s = np.sort(outputs, axis=0)
    ref = s[0]
    d = s - ref
    dm = d.sum(axis=0) / s.shape[0]
    dev = d - dm
    var = (dev * dev).sum(axis=0) / s.shape[0]
    return ref + dm, var


def disagreement(outputs):
    """Mean over time of the cross-model population variance.

    ``outputs`` is (M, T) or (M, ..., T); the mean runs over every axis
    except the model axis.
    """
    if not isinstance(outputs, np.ndarray):
        lengths = {np.shape(o) for o in outputs}
        if len(lengths) > 1:
            raise ValueError(f"outputs differ in shape: {sorted(lengths)}")
    o = np.asarray(outputs, dtype=np.float64)
    if o.ndim < 2:
        raise ValueError(f"need (M, T) outputs, got shape {o.shape}")
    if o.shape[0] < 1 or o.shape[-1] < 1:
        raise ValueError("need at least one model and one timestep")
    _, var = _sorted_stats(o)
    return float(var.mean())


def _probe(x, config):
    s = x.samples if isinstance(x, AudioSignal) else np.asarray(x, dtype=np.float64)
    if config is not None and config.probe_length and s.shape[0] > config.probe_length:
        s = s[: config.probe_length]
    return s


def disagreement_at(ensemble, x, g, config=None, need_grad=True):
    """D for each knob vector in ``g`` and its gradient with respect to ``g``.

    ``g`` is (k,) or (R, k). Returns ``(D, grad)`` with shapes () / (k,) or
    (R,) / (R, k). Members are differentiated one at a time and their
    contributions combined in sorted order, so permuting the ensemble leaves
    both results bit-identical.
    """
    models = ensemble.models if hasattr(ensemble, "models") else list(ensemble)
    cfg = models[0].config
    g = as_knobs(g, cfg.knob_count)
    single = g.ndim == 1
    gb = np.atleast_2d(g)
    dtype = np.dtype(config.precision) if config is not None else np.float64
    s = _probe(x, config)
    R, T, M = gb.shape[0], s.shape[0], len(models)
    ctx = receptive_field(cfg) - 1
    xb = ad.constant(pad_silence(np.broadcast_to(s, (R, 1, T)), ctx).astype(dtype))
    outs, graphs = [], []
    for params in models:
        gl = ad.leaf(gb.astype(dtype))
        out = forward_graph(cfg, param_tensors(params, dtype=dtype), xb, gl)
        out = out[:, :, ctx:]
        outs.append(out.data[:, 0, :].astype(np.float64))
        graphs.append((out, gl))
    o = np.stack(outs)                          # (M, R, T)
    mean_o, var = _sorted_stats(o)
    D = var.mean(axis=-1)                       # (R,)
    if not np.all(np.isfinite(D)):
        raise ad.NonFiniteError("non-finite disagreement")
    grad = None
    if need_grad:
        parts = []
        for i, (out, gl) in enumerate(graphs):
            # dD_r/do_i = 2 (o_i - mean) / (M T); the mean's own dependence cancels
            seed = (2.0 / (M * T)) * (o[i] - mean_o)
            (gg,) = ad.backward(out, [gl], seed=seed[:, None, :].astype(dtype))
            parts.append(gg.astype(np.float64))
        grad = np.sort(np.stack(parts), axis=0).sum(axis=0)
    if single:
        return float(D[0]), (grad[0] if grad is not None else None)
    return D, grad


def ensemble_objective(ensemble, x, config=None):
    def objective(g):
        return disagreement_at(ensemble, x, g, config)
    return objective


def ascend(ensemble, x, g0, config=None, objective=None):
    """Projected Adam ascent on D from start(s) ``g0``.

    Every iterate is clipped to [0, 1]^k. Returns ``(g_best, trajectory)``
    where ``g_best`` is the best iterate seen (never worse than ``g0``) and
    ``trajectory`` holds D at every iterate, shape (steps + 1,) or
    (steps + 1, R). ``objective`` replaces the ensemble disagreement with any
    callable returning ``(values, grads)`` for a batch of knob vectors.
    """
    config = config or AcquisitionConfig()
    config.validate()
    if objective is None:
        objective = ensemble_objective(ensemble, x, config)
    g0 = as_knobs(g0)
    single = g0.ndim == 1
    g = np.atleast_2d(g0).copy()
    hyper = ad.AdamHyper(config.ascent_lr, config.beta1, config.beta2, config.eps)
    state = ad.adam_init([g])
    best_g = g.copy()
    best_D = np.full(g.shape[0], -np.inf)
    traj = []
    for step in range(config.ascent_steps + 1):
        D, grad = objective(g)
        D = np.atleast_1d(np.asarray(D, dtype=np.float64))
        if not np.all(np.isfinite(D)):
            raise ad.NonFiniteError(f"non-finite disagreement at ascent step {step}")
        traj.append(D.copy())
        better = D > best_D
        best_D[better] = D[better]
        best_g[better] = g[better]
        if step == config.ascent_steps:
            break
        (g_new,), state = ad.adam_step([g], [-np.atleast_2d(grad)], state, hyper)
        g = np.clip(g_new, 0.0, 1.0)
    traj = np.array(traj)
    if single:
        return best_g[0], traj[:, 0]
    return best_g, traj


def cluster(points, radius):
    """Single-linkage labels under the L-infinity metric.

    Points closer than ``radius`` (chained) share a cluster, so members of
    different clusters are at least ``radius`` apart.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.shape[0] == 1:
        return np.zeros(1, dtype=int)
    Z = linkage(pts, method="single", metric="chebyshev")
    # fcluster merges at distance <= t; nudge below radius so ties stay apart
    return fcluster(Z, t=np.nextafter(radius, 0.0), criterion="distance") - 1


def select_representatives(candidates, radius):
    """Index of the highest-D candidate in each cluster, clusters in first-seen order."""
    labels = cluster(np.stack([c.g for c in candidates]), radius)
    best = {}
    for i, lab in enumerate(labels):
        if lab not in best or candidates[i].D > candidates[best[lab]].D:
            best[lab] = i
    order = []
    for lab in labels:
        if best[lab] not in order:
            order.append(best[lab])
    return order


def propose(ensemble, x, config=None, rng_seed=0, objective=None, knob_count=None):
    """Multi-restart ascent from uniform random starts, then deduplicate.

    ``objective``/``knob_count`` allow running the same search on a surrogate
    instead of an ensemble.
    """
    config = config or AcquisitionConfig()
    config.validate()
    k = knob_count if knob_count is not None else ensemble.config.knob_count
    rng = np.random.default_rng(rng_seed)
    starts = rng.uniform(0.0, 1.0, size=(config.restarts, k))
    g_best, traj = ascend(ensemble, x, starts, config, objective=objective)
    D_best = traj.max(axis=0)
    candidates = [Candidate(g_best[r].copy(), float(D_best[r]), r) for r in range(config.restarts)]
    return AcquisitionResult(candidates, select_representatives(candidates, config.cluster_radius))
