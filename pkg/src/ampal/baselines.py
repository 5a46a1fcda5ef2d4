"""Non-active knob sampling and Beta-distribution analysis of knob values."""

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, expit, polygamma


@dataclass(frozen=True)
class BetaParams:
    alpha: float
    beta: float

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite, got {v}")


def sample_uniform(n, k, seed):
    """``n`` knob vectors with i.i.d. U(0, 1) components."""
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    rng = np.random.default_rng(seed)
    return list(rng.uniform(0.0, 1.0, size=(n, k)))


def _log_gamma_variates(rng, shape, size):
    """log of Gamma(shape, 1) draws (Marsaglia-Tsang, boosted for shape < 1)."""
    boost = shape < 1.0
    a = shape + 1.0 if boost else shape
    d = a - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    out = np.empty(size)
    filled = 0
    while filled < size:
        m = int((size - filled) * 1.1) + 16
        x = rng.standard_normal(m)
        u = rng.uniform(size=m)
        v = (1.0 + c * x) ** 3
        ok = v > 0
        logv = np.log(np.where(ok, v, 1.0))
        ok &= np.log(u) < 0.5 * x * x + d - d * v + d * logv
        take = np.log(d) + logv[ok][: size - filled]
        out[filled:filled + take.size] = take
        filled += take.size
    if boost:
        # G(a) = G(a + 1) * U^(1/a), kept in log space to avoid underflow
        out += np.log(rng.uniform(size=size)) / shape
    return out


def sample_beta(n, k, params, seed):
    """``n`` knob vectors with i.i.d. Beta(alpha, beta) components via a gamma ratio."""
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    rng = np.random.default_rng(seed)
    size = n * k
    lx = _log_gamma_variates(rng, params.alpha, size)
    ly = _log_gamma_variates(rng, params.beta, size)
    return list(expit(lx - ly).reshape(n, k))


def fit_beta(samples, clip=1e-6, tol=1e-8, max_iter=500):
    """Maximum-likelihood Beta fit by Newton's method on the digamma equations.

    Starts from the method-of-moments estimate. Samples are clipped to
    ``[clip, 1 - clip]`` first.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 2:
        raise ValueError("need at least two samples")
    if np.any(x < 0) or np.any(x > 1) or not np.all(np.isfinite(x)):
        raise ValueError("samples must lie in [0, 1]")
    x = np.clip(x, clip, 1.0 - clip)
    if np.all(x == x[0]):
        raise ValueError("cannot fit a Beta distribution to constant samples")
    s1, s2 = np.mean(np.log(x)), np.mean(np.log1p(-x))
    m, v = x.mean(), x.var()
    common = m * (1.0 - m) / v - 1.0
    a, b = (m * common, (1.0 - m) * common) if common > 0 else (1.0, 1.0)

    def residual(a, b):
        ab = digamma(a + b)
        return np.array([digamma(a) - ab - s1, digamma(b) - ab - s2])

    r = residual(a, b)
    for _ in range(max_iter):
        if np.max(np.abs(r)) < tol:
            return BetaParams(float(a), float(b))
        t = polygamma(1, a + b)
        J = np.array([[polygamma(1, a) - t, -t], [-t, polygamma(1, b) - t]])
        step = np.linalg.solve(J, r)
        lam = 1.0
        while True:
            na, nb = a - lam * step[0], b - lam * step[1]
            if na > 0 and nb > 0:
                nr = residual(na, nb)
                if np.max(np.abs(nr)) < np.max(np.abs(r)) or lam < 1e-6:
                    break
            lam *= 0.5
            if lam < 1e-12:
                raise RuntimeError("Beta fit: line search failed")
        a, b, r = na, nb, nr
    raise RuntimeError(f"Beta fit did not converge in {max_iter} iterations (residual {np.max(np.abs(r)):.2e})")


def component_histogram(g_list, bins=10):
    """Counts of all knob components over [0, 1]; the last bin is closed on the right."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    flat = np.concatenate([np.ravel(g) for g in g_list]) if len(g_list) else np.zeros(0)
    counts, _ = np.histogram(flat, bins=bins, range=(0.0, 1.0))
    return counts
