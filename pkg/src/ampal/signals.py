"""Deterministic synthetic guitar-like dry signals."""

import numpy as np

from .model import AudioSignal


def plucked_dry(seconds, sample_rate, seed, mean_note=0.25):
    """Plucked-string-like notes and short noise bursts at varied levels.

    Notes are sums of decaying harmonics with a random fundamental between
    low E (82 Hz) and ~660 Hz; roughly one event in six is a noise burst.
    Peak levels span about 30 dB so the drive stage sees both clean and
    clipped material.
    """
    n = int(round(seconds * sample_rate))
    if n < 1:
        raise ValueError("signal must have at least one sample")
    rng = np.random.default_rng(seed)
    out = np.zeros(n)
    t = 0
    while t < n:
        dur = max(int(rng.exponential(mean_note) * sample_rate), sample_rate // 50)
        dur = min(dur, n - t)
        tt = np.arange(dur) / sample_rate
        level = 10.0 ** rng.uniform(-1.6, -0.1)
        if rng.random() < 1.0 / 6.0:
            env = np.exp(-tt * rng.uniform(20.0, 80.0))
            ev = rng.standard_normal(dur) * env
        else:
            f0 = 82.4 * 2.0 ** rng.uniform(0.0, 3.0)
            decay = rng.uniform(2.0, 8.0)
            ev = np.zeros(dur)
            for h in range(1, 9):
                fh = f0 * h
                if fh >= 0.45 * sample_rate:
                    break
                amp = rng.uniform(0.3, 1.0) / h
                ev += amp * np.sin(2 * np.pi * fh * tt + rng.uniform(0, 2 * np.pi)) * np.exp(-tt * decay * h ** 0.5)
            attack = min(dur, max(1, int(0.002 * sample_rate)))
            ev[:attack] *= np.linspace(0.0, 1.0, attack)
        peak = np.max(np.abs(ev))
        if peak > 0:
            out[t:t + dur] += level * ev / peak
        t += dur
    return AudioSignal(out, sample_rate)
