"""Deterministic six-knob amp simulator used as the labeling oracle.

Signal chain (fixed order)::

    Gain (0..+40 dB) -> tanh waveshaper -> Bass/Mid/Treble peaking EQ (+-12 dB)
    -> Presence high shelf (0..+9 dB) -> Master (-40..0 dB)

All filters are RBJ cookbook biquads with Q = 0.7.
"""

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.signal import sosfilt

from .model import AudioSignal, as_knobs

KNOB_NAMES = ("Gain", "Bass", "Mid", "Treble", "Master", "Presence")


@dataclass(frozen=True)
class OracleConfig:
    knob_names: tuple = KNOB_NAMES
    sample_rate: int = 16000
    drive_db: tuple = (0.0, 40.0)
    bass_hz: float = 100.0
    mid_hz: float = 600.0
    treble_hz: float = 3000.0
    eq_db: tuple = (-12.0, 12.0)
    presence_hz: float = 4000.0
    presence_db: tuple = (0.0, 9.0)
    master_db: tuple = (-40.0, 0.0)
    q: float = 0.7

    def __post_init__(self):
        for name in ("knob_names", "drive_db", "eq_db", "presence_db", "master_db"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    @property
    def knob_count(self):
        return len(self.knob_names)

    def validate(self):
        if self.knob_names != KNOB_NAMES:
            raise ValueError(f"the simulated chain needs knobs {KNOB_NAMES}, got {self.knob_names}")
        ranges = self.drive_db + self.eq_db + self.presence_db + self.master_db
        if not all(np.isfinite(v) for v in ranges + (self.q,)):
            raise ValueError("oracle ranges must be finite")
        nyq = 0.5 * self.sample_rate
        for name in ("bass_hz", "mid_hz", "treble_hz", "presence_hz"):
            f = getattr(self, name)
            # a shelf at (or near) Nyquist collapses to an identity filter
            if not 0.0 < f < 0.9 * nyq:
                raise ValueError(
                    f"{name}={f} Hz must lie below 0.9 x Nyquist ({0.9 * nyq:.0f} Hz) "
                    f"at sample rate {self.sample_rate}"
                )

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _lerp(rng, t):
    return rng[0] + (rng[1] - rng[0]) * t


def peaking(f0, gain_db, q, fs):
    """RBJ peaking-EQ biquad as a normalized second-order section."""
    A = 10.0 ** (gain_db / 40.0)
    w0 = 2.0 * np.pi * f0 / fs
    alpha = np.sin(w0) / (2.0 * q)
    cw = np.cos(w0)
    b = np.array([1.0 + alpha * A, -2.0 * cw, 1.0 - alpha * A])
    a = np.array([1.0 + alpha / A, -2.0 * cw, 1.0 - alpha / A])
    return np.concatenate([b / a[0], a / a[0]])


def high_shelf(f0, gain_db, q, fs):
    """RBJ high-shelf biquad as a normalized second-order section."""
    A = 10.0 ** (gain_db / 40.0)
    w0 = 2.0 * np.pi * f0 / fs
    alpha = np.sin(w0) / (2.0 * q)
    cw = np.cos(w0)
    sa = 2.0 * np.sqrt(A) * alpha
    b = np.array([
        A * ((A + 1) + (A - 1) * cw + sa),
        -2.0 * A * ((A - 1) + (A + 1) * cw),
        A * ((A + 1) + (A - 1) * cw - sa),
    ])
    a = np.array([
        (A + 1) - (A - 1) * cw + sa,
        2.0 * ((A - 1) - (A + 1) * cw),
        (A + 1) - (A - 1) * cw - sa,
    ])
    return np.concatenate([b / a[0], a / a[0]])


def tone_stack(g, config):
    """Second-order sections for the EQ part of the chain (4 x 6)."""
    gain, bass, mid, treble, master, presence = g
    fs, q = config.sample_rate, config.q
    return np.stack([
        peaking(config.bass_hz, _lerp(config.eq_db, bass), q, fs),
        peaking(config.mid_hz, _lerp(config.eq_db, mid), q, fs),
        peaking(config.treble_hz, _lerp(config.eq_db, treble), q, fs),
        high_shelf(config.presence_hz, _lerp(config.presence_db, presence), q, fs),
    ])


def apply_eq(samples, g, config):
    return sosfilt(tone_stack(g, config), samples)


def simulate_amp(x, g, config=None):
    """Run dry signal ``x`` through the simulated amp at knob setting ``g``."""
    config = config or OracleConfig()
    g = as_knobs(g, config.knob_count)
    if g.ndim != 1:
        raise ValueError("simulate_amp takes a single knob vector")
    samples = x.samples if isinstance(x, AudioSignal) else np.asarray(x, dtype=np.float64)
    drive = 10.0 ** (_lerp(config.drive_db, g[0]) / 20.0)
    shaped = np.tanh(drive * samples)
    eq = apply_eq(shaped, g, config)
    out = eq * 10.0 ** (_lerp(config.master_db, g[4]) / 20.0)
    if isinstance(x, AudioSignal):
        return AudioSignal(out, x.sample_rate)
    return out


class DuplicateKnobError(ValueError):
    pass


def label(dataset, g, oracle=None, allow_duplicates=False):
    """Append ``(g, simulate_amp(dataset.x, g))`` to ``dataset`` and return it."""
    oracle = oracle or OracleConfig()
    g = as_knobs(g, oracle.knob_count).copy()
    if not allow_duplicates:
        for i, (gi, _) in enumerate(dataset.pairs):
            if np.max(np.abs(gi - g)) <= 1e-9:
                raise DuplicateKnobError(f"knob vector {g} already labeled as pair {i}")
    dataset.add(g, simulate_amp(dataset.x, g, oracle))
    return dataset
