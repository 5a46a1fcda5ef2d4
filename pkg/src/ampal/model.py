"""Feed-forward WaveNet conditioned on a knob vector.

Each layer computes the gated activation

    z = tanh(W_f * h + V_f * y + V_f'^T g) . sigmoid(W_g * h + V_g * y + V_g'^T g)

where ``*`` is a causal dilated convolution over the hidden signal ``h``,
``y`` is the local condition (the raw dry signal), and the knob vector ``g``
enters through a linear map whose result is broadcast over time. Layers are
joined by residual and skip 1x1 convolutions; a two-layer 1x1 head maps the
summed skips to one output channel.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class AudioSignal:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1:
            raise ValueError(f"AudioSignal must be mono (1-D), got shape {s.shape}")
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return self.samples.shape[0]

    def __eq__(self, other):
        if not isinstance(other, AudioSignal):
            return NotImplemented
        return self.sample_rate == other.sample_rate and np.array_equal(self.samples, other.samples)

    __hash__ = None


def as_knobs(g, k=None):
    """Validate a knob vector (or a batch of them) and return it as float64."""
    g = np.asarray(g, dtype=np.float64)
    if g.ndim not in (1, 2):
        raise ValueError(f"knob vector must be 1-D (or 2-D batch), got shape {g.shape}")
    if k is not None and g.shape[-1] != k:
        raise ValueError(f"expected {k} knob values, got {g.shape[-1]}")
    if not np.all(np.isfinite(g)) or np.any(g < 0.0) or np.any(g > 1.0):
        raise ValueError(f"knob values must lie in [0, 1], got {g}")
    return g


def default_dilations():
    return tuple([2**i for i in range(10)] * 2)


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 8
    kernel_width: int = 3
    dilations: tuple = field(default_factory=default_dilations)
    knob_count: int = 6
    use_residual: bool = True
    use_skip: bool = True
    head_channels: int = 8
    layers: int = None

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.layers is None:
            object.__setattr__(self, "layers", len(self.dilations))
        self.validate()

    def validate(self):
        if self.layers != len(self.dilations):
            raise ValueError(
                f"layers={self.layers} does not match {len(self.dilations)} dilations"
            )
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if self.channels < 1 or self.head_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.knob_count < 1:
            raise ValueError("knob_count must be >= 1")
        if self.kernel_width < 1:
            raise ValueError("kernel_width must be >= 1")
        if any(d < 1 for d in self.dilations):
            raise ValueError(f"dilations must be positive, got {self.dilations}")

    def to_dict(self):
        return {
            "channels": self.channels,
            "kernel_width": self.kernel_width,
            "dilations": list(self.dilations),
            "knob_count": self.knob_count,
            "use_residual": self.use_residual,
            "use_skip": self.use_skip,
            "head_channels": self.head_channels,
            "layers": self.layers,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["dilations"] = tuple(d["dilations"])
        return cls(**d)


def receptive_field(config):
    """Number of input samples that can influence one output sample."""
    return 1 + sum((config.kernel_width - 1) * d for d in config.dilations)


def parameter_shapes(config):
    """Ordered mapping of parameter name to (shape, fan_in)."""
    C, K, k, H = config.channels, config.kernel_width, config.knob_count, config.head_channels
    shapes = {"lift": ((C, 1), 1)}
    for i in range(config.layers):
        p = f"layers.{i}."
        shapes[p + "W_f"] = ((C, C, K), C * K)
        shapes[p + "W_g"] = ((C, C, K), C * K)
        shapes[p + "V_f"] = ((C, 1), 1)
        shapes[p + "V_g"] = ((C, 1), 1)
        shapes[p + "Vc_f"] = ((k, C), k)
        shapes[p + "Vc_g"] = ((k, C), k)
        shapes[p + "res"] = ((C, C), C)
        shapes[p + "skip"] = ((C, C), C)
    shapes["head.0.w"] = ((H, C), C)
    shapes["head.0.b"] = ((H, 1), C)
    shapes["head.1.w"] = ((1, H), H)
    shapes["head.1.b"] = ((1, 1), H)
    return shapes


@dataclass
class ModelParameters:
    """All weights of one model, keyed by name in a fixed order."""

    config: ModelConfig
    arrays: dict

    def names(self):
        return list(self.arrays)

    def copy(self):
        return ModelParameters(self.config, {n: a.copy() for n, a in self.arrays.items()})

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    def __getitem__(self, name):
        return self.arrays[name]


def init_model(config, seed):
    """Scaled-uniform initialization; the output layer starts at zero."""
    config.validate()
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, (shape, fan_in) in parameter_shapes(config).items():
        if name.startswith("head.1") or name.endswith(".b"):
            arrays[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParameters(config, arrays)


def gated_layer(h, y, g, layer, dilation):
    """One gated, doubly conditioned layer on tensors.

    ``h`` (B, C, T) hidden signal, ``y`` (B, 1, T) local condition, ``g``
    (B, k) knob batch, ``layer`` a dict with ``W_f, W_g, V_f, V_g, Vc_f, Vc_g``.
    """
    if h.shape[0] != y.shape[0] or h.shape[2] != y.shape[2]:
        raise ValueError(f"hidden {h.shape} and condition {y.shape} do not align")
    if g.shape[0] != h.shape[0]:
        raise ValueError(f"knob batch {g.shape} does not match signal batch {h.shape[0]}")
    filt = (
        ad.conv1d(h, layer["W_f"], dilation)
        + ad.conv1x1(y, layer["V_f"])
        + ad.over_time(ad.affine(g, layer["Vc_f"]))
    )
    gate = (
        ad.conv1d(h, layer["W_g"], dilation)
        + ad.conv1x1(y, layer["V_g"])
        + ad.over_time(ad.affine(g, layer["Vc_g"]))
    )
    return ad.tanh(filt) * ad.sigmoid(gate)


def forward_graph(config, p, x, g):
    """Model on tensors: ``p`` name -> Tensor, ``x`` (B, 1, T), ``g`` (B, k) -> (B, 1, T)."""
    if g.shape[-1] != config.knob_count:
        raise ValueError(f"expected {config.knob_count} knobs, got {g.shape[-1]}")
    h = ad.conv1x1(x, p["lift"])
    skip = None
    last = config.layers - 1
    for i, d in enumerate(config.dilations):
        pre = f"layers.{i}."
        layer = {n: p[pre + n] for n in ("W_f", "W_g", "V_f", "V_g", "Vc_f", "Vc_g")}
        z = gated_layer(h, x, g, layer, d)
        if config.use_skip:
            s = ad.conv1x1(z, p[pre + "skip"])
            skip = s if skip is None else skip + s
        if i < last or not config.use_skip:
            r = ad.conv1x1(z, p[pre + "res"])
            h = h + r if config.use_residual else r
    top = skip if config.use_skip else h
    hid = ad.tanh(ad.conv1x1(top, p["head.0.w"]) + p["head.0.b"])
    return ad.conv1x1(hid, p["head.1.w"]) + p["head.1.b"]


def param_tensors(params, requires_grad=False, dtype=None):
    make = ad.leaf if requires_grad else ad.constant
    return {n: make(a, dtype=dtype) for n, a in params.arrays.items()}


def _batch_inputs(x, g, k, dtype):
    xs = x.samples if isinstance(x, AudioSignal) else np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(xs)):
        raise ValueError("input signal contains NaN or Inf")
    g = as_knobs(g, k)
    single = xs.ndim == 1 and g.ndim == 1
    xb = np.atleast_2d(xs)
    gb = np.atleast_2d(g)
    if xb.shape[0] == 1 and gb.shape[0] > 1:
        xb = np.broadcast_to(xb, (gb.shape[0], xb.shape[1]))
    if gb.shape[0] == 1 and xb.shape[0] > 1:
        gb = np.broadcast_to(gb, (xb.shape[0], gb.shape[1]))
    if xb.shape[0] != gb.shape[0]:
        raise ValueError(f"signal batch {xb.shape[0]} vs knob batch {gb.shape[0]}")
    return np.ascontiguousarray(xb[:, None, :], dtype=dtype), np.ascontiguousarray(gb, dtype=dtype), single


def pad_silence(xb, ctx):
    """Prepend ``ctx`` zeros along the last axis."""
    width = [(0, 0)] * (xb.ndim - 1) + [(ctx, 0)]
    return np.pad(xb, width)


def forward(params, x, g, dtype=np.float64):
    """Run the model without building gradients.

    ``x`` is an :class:`AudioSignal` or array of shape (T,) / (B, T); ``g`` is
    (k,) or (B, k). A single signal with a single knob vector returns an
    :class:`AudioSignal` (or 1-D array if ``x`` was an array); batches return
    an array (B, T).

    The signal is treated as preceded by silence: ``rf - 1`` zeros are
    prepended and their outputs dropped, so any output sample equals the
    one computed from a chunk carrying ``rf - 1`` samples of context.
    """
    cfg = params.config
    xb, gb, single = _batch_inputs(x, g, cfg.knob_count, dtype)
    ctx = receptive_field(cfg) - 1
    out = forward_graph(cfg, param_tensors(params, dtype=dtype), ad.constant(pad_silence(xb, ctx)),
                        ad.constant(gb))
    y = out.data[:, 0, ctx:].astype(np.float64, copy=False)
    if single:
        y = y[0]
        if isinstance(x, AudioSignal):
            return AudioSignal(y, x.sample_rate)
    return y
