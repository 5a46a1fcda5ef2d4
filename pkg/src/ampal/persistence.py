"""WAV files, dataset directories, checkpoints and JSON-lines run logs."""

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .model import AudioSignal, ModelConfig, ModelParameters

CHECKPOINT_MAGIC = b"AMPALCKPT"
CHECKPOINT_VERSION = 1

_PCM, _FLOAT, _EXTENSIBLE = 1, 3, 0xFFFE


class WavError(ValueError):
    pass


class DatasetError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# -- WAV -----------------------------------------------------------------------

def write_wav(path, signal, fmt="float32"):
    """Write a mono RIFF/WAVE file as ``pcm16``, ``float32`` or ``float64``."""
    x = signal.samples
    if fmt == "pcm16":
        data = np.round(np.clip(x, -1.0, 1.0) * 32767.0).astype("<i2")
        tag, bits = _PCM, 16
    elif fmt == "float32":
        data, tag, bits = x.astype("<f4"), _FLOAT, 32
    elif fmt == "float64":
        data, tag, bits = x.astype("<f8"), _FLOAT, 64
    else:
        raise ValueError(f"unsupported WAV format {fmt!r}")
    payload = data.tobytes()
    block = bits // 8
    fmt_chunk = struct.pack("<HHIIHH", tag, 1, signal.sample_rate,
                            signal.sample_rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt_chunk)) + fmt_chunk
    body += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) % 2:
        body += b"\x00"
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


def read_wav(path):
    """Read a mono PCM16 / float32 / float64 WAV into an :class:`AudioSignal`."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavError(f"{path}: not a RIFF/WAVE file")
    pos, fmt, data = 12, None, None
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        (size,) = struct.unpack("<I", raw[pos + 4:pos + 8])
        start, end = pos + 8, pos + 8 + size
        if end > len(raw):
            raise WavError(
                f"{path}: truncated {cid.decode(errors='replace')!r} chunk "
                f"({size} bytes declared, {len(raw) - start} present)"
            )
        if cid == b"fmt ":
            if size < 16:
                raise WavError(f"{path}: malformed fmt chunk ({size} bytes)")
            fmt = struct.unpack("<HHIIHH", raw[start:start + 16])
            if fmt[0] == _EXTENSIBLE and size >= 26:
                (sub,) = struct.unpack("<H", raw[start + 24:start + 26])
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            data = raw[start:end]
        pos = end + (size % 2)
    if fmt is None:
        raise WavError(f"{path}: missing fmt chunk")
    if data is None:
        raise WavError(f"{path}: missing data chunk")
    tag, channels, rate, _, block, bits = fmt
    if channels != 1:
        raise WavError(f"{path}: expected a mono file, got {channels} channels")
    if (tag, bits) == (_PCM, 16):
        samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32767.0
    elif (tag, bits) == (_FLOAT, 32):
        samples = np.frombuffer(data, dtype="<f4").astype(np.float64)
    elif (tag, bits) == (_FLOAT, 64):
        samples = np.frombuffer(data, dtype="<f8").astype(np.float64)
    else:
        raise WavError(f"{path}: unsupported sample format (tag {tag}, {bits} bits)")
    if len(data) % block:
        raise WavError(f"{path}: data size {len(data)} is not a multiple of the frame size {block}")
    return AudioSignal(samples, rate)


# -- datasets ------------------------------------------------------------------

def _sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def format_knobs(g):
    return " ".join(f"{v:.17g}" for v in g) + "\n"


def save_dataset(dataset, directory):
    """Write ``x.wav``, ``pairs/<i>.wav``, ``pairs/<i>.g`` and a ``manifest``.

    Signals are stored as 64-bit float WAV and knob values with 17
    significant digits, so loading reproduces the dataset exactly.
    """
    d = Path(directory)
    (d / "pairs").mkdir(parents=True, exist_ok=True)
    write_wav(d / "x.wav", dataset.x, fmt="float64")
    lines = [f"x.wav {_sha(d / 'x.wav')}"]
    for i, (g, wet) in enumerate(dataset.pairs):
        wav, gf = d / "pairs" / f"{i}.wav", d / "pairs" / f"{i}.g"
        write_wav(wav, wet, fmt="float64")
        gf.write_text(format_knobs(g))
        lines.append(f"{i} {_sha(wav)} {_sha(gf)}")
    (d / "manifest").write_text(f"pairs {len(dataset.pairs)}\n" + "\n".join(lines) + "\n")


def load_dataset(directory):
    from .training import LabeledDataset

    d = Path(directory)
    man = d / "manifest"
    if not man.exists():
        raise DatasetError(f"{d}: missing manifest")
    lines = man.read_text().splitlines()
    try:
        n = int(lines[0].split()[1])
        _, x_hash = lines[1].split()
    except (IndexError, ValueError) as exc:
        raise DatasetError(f"{man}: malformed header") from exc
    if not (d / "x.wav").exists() or _sha(d / "x.wav") != x_hash:
        raise DatasetError(f"{d}: x.wav missing or does not match manifest")
    ds = LabeledDataset(read_wav(d / "x.wav"))
    entries = lines[2:]
    if len(entries) != n:
        raise DatasetError(f"{man}: declares {n} pairs but lists {len(entries)}")
    for expected, line in enumerate(entries):
        parts = line.split()
        if len(parts) != 3 or parts[0] != str(expected):
            raise DatasetError(f"{man}: bad entry for pair {expected}: {line!r}")
        i = expected
        wav, gf = d / "pairs" / f"{i}.wav", d / "pairs" / f"{i}.g"
        for f, h in ((wav, parts[1]), (gf, parts[2])):
            if not f.exists():
                raise DatasetError(f"{d}: pair {i}: missing {f.name}")
            if _sha(f) != h:
                raise DatasetError(f"{d}: pair {i}: {f.name} does not match manifest hash")
        g = np.array([float(v) for v in gf.read_text().split()])
        ds.add(g, read_wav(wav))
    return ds


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, params, metadata=None):
    """Text header line (JSON) followed by length-prefixed float64 sections."""
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": params.config.to_dict(),
        "metadata": metadata or {},
        "sections": [{"name": n, "shape": list(a.shape)} for n, a in params.arrays.items()],
    }
    out = bytearray(CHECKPOINT_MAGIC + b" " + json.dumps(header, sort_keys=True).encode() + b"\n")
    for name, arr in params.arrays.items():
        nb = name.encode()
        payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        out += struct.pack("<I", len(nb)) + nb + struct.pack("<Q", len(payload)) + payload
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path):
    """Return ``(ModelParameters, metadata)``; rejects version or shape mismatches."""
    from .model import parameter_shapes

    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if not raw.startswith(CHECKPOINT_MAGIC + b" ") or nl < 0:
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        header = json.loads(raw[len(CHECKPOINT_MAGIC) + 1:nl])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    version = header.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {version}, this build reads version {CHECKPOINT_VERSION}"
        )
    config = ModelConfig.from_dict(header["model_config"])
    expected = {n: list(s) for n, (s, _) in parameter_shapes(config).items()}
    pos, arrays = nl + 1, {}
    for sec in header["sections"]:
        name, shape = sec["name"], list(sec["shape"])
        if expected.get(name) != shape:
            raise CheckpointError(
                f"{path}: section {name!r} has shape {shape}, config requires {expected.get(name)}"
            )
        try:
            (ln,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            stored = raw[pos:pos + ln].decode()
            pos += ln
            (nbytes,) = struct.unpack_from("<Q", raw, pos)
            pos += 8
        except struct.error as exc:
            raise CheckpointError(f"{path}: truncated at section {name!r}") from exc
        if stored != name:
            raise CheckpointError(f"{path}: expected section {name!r}, found {stored!r}")
        if nbytes != 8 * int(np.prod(shape)) or pos + nbytes > len(raw):
            raise CheckpointError(f"{path}: section {name!r} size does not match shape {shape}")
        arrays[name] = np.frombuffer(raw[pos:pos + nbytes], dtype="<f8").reshape(shape).astype(np.float64)
        pos += nbytes
    if set(arrays) != set(expected):
        raise CheckpointError(f"{path}: missing sections {sorted(set(expected) - set(arrays))}")
    ordered = {n: arrays[n] for n in expected}
    return ModelParameters(config, ordered), header.get("metadata", {})


# -- run logs ------------------------------------------------------------------

class RunLog:
    """Append-only JSON-lines event log, optionally mirrored to a file."""

    def __init__(self, path=None):
        self.records = []
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def append(self, event, **fields):
        rec = {"event": event, **fields}
        self.records.append(rec)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return rec

    def events(self, name):
        return [r for r in self.records if r["event"] == name]

    @classmethod
    def read(cls, path):
        log = cls()
        with open(path) as fh:
            log.records = [json.loads(line) for line in fh if line.strip()]
        log.path = None
        return log
