"""Flat binary formats for checkpoints and adversarial corpora.

Checkpoint layout (all integers little-endian)::

    magic      4 bytes   b"PDCK"
    version    u32       1
    header_len u32
    header     header_len bytes of UTF-8 JSON: {"kind", "config", ...}
    count      u32       number of parameters
    count x {
        name_len u16, name (UTF-8),
        ndim u8, dims u32 * ndim,
        data     float32 * prod(dims)
    }

Corpus layout::

    magic      4 bytes   b"PDAX"
    version    u32       1
    header_len u32
    header     JSON manifest: {"attack", "victim_checksum", "seed", "shape": [C, H, W], ...}
    count      u32
    count x {origin u32, label u32, distortion f32, pixels float32 * C*H*W}
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError

CHECKPOINT_MAGIC = b"PDCK"
CORPUS_MAGIC = b"PDAX"
VERSION = 1


class _Reader:
    def __init__(self, raw, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n, what):
        if self.pos + n > len(self.raw):
            raise ParseError(f"{self.path}: truncated while reading {what}", self.pos)
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _header(reader, magic):
    got = reader.take(4, "magic")
    if got != magic:
        raise ParseError(f"{reader.path}: bad magic {got!r}, expected {magic!r}", 0)
    (version,) = reader.unpack("<I", "version")
    if version != VERSION:
        raise ParseError(f"{reader.path}: unsupported version {version}", 4)
    (length,) = reader.unpack("<I", "header length")
    start = reader.pos
    try:
        return json.loads(reader.take(length, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{reader.path}: malformed header ({exc})", start)


def _pack_header(magic, header):
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    return magic + struct.pack("<II", VERSION, len(blob)) + blob


def write_checkpoint(path, header, params):
    """Write ``params`` (name -> array) under a JSON ``header``."""
    parts = [_pack_header(CHECKPOINT_MAGIC, header), struct.pack("<I", len(params))]
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_checkpoint(path):
    """Return ``(header, {name: float32 array})``."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read(), path)
    header = _header(reader, CHECKPOINT_MAGIC)
    (count,) = reader.unpack("<I", "parameter count")
    params = {}
    for _ in range(count):
        (n,) = reader.unpack("<H", "name length")
        name = reader.take(n, "name").decode("utf-8")
        (ndim,) = reader.unpack("<B", "ndim")
        dims = reader.unpack(f"<{ndim}I", "dims")
        size = int(np.prod(dims)) if ndim else 1
        params[name] = np.frombuffer(reader.take(4 * size, f"data of {name}"), dtype="<f4").reshape(dims).copy()
    if reader.pos != len(reader.raw):
        raise ParseError(f"{path}: trailing bytes", reader.pos)
    return header, params


def save_victim(path, model):
    header = {"kind": model.kind, "config": model.config, "input_shape": list(model.input_shape),
              "num_classes": model.num_classes, "checksum": model.checksum()}
    write_checkpoint(path, header, model.state_dict())


def load_victim(path):
    from .victims import build_victim

    header, params = read_checkpoint(path)
    model = build_victim(header["kind"], tuple(header["input_shape"]), header["num_classes"], header["config"])
    model.load_state_dict(params)
    return model.freeze()


def save_defender(path, model, extra=None):
    header = {"kind": "defender", "config": model.config.to_dict(), "policy": model.config.policy,
              "init": model.config.init}
    header.update(extra or {})
    write_checkpoint(path, header, model.state_dict())


def load_defender(path):
    from .defender import DefenderConfig, DefenderModel

    header, params = read_checkpoint(path)
    if header.get("kind") != "defender":
        raise ParseError(f"{path}: not a defender checkpoint (kind={header.get('kind')!r})", 12)
    model = DefenderModel(DefenderConfig(**header["config"]))
    model.load_state_dict(params)
    model.header = header
    return model


# ---------------------------------------------------------------- corpora


@dataclass
class Corpus:
    manifest: dict
    origin: np.ndarray
    labels: np.ndarray
    distortion: np.ndarray
    images: np.ndarray
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)


def write_corpus(path, corpus):
    shape = list(corpus.images.shape[1:])
    manifest = dict(corpus.manifest, shape=shape)
    parts = [_pack_header(CORPUS_MAGIC, manifest), struct.pack("<I", len(corpus))]
    for o, y, d, img in zip(corpus.origin, corpus.labels, corpus.distortion, corpus.images):
        parts.append(struct.pack("<IIf", int(o), int(y), float(d)))
        parts.append(np.ascontiguousarray(img, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_corpus(path):
    with open(path, "rb") as fh:
        reader = _Reader(fh.read(), path)
    manifest = _header(reader, CORPUS_MAGIC)
    shape = tuple(manifest["shape"])
    size = int(np.prod(shape))
    (count,) = reader.unpack("<I", "record count")
    origin = np.empty(count, dtype=np.int64)
    labels = np.empty(count, dtype=np.int64)
    distortion = np.empty(count, dtype=np.float32)
    images = np.empty((count, *shape), dtype=np.float32)
    for i in range(count):
        origin[i], labels[i], distortion[i] = reader.unpack("<IIf", f"record {i}")
        images[i] = np.frombuffer(reader.take(4 * size, f"pixels of record {i}"), dtype="<f4").reshape(shape)
    if reader.pos != len(reader.raw):
        raise ParseError(f"{path}: trailing bytes", reader.pos)
    return Corpus(manifest, origin, labels, distortion, images)
