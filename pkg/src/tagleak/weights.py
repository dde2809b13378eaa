"""Weight initialisation and the GLKW binary weight-file format.

Random weights come from numpy's Philox-4x64-10 counter-based bit generator,
keyed with ``SeedSequence(seed)`` and consumed tensor by tensor in store
order, so a (config, seed) pair always yields the same weights.

GLKW layout (all integers little-endian)::

    b"GLKW"  u8 version (=1)
    repeated until end of file:
        u32 name_len, name (UTF-8), u32 layer, u32 rank,
        u64 extent * rank, float64 element * prod(extents)  (IEEE-754 LE)
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from tagleak.autodiff import NonFiniteError, Tensor
from tagleak.model import ConfigError, ModelConfig, Param, ParameterStore, parameter_layout

MAGIC = b"GLKW"
VERSION = 1


class WeightFileError(ValueError):
    pass


@dataclass(frozen=True)
class InitSpec:
    kind: str = "normal"  # normal | uniform | file
    mean: float = 0.0
    std: float = 0.02
    range: float = 0.02
    path: Optional[str] = None
    seed: int = 0

    def __post_init__(self):
        if self.kind == "normal":
            if not self.std > 0:
                raise ConfigError(f"normal init needs std > 0, got {self.std}")
        elif self.kind == "uniform":
            if not self.range > 0:
                raise ConfigError(f"uniform init needs range > 0, got {self.range}")
        elif self.kind == "file":
            if not self.path:
                raise ConfigError("file init needs a path")
        else:
            raise ConfigError(f"unknown init kind {self.kind!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "InitSpec":
        return cls(**d)


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Philox generator for ``seed``; distinct ``stream`` values give independent sequences."""
    seq = np.random.SeedSequence(seed, spawn_key=(stream,)) if stream else np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(seq))


def _is_fixed(name: str) -> bool:
    # layer-norm gains start at one and every bias at zero
    return name.endswith(".gain") or name.endswith(".bias")


def init_weights(config: ModelConfig, spec: InitSpec) -> ParameterStore:
    if spec.kind == "file":
        return load_weights(spec.path, config)
    rng = make_rng(spec.seed)
    store = ParameterStore()
    for name, layer, shape in parameter_layout(config):
        if name.endswith(".gain"):
            arr = np.ones(shape)
        elif _is_fixed(name):
            arr = np.zeros(shape)
        elif spec.kind == "normal":
            arr = rng.normal(spec.mean, spec.std, size=shape)
        else:
            arr = rng.uniform(-spec.range, spec.range, size=shape)
        store.add(name, layer, Tensor(arr, requires_grad=True))
    return store


def save_weights(store: ParameterStore, path) -> None:
    chunks = [MAGIC, struct.pack("<B", VERSION)]
    for p in store:
        name = p.name.encode("utf-8")
        data = np.asarray(p.tensor.data, dtype="<f8")
        chunks.append(struct.pack("<I", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<II", p.layer, data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        chunks.append(data.tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise WeightFileError(f"truncated weight file while reading {what} at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    @property
    def done(self) -> bool:
        return self.pos >= len(self.buf)


def load_weights(path, config: ModelConfig | None = None) -> ParameterStore:
    """Read a GLKW file; with ``config`` the tensors are checked against its layout."""
    reader = _Reader(Path(path).read_bytes())
    if reader.take(4, "magic") != MAGIC:
        raise WeightFileError(f"{path}: not a GLKW weight file")
    (version,) = reader.unpack("<B", "version")
    if version != VERSION:
        raise WeightFileError(f"{path}: unsupported GLKW version {version}")
    params = []
    while not reader.done:
        (name_len,) = reader.unpack("<I", "name length")
        try:
            name = reader.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightFileError(f"{path}: tensor name is not UTF-8") from exc
        layer, rank = reader.unpack("<II", f"header of {name!r}")
        shape = reader.unpack(f"<{rank}Q", f"extents of {name!r}")
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        raw = reader.take(8 * count, f"elements of {name!r}")
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        try:
            params.append(Param(name, layer, Tensor(arr, requires_grad=True)))
        except NonFiniteError:
            raise WeightFileError(f"{path}: tensor {name!r} holds non-finite values") from None
    if not params:
        raise WeightFileError(f"{path}: no tensors after the header")
    try:
        store = ParameterStore(params)
    except ValueError as exc:
        raise WeightFileError(f"{path}: {exc}") from exc
    if config is not None:
        try:
            store.check_against(config)
        except ConfigError as exc:
            raise WeightFileError(f"{path}: {exc}") from exc
    return store
