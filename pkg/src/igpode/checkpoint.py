"""Binary checkpoints of a training run.

Layout, little-endian throughout::

    magic "IGPC" | version u32
    kind, config JSON, RNG state JSON   (u32 byte length + UTF-8 each)
    num_objects u32 | obs_dim u32 | round u32 | iteration u32
    adam: step u32 | lr, beta1, beta2, eps f64
    tensor count u32, then per tensor:
        name (u16 byte length + UTF-8) | ndim u32 | shape u32 * ndim | f64 payload

Parameters are stored under their own names, Adam moments under
``adam.m/<name>`` and ``adam.v/<name>``.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from igpode import diffmath as dm
from igpode.adam import AdamState
from igpode.config import ExperimentConfig
from igpode.errors import FormatError
from igpode.inference import TrainState
from igpode.model import LatentODE
from igpode.params import ParamStore

logger = logging.getLogger(__name__)

MAGIC = b"IGPC"
VERSION = 1
MOMENT_PREFIXES = ("adam.m/", "adam.v/")


@dataclass
class Checkpoint:
    kind: str
    config: ExperimentConfig
    num_objects: int
    obs_dim: int
    round_index: int
    iteration: int
    params: dict[str, np.ndarray]
    adam: AdamState
    rng_state: dict[str, Any]

    @classmethod
    def from_state(cls, state: TrainState, config: ExperimentConfig) -> Checkpoint:
        return cls(
            kind=state.model.kind.value,
            config=config.with_train(substeps=state.model.substeps),
            num_objects=state.model.num_objects,
            obs_dim=state.model.obs_dim,
            round_index=state.round_index,
            iteration=state.iteration,
            params={k: v.copy() for k, v in state.params.as_dict().items()},
            adam=state.adam,
            rng_state=state.rng.bit_generator.state,
        )

    def model(self) -> LatentODE:
        return LatentODE.build(
            self.config.model,
            self.num_objects,
            self.obs_dim,
            self.config.train.substeps or 1,
        )

    def param_store(self) -> ParamStore:
        store = ParamStore()
        for name, value in self.params.items():
            store.register(name, value)
        return store

    def rng(self) -> np.random.Generator:
        rng = dm.make_rng()
        rng.bit_generator.state = self.rng_state
        return rng

    def to_state(self) -> TrainState:
        return TrainState(
            model=self.model(),
            params=self.param_store(),
            adam=self.adam,
            rng=self.rng(),
            round_index=self.round_index,
            iteration=self.iteration,
        )


# --------------------------------------------------------------------------------
# Encoding
# --------------------------------------------------------------------------------


def _text(value: str) -> bytes:
    raw = value.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _tensor(name: str, value: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    value = np.asarray(value, dtype=np.float64)
    return (
        struct.pack("<H", len(raw))
        + raw
        + struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape)
        + np.ascontiguousarray(value, dtype="<f8").tobytes()
    )


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> None:
    tensors = dict(checkpoint.params)
    for name in checkpoint.params:
        if name in checkpoint.adam.m:
            tensors[f"adam.m/{name}"] = checkpoint.adam.m[name]
            tensors[f"adam.v/{name}"] = checkpoint.adam.v[name]
    adam = checkpoint.adam
    parts = [
        MAGIC,
        struct.pack("<I", VERSION),
        _text(checkpoint.kind),
        _text(json.dumps(checkpoint.config.to_dict(), sort_keys=True)),
        _text(json.dumps(checkpoint.rng_state)),
        struct.pack(
            "<IIII",
            checkpoint.num_objects,
            checkpoint.obs_dim,
            checkpoint.round_index,
            checkpoint.iteration,
        ),
        struct.pack("<Idddd", adam.step, adam.lr, adam.beta1, adam.beta2, adam.eps),
        struct.pack("<I", len(tensors)),
    ]
    parts += [_tensor(name, value) for name, value in tensors.items()]
    path = Path(path)
    path.write_bytes(b"".join(parts))
    logger.info(f"wrote checkpoint {path} (round {checkpoint.round_index})")


# --------------------------------------------------------------------------------
# Decoding
# --------------------------------------------------------------------------------


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def unpack(self, fmt: str) -> tuple:
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.data):
            raise FormatError("checkpoint is truncated", self.offset)
        try:
            values = struct.unpack_from(fmt, self.data, self.offset)
        except struct.error as e:
            raise FormatError(f"cannot decode field: {e}", self.offset) from e
        self.offset += size
        return values

    def raw(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise FormatError("checkpoint is truncated", self.offset)
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def text(self, fmt: str = "<I") -> str:
        (size,) = self.unpack(fmt)
        start = self.offset
        try:
            return self.raw(size).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError("invalid UTF-8 text", start) from e

    def json(self) -> Any:
        start = self.offset
        try:
            return json.loads(self.text())
        except json.JSONDecodeError as e:
            raise FormatError(f"invalid JSON: {e}", start) from e

    def tensor(self) -> tuple[str, np.ndarray]:
        name = self.text("<H")
        (ndim,) = self.unpack("<I")
        shape = self.unpack(f"<{ndim}I")
        count = int(np.prod(shape))
        payload = self.raw(8 * count)
        value = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
        return name, value


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Reads a checkpoint; parameters come back bit-exactly.

    :raises FormatError: bad magic, unsupported version, truncation or
        trailing bytes
    """
    reader = _Reader(Path(path).read_bytes())
    magic = reader.raw(4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    kind = reader.text()
    config = ExperimentConfig.from_dict(reader.json())
    rng_state = reader.json()
    num_objects, obs_dim, round_index, iteration = reader.unpack("<IIII")
    step, lr, beta1, beta2, eps = reader.unpack("<Idddd")
    (count,) = reader.unpack("<I")

    params, moments = {}, ({}, {})
    for _ in range(count):
        name, value = reader.tensor()
        for slot, prefix in enumerate(MOMENT_PREFIXES):
            if name.startswith(prefix):
                moments[slot][name[len(prefix) :]] = value
                break
        else:
            params[name] = value
    if reader.offset != len(reader.data):
        raise FormatError("trailing bytes after the last tensor", reader.offset)

    adam = AdamState(lr, beta1, beta2, eps, step, moments[0], moments[1])
    return Checkpoint(
        kind,
        config,
        num_objects,
        obs_dim,
        round_index,
        iteration,
        params,
        adam,
        rng_state,
    )
