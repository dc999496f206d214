"""
Checkpoint files, all integers little-endian:

    b"TASC" | u16 version | u32 header length | header JSON (utf-8)
    then per layer, in order, per tensor: u16 name length | name | u8 ndim | u32 dims... | f8 data

The header holds the network spec and the dropout RNG state. Tensor groups per layer are
params, then buffers, then Adagrad accumulators, each sorted by name.
"""

import io
import json
import struct
from pathlib import Path

import numpy as np
from loguru import logger

from tascforge.errors import CheckpointError
from tascforge.nn.network import ModelState, NetworkSpec, Params

MAGIC = b"TASC"
FORMAT_VERSION = 1
_GROUPS = ("params", "buffers", "accumulators")


def _write_tensor(out: io.BufferedIOBase, name: str, value: np.ndarray):
    encoded = name.encode()
    out.write(struct.pack("<H", len(encoded)))
    out.write(encoded)
    out.write(struct.pack("<B", value.ndim))
    out.write(struct.pack(f"<{value.ndim}I", *value.shape))
    out.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def _read_exact(f: io.BufferedIOBase, size: int) -> bytes:
    data = f.read(size)
    if len(data) != size:
        raise CheckpointError(f"checkpoint truncated: wanted {size} bytes, got {len(data)}")
    return data


def _read_tensor(f: io.BufferedIOBase) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(f, 2))
    name = _read_exact(f, name_len).decode()
    (ndim,) = struct.unpack("<B", _read_exact(f, 1))
    shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim))
    count = int(np.prod(shape, dtype=np.int64))
    data = np.frombuffer(_read_exact(f, 8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    return name, data


def _rng_from_state(state: dict) -> np.random.Generator:
    try:
        bit_generator = getattr(np.random, state["bit_generator"])()
        bit_generator.state = state
    except (AttributeError, KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"unusable rng state in checkpoint: {e}") from e
    return np.random.Generator(bit_generator)


def save_checkpoint(path: Path, model: ModelState, spec: NetworkSpec):
    header = json.dumps(
        {
            "spec": spec.to_dict(),
            "rng": model.rng.bit_generator.state,
            "tensors": [
                {group: sorted(getattr(model, group)[i]) for group in _GROUPS} for i in range(len(spec.layers))
            ],
        }
    ).encode()

    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as out:
        out.write(MAGIC)
        out.write(struct.pack("<HI", FORMAT_VERSION, len(header)))
        out.write(header)
        for i in range(len(spec.layers)):
            for group in _GROUPS:
                tensors: Params = getattr(model, group)[i]
                for name in sorted(tensors):
                    _write_tensor(out, name, tensors[name])

    logger.debug(f"wrote checkpoint {path} ({len(spec.layers)} layers)")


def load_checkpoint(path: Path) -> tuple[ModelState, NetworkSpec]:
    try:
        f = path.open("rb")
    except OSError as e:
        raise CheckpointError(f"cannot open checkpoint {path}: {e}") from e

    with f:
        if _read_exact(f, 4) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        version, header_len = struct.unpack("<HI", _read_exact(f, 6))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path} has format version {version}, expected {FORMAT_VERSION}")

        try:
            header = json.loads(_read_exact(f, header_len))
            spec = NetworkSpec.from_dict(header["spec"])
        except (ValueError, KeyError, TypeError) as e:
            raise CheckpointError(f"{path} has an unreadable header: {e}") from e

        layout = header.get("tensors", [])
        if len(layout) != len(spec.layers):
            raise CheckpointError(f"{path} lists tensors for {len(layout)} layers, spec has {len(spec.layers)}")

        groups: dict[str, list[Params]] = {group: [] for group in _GROUPS}
        for entry in layout:
            for group in _GROUPS:
                tensors: Params = {}
                for expected in entry[group]:
                    name, value = _read_tensor(f)
                    if name != expected:
                        raise CheckpointError(f"{path}: expected tensor {expected!r}, found {name!r}")
                    tensors[name] = value
                groups[group].append(tensors)

        if f.read(1):
            raise CheckpointError(f"{path} has trailing bytes")

    model = ModelState(groups["params"], groups["buffers"], groups["accumulators"], _rng_from_state(header["rng"]))
    logger.debug(f"loaded checkpoint {path}")
    return model, spec
