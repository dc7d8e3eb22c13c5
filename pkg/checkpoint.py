"""Bit-exact binary checkpoints of model parameters and optimizer moments.

Layout (little-endian):

    "ADJC" | version u32
    then per tensor: name length u16 | UTF-8 name | rank u8 | dims u32 x rank | float64 payload

Model parameters are stored under their own names, the architecture as
`meta/arch`, and optimizer state as `opt/step`, `opt/m/<name>`, `opt/v/<name>`.
"""

import logging
from pathlib import Path

import numpy as np

from errors import FormatError, ShapeError
from models import ModelConfig, RewardModel
from optim import OptimizerState

logger = logging.getLogger(__name__)

MAGIC = b"ADJC"
VERSION = 1


def write_tensors(path, tensors):
    """Write an ordered mapping name -> float64 array."""

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(np.array([VERSION], dtype="<u4").tobytes())
        for name, values in tensors.items():
            encoded = name.encode("utf-8")
            values = np.asarray(values, dtype="<f8")
            f.write(np.array([len(encoded)], dtype="<u2").tobytes())
            f.write(encoded)
            f.write(np.array([values.ndim], dtype="u1").tobytes())
            f.write(np.array(values.shape, dtype="<u4").tobytes())
            f.write(np.ascontiguousarray(values).tobytes())
    tmp.replace(path)


def read_tensors(path):
    """Read every record; truncation anywhere raises FormatError with its offset."""

    buf = Path(path).read_bytes()

    def need(offset, size, what):
        if offset + size > len(buf):
            raise FormatError(f"truncated {what}", offset=offset)

    need(0, 8, "header")
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", offset=0)
    version = int(np.frombuffer(buf, dtype="<u4", count=1, offset=4)[0])
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)

    tensors = {}
    offset = 8
    while offset < len(buf):
        start = offset
        need(offset, 2, "name length")
        n = int(np.frombuffer(buf, dtype="<u2", count=1, offset=offset)[0])
        offset += 2
        need(offset, n + 1, "name")
        try:
            name = buf[offset:offset + n].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("name is not UTF-8", offset=offset) from None
        offset += n
        rank = buf[offset]
        offset += 1
        need(offset, 4 * rank, f"dims of {name!r}")
        dims = tuple(int(x) for x in np.frombuffer(buf, dtype="<u4", count=rank, offset=offset))
        offset += 4 * rank
        count = int(np.prod(dims, dtype=np.int64))
        need(offset, 8 * count, f"payload of {name!r}")
        values = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(dims)
        offset += 8 * count
        if name in tensors:
            raise FormatError(f"duplicate tensor {name!r}", offset=start)
        tensors[name] = values.astype(np.float64)
    return tensors


def save_checkpoint(model, state, path):
    tensors = {"meta/arch": model.config.to_arch()}
    params = model.parameters()
    tensors.update({name: p.data for name, p in params.items()})
    if state is not None:
        tensors["opt/step"] = np.array([state.step], dtype=np.float64)
        tensors.update({f"opt/m/{name}": state.m[name] for name in params})
        tensors.update({f"opt/v/{name}": state.v[name] for name in params})
        tensors["opt/running_steps"] = np.array([state.running_steps], dtype=np.float64)
        tensors.update({f"opt/running/{key}": total for key, total in state.running.items()})
    write_tensors(path, tensors)
    logger.info("saved checkpoint %s", path)


def load_checkpoint(path, expect=None):
    """Rebuild (model, optimizer state) from a checkpoint.

    With `expect` (a ModelConfig) the stored architecture must match it.
    Every shape is checked before any value is assigned.
    """

    tensors = read_tensors(path)
    if "meta/arch" not in tensors:
        raise FormatError(f"{path}: no meta/arch record")
    config = ModelConfig.from_arch(tensors["meta/arch"])
    if expect is not None and config.to_arch().tolist() != expect.to_arch().tolist():
        raise ShapeError("load_checkpoint", [tuple(expect.to_arch()), tuple(config.to_arch())],
                         "architecture mismatch")

    model = RewardModel.initialize(config, seed=0)
    params = model.parameters()
    stored = {name for name in tensors if not name.startswith(("meta/", "opt/"))}
    if stored != set(params):
        missing = sorted(set(params) - stored)
        extra = sorted(stored - set(params))
        raise FormatError(f"{path}: parameter set mismatch (missing {missing[:3]}, extra {extra[:3]})")
    for name, param in params.items():
        if tensors[name].shape != param.dims:
            raise ShapeError("load_checkpoint", [param.dims, tensors[name].shape], name)

    state = None
    if "opt/step" in tensors:
        state = OptimizerState(step=int(tensors["opt/step"][0]))
        for name, param in params.items():
            for kind, buffers in (("m", state.m), ("v", state.v)):
                key = f"opt/{kind}/{name}"
                if key not in tensors or tensors[key].shape != param.dims:
                    raise FormatError(f"{path}: missing or misshapen {key}")
                buffers[name] = tensors[key].copy()
        if "opt/running_steps" in tensors:
            state.running_steps = int(tensors["opt/running_steps"][0])
            state.running = {name[len("opt/running/"):]: tensors[name].copy()
                             for name in tensors if name.startswith("opt/running/")}

    for name, param in params.items():
        param.data[...] = tensors[name]
    logger.info("loaded checkpoint %s (step %s)", path, state.step if state else "-")
    return model, state
