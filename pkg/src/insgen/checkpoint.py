"""Versioned binary checkpoints of the full training state.

Layout (little-endian)::

    b"INSGENCK" | u32 version | u32 header length | header JSON
    u32 section count | sections: u16 name length, name, u8 ndim, u32 dims..., f64 data
    b"END!" | u32 CRC32 of every preceding byte

The header carries the config, its hash, the step, a shape manifest and the
non-tensor state (RNG states, augmentation controller, optimizer counters).
"""
from __future__ import annotations

import json
import struct
import zlib
from collections import deque
from pathlib import Path

import numpy as np

from .augment import AdaState
from .config import RunConfig, from_dict

MAGIC = b"INSGENCK"
TRAILER = b"END!"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


def checkpoint_path(out_dir, step: int) -> Path:
    return Path(out_dir) / f"ckpt_{step:06d}.insgen"


def latest_checkpoint(out_dir) -> Path | None:
    found = sorted(Path(out_dir).glob("ckpt_*.insgen"))
    return found[-1] if found else None


def _rng_state(gen: np.random.Generator) -> dict:
    def plain(v):
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        if isinstance(v, np.ndarray):
            return [int(x) for x in v]
        if isinstance(v, np.integer):
            return int(v)
        return v
    return plain(gen.bit_generator.state)


def _restore_rng(state: dict) -> np.random.Generator:
    bitgen = np.random.Philox()
    st = json.loads(json.dumps(state))
    st["state"]["counter"] = np.array(st["state"]["counter"], dtype=np.uint64)
    st["state"]["key"] = np.array(st["state"]["key"], dtype=np.uint64)
    st["buffer"] = np.array(st["buffer"], dtype=np.uint64)
    bitgen.state = st
    return np.random.Generator(bitgen)


def _tensors(state) -> list[tuple[str, np.ndarray]]:
    out = []
    for prefix, bundle in (("d", state.d), ("dm", state.d_momentum)):
        out += [(f"{prefix}.{n}", p.data) for n, p in bundle.named_parameters()]
    for prefix, net in (("g", state.g), ("g_ema", state.g_ema)):
        out += [(f"{prefix}.{n}", p.data) for n, p in net.named_parameters()]
    for prefix, opt in (("adam_d", state.opt_d), ("adam_g", state.opt_g)):
        out += [(f"{prefix}.m.{i}", m) for i, m in enumerate(opt.m)]
        out += [(f"{prefix}.v.{i}", v) for i, v in enumerate(opt.v)]
    out.append(("queue_real", state.queue_real.state()))
    out.append(("queue_fake", state.queue_fake.state()))
    return out


def _encode(state, cfg: RunConfig) -> bytes:
    tensors = _tensors(state)
    header = {
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "step": state.step,
        "d_steps": state.d_steps,
        "adam_t": [state.opt_d.t, state.opt_g.t],
        "ada": {"p": state.ada.p, "window": list(state.ada.window),
                "window_len": state.ada.window.maxlen},
        "rngs": {k: _rng_state(g) for k, g in sorted(state.rngs.items())},
        "last": state.last,
        "manifest": [[name, list(arr.shape)] for name, arr in tensors],
    }
    head = json.dumps(header, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(head)), head,
              struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(chunks)
    return body + TRAILER + struct.pack("<I", zlib.crc32(body))


def checkpoint_save(state, cfg: RunConfig, path):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(_encode(state, cfg))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"checkpoint truncated while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint(path) -> tuple[dict, dict]:
    """Parse and integrity-check a checkpoint file into (header, tensors)."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    r = _Reader(buf)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError(f"{path}: not an insgen checkpoint")
    version, head_len = r.unpack("<II", "header")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, "
                                     f"this build reads {FORMAT_VERSION}")
    try:
        header = json.loads(r.take(head_len, "header").decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointTruncatedError(f"{path}: header is damaged") from None
    (count,) = r.unpack("<I", "section count")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "section name")
        name = r.take(nlen, "section name").decode(errors="replace")
        (ndim,) = r.unpack("<B", f"section {name}")
        shape = r.unpack(f"<{ndim}I", f"section {name}")
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(8 * n, f"section {name}"), dtype="<f8")
        tensors[name] = data.reshape(shape).astype(np.float64)
    end = r.pos
    trailer = r.take(len(TRAILER) + 4, "trailer")
    if trailer[:4] != TRAILER or r.pos != len(buf):
        raise CheckpointTruncatedError(f"{path}: trailing bytes damaged or missing")
    (crc,) = struct.unpack("<I", trailer[4:])
    if crc != zlib.crc32(buf[:end]):
        raise CheckpointTruncatedError(f"{path}: checksum mismatch, file is damaged")
    manifest = {name: tuple(shape) for name, shape in header["manifest"]}
    for name, arr in tensors.items():
        if manifest.get(name) != arr.shape:
            raise CheckpointShapeError(f"{path}: section {name} has shape {arr.shape}, "
                                       f"manifest says {manifest.get(name)}")
    return header, tensors


def checkpoint_load(path, cfg: RunConfig | None = None, dataset=None):
    """Rebuild a TrainState; with ``cfg`` the stored shapes must match it."""
    from .trainer import build_dataset, init_state

    header, tensors = read_checkpoint(path)
    stored_cfg = from_dict(header["config"])
    cfg = stored_cfg if cfg is None else cfg
    if dataset is None:
        dataset = build_dataset(cfg)
    state = init_state(cfg, dataset)
    template = dict(_tensors(state))
    missing = sorted(set(template) - set(tensors))
    if missing:
        raise CheckpointShapeError(f"{path}: missing tensor {missing[0]}")
    for name, arr in tensors.items():
        if name not in template:
            raise CheckpointShapeError(f"{path}: unexpected tensor {name}")
        want = template[name].shape
        if name.startswith("queue_"):
            if arr.ndim != 2 or arr.shape[1] != want[1]:
                raise CheckpointShapeError(f"{path}: tensor {name} has shape {arr.shape}, "
                                           f"expected width {want[1]}")
        elif arr.shape != want:
            raise CheckpointShapeError(f"{path}: tensor {name} has shape {arr.shape}, "
                                       f"expected {want}")

    for prefix, bundle in (("d", state.d), ("dm", state.d_momentum)):
        for n, p in bundle.named_parameters():
            p.data = tensors[f"{prefix}.{n}"].copy()
    for prefix, net in (("g", state.g), ("g_ema", state.g_ema)):
        for n, p in net.named_parameters():
            p.data = tensors[f"{prefix}.{n}"].copy()
    for prefix, opt, t in (("adam_d", state.opt_d, header["adam_t"][0]),
                           ("adam_g", state.opt_g, header["adam_t"][1])):
        opt.m = [tensors[f"{prefix}.m.{i}"].copy() for i in range(len(opt.m))]
        opt.v = [tensors[f"{prefix}.v.{i}"].copy() for i in range(len(opt.v))]
        opt.t = t
    state.queue_real.load(tensors["queue_real"])
    state.queue_fake.load(tensors["queue_fake"])
    ada = header["ada"]
    state.ada = AdaState(ada["p"], state.ada.target, state.ada.step_size, state.ada.p_max,
                         deque(ada["window"], maxlen=ada["window_len"]))
    state.rngs = {k: _restore_rng(v) for k, v in header["rngs"].items()}
    state.step = header["step"]
    state.d_steps = header["d_steps"]
    state.last = header["last"]
    return state
