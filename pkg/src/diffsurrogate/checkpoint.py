"""Binary checkpoints of network parameters and optimizer state.

Layout (little-endian)::

    b"EDCK1" | u16 version | u32 header length | header (UTF-8 JSON) | u64 header checksum
    per block listed in the header: raw array bytes | u64 block checksum

Checksums are blake2b-64. The header carries the NetConfig, training
metadata and the (name, dtype, shape) of each block in order.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ChecksumError, ConfigError, FormatError
from .network import NetConfig, SurrogateNet
from .optim import Adam

MAGIC = b"EDCK1"
VERSION = 1


def _checksum(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


@dataclass
class Checkpoint:
    net: SurrogateNet
    optimizer: Adam | None = None
    epoch: int = -1
    test_loss: float = float("nan")
    extra: dict = field(default_factory=dict)

    @classmethod
    def capture(cls, net: SurrogateNet, optimizer: Adam | None, epoch: int,
                test_loss: float, **extra) -> "Checkpoint":
        """Deep copy of the current state (training may continue afterwards)."""
        clone = SurrogateNet(net.config, seed=None)
        for k, v in {**net.named_parameters(), **net.named_buffers()}.items():
            clone.set_parameter(k, v.copy())
        opt = None
        if optimizer is not None:
            opt = Adam(clone.named_parameters(), optimizer.lr, optimizer.beta1,
                       optimizer.beta2, optimizer.eps)
            opt.load_state(optimizer.state(), optimizer.t)
        return cls(clone, opt, epoch, test_loss, dict(extra))


def encode(ckpt: Checkpoint) -> bytes:
    net = ckpt.net
    blocks = {}
    blocks.update({f"param/{k}": v for k, v in net.named_parameters().items()})
    blocks.update({f"buffer/{k}": v for k, v in net.named_buffers().items()})
    if ckpt.optimizer is not None:
        blocks.update({f"adam/{k}": v for k, v in ckpt.optimizer.state().items()})
    opt = ckpt.optimizer
    header = {
        "net": net.config.to_dict(),
        "epoch": ckpt.epoch,
        "test_loss": ckpt.test_loss,
        "extra": ckpt.extra,
        "optimizer": None if opt is None else
        {"t": opt.t, "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps},
        "blocks": [[k, np.dtype(v.dtype).str.lstrip("<>|="), list(v.shape)] for k, v in blocks.items()],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(hbytes)), hbytes,
             struct.pack("<Q", _checksum(hbytes))]
    for v in blocks.values():
        raw = np.ascontiguousarray(v, dtype=np.dtype(v.dtype).newbyteorder("<")).tobytes()
        parts += [raw, struct.pack("<Q", _checksum(raw))]
    return b"".join(parts)


def decode(data: bytes, expect: NetConfig | None = None) -> Checkpoint:
    if data[:len(MAGIC)] != MAGIC:
        raise FormatError("not an EDCK1 checkpoint (magic mismatch)")
    pos = len(MAGIC)
    try:
        version, hlen = struct.unpack_from("<HI", data, pos)
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        pos += 6
        hbytes = data[pos:pos + hlen]
        pos += hlen
        (hsum,) = struct.unpack_from("<Q", data, pos)
        pos += 8
    except struct.error:
        raise FormatError("checkpoint truncated in header") from None
    if len(hbytes) != hlen:
        raise FormatError("checkpoint truncated in header")
    if _checksum(hbytes) != hsum:
        raise ChecksumError("checkpoint header checksum mismatch")
    header = json.loads(hbytes)
    cfg = NetConfig(**header["net"])
    if expect is not None and cfg != expect:
        raise ConfigError(f"checkpoint NetConfig {cfg} does not match expected {expect}")
    net = SurrogateNet(cfg, seed=None)
    arrays = {}
    for name, dt, shape in header["blocks"]:
        dtype = np.dtype("<" + dt)
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        raw = data[pos:pos + nbytes]
        if len(raw) != nbytes or pos + nbytes + 8 > len(data):
            raise FormatError(f"checkpoint truncated in block {name}")
        (bsum,) = struct.unpack_from("<Q", data, pos + nbytes)
        if _checksum(raw) != bsum:
            raise ChecksumError(f"checkpoint block {name} checksum mismatch")
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        pos += nbytes + 8
    if pos != len(data):
        raise FormatError("trailing bytes after checkpoint blocks")
    for name, arr in arrays.items():
        kind, key = name.split("/", 1)
        if kind in ("param", "buffer"):
            net.set_parameter(key, arr)
    opt = None
    if header["optimizer"] is not None:
        o = header["optimizer"]
        opt = Adam(net.named_parameters(), o["lr"], o["beta1"], o["beta2"], o["eps"])
        opt.load_state({k[len("adam/"):]: v for k, v in arrays.items() if k.startswith("adam/")},
                       o["t"])
    return Checkpoint(net, opt, header["epoch"], header["test_loss"], header["extra"])


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    tmp.write_bytes(encode(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike, expect: NetConfig | None = None) -> Checkpoint:
    return decode(Path(path).read_bytes(), expect)
