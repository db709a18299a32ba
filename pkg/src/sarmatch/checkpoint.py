"""``CKPT1`` checkpoint container.

Layout (little-endian)::

    b"CKPT1"
    u32 config_len, config text (UTF-8 ``key=value`` lines)
    u32 tensor_count
    per tensor: u32 name_len, UTF-8 name, TSR1 tensor record
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import torch

from .numerics import read_tensor, write_tensor

MAGIC = b"CKPT1"


def format_kv(kv: dict[str, str]) -> str:
    lines = []
    for key, value in kv.items():
        if "\n" in str(value) or "=" in key:
            raise ValueError(f"cannot serialize {key!r}={value!r} as key=value")
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        out[key.strip()] = value.strip()
    return out


def save_checkpoint(path, tensors: dict[str, torch.Tensor], config: dict[str, str]) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    cfg = format_kv(config).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        write_tensor(buf, t)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict[str, str]]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a CKPT1 checkpoint")
        (n,) = struct.unpack("<I", fh.read(4))
        config = parse_kv(fh.read(n).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack("<I", fh.read(4))
            name = fh.read(n).decode("utf-8")
            tensors[name] = read_tensor(fh)
    return tensors, config


def model_tensors(model: torch.nn.Module) -> dict[str, torch.Tensor]:
    """State dict with enhancement weights under ``enhance.{level}.{block}``."""
    out = {}
    for name, t in model.state_dict().items():
        out[_rename(name)] = t
    return out


def load_model_tensors(model: torch.nn.Module, tensors: dict[str, torch.Tensor]) -> None:
    expected = {_rename(k): k for k in model.state_dict()}
    missing = set(expected) - set(tensors)
    if missing:
        raise ValueError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    state = {expected[k]: v for k, v in tensors.items() if k in expected}
    model.load_state_dict(state)


def _rename(name: str) -> str:
    for level in ("deep", "shallow"):
        prefix = f"enhance_{level}.blocks."
        if name.startswith(prefix):
            return f"enhance.{level}." + name[len(prefix):]
    return name
