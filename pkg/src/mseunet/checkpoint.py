"""Binary checkpoints and flat ``key = value`` config files."""

from __future__ import annotations

import struct
import typing
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .autodiff import get_default_dtype
from .model import WIDTH_RULES, MambaSEUNet, ModelConfig

MAGIC = b"MSEU"
VERSION = 1
CONFIG_PREFIX = "config."


class CheckpointError(ValueError):
    pass


class ConfigError(ValueError):
    pass


# -- config files --------------------------------------------------------

def parse_kv(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; blank lines ignored; duplicate keys rejected."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = val
    return out


def _coerce(kind, key: str, val: str):
    try:
        if kind is bool:
            low = val.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(val)
        if kind is int:
            return int(val)
        if kind is float:
            return float(val)
        return val
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {val!r} as {kind.__name__}") from None


def build_config(cls, values: dict[str, str], base=None):
    """Instantiate dataclass ``cls`` from string values; unknown keys raise ``ConfigError``."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    kwargs = {f.name: getattr(base, f.name) for f in fields(cls)} if base is not None else {}
    kwargs.update({k: _coerce(hints[k], k, v) for k, v in values.items()})
    try:
        return cls(**kwargs)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def split_config(values: dict[str, str], *classes) -> list[dict[str, str]]:
    """Partition one key space among several config dataclasses; leftovers raise ``ConfigError``."""
    parts, seen = [], set()
    for cls in classes:
        names = {f.name for f in fields(cls)}
        parts.append({k: v for k, v in values.items() if k in names})
        seen |= names
    unknown = sorted(set(values) - seen)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return parts


def load_config_file(path: str | Path, *classes):
    """Parse ``path`` into one instance per dataclass in ``classes``."""
    values = parse_kv(Path(path).read_text())
    return [build_config(cls, part) for cls, part in zip(classes, split_config(values, *classes))]


def format_config(*configs) -> str:
    lines = []
    for cfg in configs:
        for f in fields(cfg):
            val = getattr(cfg, f.name)
            lines.append(f"{f.name} = {str(val).lower() if isinstance(val, bool) else val}")
    return "\n".join(lines) + "\n"


# -- checkpoints ---------------------------------------------------------

@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    step: int = 0
    seed: int = 0

    def config(self) -> ModelConfig:
        vals = {}
        for f in fields(ModelConfig):
            key = CONFIG_PREFIX + f.name
            if key not in self.tensors:
                raise CheckpointError(f"checkpoint lacks {key}")
            v = float(self.tensors[key])
            if f.name == "width_rule":
                vals[f.name] = WIDTH_RULES[int(v)]
            elif f.name in ("deformable", "flip_back"):
                vals[f.name] = bool(v)
            elif f.name == "compress_exp":
                vals[f.name] = float(str(np.float32(v)))  # shortest float32 repr recovers e.g. 0.3
            else:
                vals[f.name] = int(v)
        return ModelConfig(**vals)

    def parameters(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith(CONFIG_PREFIX)}


def _config_tensors(cfg: ModelConfig) -> dict[str, np.ndarray]:
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "width_rule":
            v = WIDTH_RULES.index(v)
        out[CONFIG_PREFIX + f.name] = np.asarray(float(v), dtype=np.float32)
    return out


def checkpoint_from_model(model: MambaSEUNet, step: int = 0, seed: int = 0) -> Checkpoint:
    tensors = {name: p.data.astype(np.float32) for name, p in model.named_parameters()}
    tensors.update(_config_tensors(model.cfg))
    return Checkpoint(tensors, step, seed)


def write_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote rank 0 to 1
        if len(raw) >= 1 << 16 or arr.ndim > 255:
            raise CheckpointError(f"tensor {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    parts.append(struct.pack("<QQ", ckpt.step, ckpt.seed))
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path: str | Path) -> Checkpoint:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    step, seed = struct.unpack("<QQ", take(16))
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return Checkpoint(tensors, step, seed)


def save_model(path: str | Path, model: MambaSEUNet, step: int = 0, seed: int = 0) -> None:
    write_checkpoint(path, checkpoint_from_model(model, step, seed))


def load_model(path: str | Path) -> tuple[MambaSEUNet, Checkpoint]:
    """Rebuild the model described by the checkpoint's config echo and load its weights."""
    ckpt = read_checkpoint(path)
    model = MambaSEUNet(ckpt.config(), seed=ckpt.seed)
    params = dict(model.named_parameters())
    stored = ckpt.parameters()
    if set(params) != set(stored):
        missing = sorted(set(params) - set(stored))
        extra = sorted(set(stored) - set(params))
        raise CheckpointError(f"parameter mismatch; missing {missing[:5]}, unexpected {extra[:5]}")
    dt = get_default_dtype()
    for name, p in params.items():
        if p.shape != stored[name].shape:
            raise CheckpointError(f"{name}: shape {stored[name].shape} != {p.shape}")
        p.data = stored[name].astype(dt)
    return model, ckpt
