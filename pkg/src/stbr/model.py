"""Input projection, dilated causal CNN encoder, predictor and checkpoint I/O.

Parameter layout (names are shared by the online and target sets, the target
set has no ``pred.*`` entries):

    proj.W [1, D]      proj.b [D]
    block{b}.conv{1,2}.kernel [k, D, D]   block{b}.conv{1,2}.bias [D]
    head.W [D, K]      head.b [K]
    pred.fc1.W [K, H]  pred.fc1.b [H]   pred.fc2.W [H, K]   pred.fc2.b [K]
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as tn
from .errors import CheckpointError, CompatibilityError, ConfigError, ContractError
from .tensor import Param, Tensor

MAGIC = b"STBR"
VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 1
    latent_dim: int = 64
    repr_dim: int = 64
    n_blocks: int = 10
    kernel_size: int = 3
    predictor_hidden: int = 128
    mask_mode: str = "latent"       # latent | raw
    projection: str = "duplicated"  # duplicated | shared

    def __post_init__(self):
        if self.input_dim != 1:
            raise ConfigError("only univariate instances are supported (input_dim = 1)")
        for name in ("latent_dim", "repr_dim", "n_blocks", "kernel_size", "predictor_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"encoder {name} must be >= 1")
        if self.mask_mode not in ("latent", "raw"):
            raise ConfigError(f"mask_mode must be 'latent' or 'raw', got {self.mask_mode!r}")
        if self.projection not in ("duplicated", "shared"):
            raise ConfigError(f"projection must be 'duplicated' or 'shared', got {self.projection!r}")

    @property
    def receptive_field(self) -> int:
        return 1 + 2 * (self.kernel_size - 1) * (2 ** self.n_blocks - 1)

    def dilation(self, block: int) -> int:
        return 2 ** block

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> EncoderConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown encoder config keys: {sorted(unknown)}")
        return cls(**d)


# Desk-scale encoder: six blocks keep the receptive field (253) just above the
# default training crop (L1 = 200), so every tap sees real history during
# training as it does at inference.  Ten blocks (4093) leave the deep taps
# reading only zero padding in training crops, which makes full-series
# representations drift with absolute position.
DESK_ENCODER = EncoderConfig(latent_dim=16, repr_dim=16, n_blocks=6, predictor_hidden=32)


def _param_shapes(cfg: EncoderConfig) -> dict[str, tuple[tuple[int, ...], int]]:
    """name -> (shape, fan_in)."""
    D, K, H, k = cfg.latent_dim, cfg.repr_dim, cfg.predictor_hidden, cfg.kernel_size
    shapes = {"proj.W": ((cfg.input_dim, D), cfg.input_dim), "proj.b": ((D,), cfg.input_dim)}
    for b in range(cfg.n_blocks):
        for c in ("conv1", "conv2"):
            shapes[f"block{b}.{c}.kernel"] = ((k, D, D), k * D)
            shapes[f"block{b}.{c}.bias"] = ((D,), k * D)
    shapes["head.W"] = ((D, K), D)
    shapes["head.b"] = ((K,), D)
    shapes["pred.fc1.W"] = ((K, H), K)
    shapes["pred.fc1.b"] = ((H,), K)
    shapes["pred.fc2.W"] = ((H, K), H)
    shapes["pred.fc2.b"] = ((K,), H)
    return shapes


def encoder_names(cfg: EncoderConfig) -> list[str]:
    names = [n for n in _param_shapes(cfg) if not n.startswith("pred.")]
    if cfg.projection == "shared":
        names = [n for n in names if not n.startswith("proj.")]
    return names


class STBRModel:
    """Online parameters with predictor, and the EMA-tracked target parameters."""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        self.config = config
        self.seed = int(seed)
        self.step = 0
        rng = np.random.default_rng(seed)
        self.online: dict[str, Param] = {}
        for name, (shape, fan_in) in _param_shapes(config).items():
            bound = 1.0 / np.sqrt(fan_in)
            self.online[name] = Param(f"online.{name}", rng.uniform(-bound, bound, size=shape))
        self.target: dict[str, Param] = {
            name: Param(f"target.{name}", self.online[name].data.copy(), requires_grad=False)
            for name in encoder_names(config)
        }

    def online_params(self) -> list[Param]:
        return list(self.online.values())

    def target_params(self) -> list[Param]:
        return list(self.target.values())

    def target_view(self) -> dict[str, Param]:
        """Parameters the target branch encodes with (online projection when shared)."""
        if self.config.projection == "shared":
            return {"proj.W": self.online["proj.W"], "proj.b": self.online["proj.b"], **self.target}
        return self.target


def _as_batch(a, name: str) -> tuple[np.ndarray, bool]:
    a = np.asarray(a)
    if a.ndim == 1:
        return a[None], True
    if a.ndim == 2:
        return a, False
    raise ContractError(f"{name} must be [L] or [B, L], got shape {a.shape}")


def encode(params: dict[str, Param], cfg: EncoderConfig, series, observed, aug_mask=None) -> Tensor:
    """Encode ``series[B, L]`` into ``[B, L, K]``; timestamps that are masked or unobserved are blanked."""
    x = np.asarray(series, dtype=np.float64)
    obs = np.asarray(observed, dtype=bool)
    if obs.shape != x.shape:
        raise ContractError(f"observed mask {obs.shape} does not match series {x.shape}")
    keep = obs.copy()
    if aug_mask is not None:
        aug = np.asarray(aug_mask, dtype=bool)
        if aug.shape != x.shape:
            raise ContractError(f"augmentation mask {aug.shape} does not match series {x.shape}")
        keep &= ~aug
    keep = keep.astype(np.float64)
    if cfg.mask_mode == "raw":
        z = tn.linear((x * keep)[..., None], params["proj.W"], params["proj.b"])
    else:
        z = tn.mask_time(tn.linear(x[..., None], params["proj.W"], params["proj.b"]), keep)
    h = z
    for b in range(cfg.n_blocks):
        d = cfg.dilation(b)
        u = tn.causal_dilated_conv1d(h, params[f"block{b}.conv1.kernel"], d, params[f"block{b}.conv1.bias"])
        u = tn.gelu(u)
        u = tn.causal_dilated_conv1d(u, params[f"block{b}.conv2.kernel"], d, params[f"block{b}.conv2.bias"])
        h = tn.add(h, u)
    return tn.linear(h, params["head.W"], params["head.b"])


def _squeeze(t: Tensor, single: bool) -> Tensor:
    return tn.reshape(t, t.shape[1:]) if single else t


def encode_online(model: STBRModel, series, observed, aug_mask=None) -> Tensor:
    """Online encoder; records on the active tape."""
    x, single = _as_batch(series, "series")
    obs, _ = _as_batch(observed, "observed")
    aug = None if aug_mask is None else _as_batch(getattr(aug_mask, "masked", aug_mask), "aug_mask")[0]
    out = encode(model.online, model.config, x, obs, aug)
    return _squeeze(out, single)


def encode_target(model: STBRModel, series, observed) -> Tensor:
    """Target encoder, no augmentation mask, always detached."""
    x, single = _as_batch(series, "series")
    obs, _ = _as_batch(observed, "observed")
    with tn.no_grad():
        out = encode(model.target_view(), model.config, x, obs)
    return _squeeze(out, single)


def predict(model: STBRModel, r: Tensor) -> Tensor:
    """Positionwise two-layer MLP predictor."""
    p = model.online
    h = tn.gelu(tn.linear(r, p["pred.fc1.W"], p["pred.fc1.b"]))
    return tn.linear(h, p["pred.fc2.W"], p["pred.fc2.b"])


def infer(model: STBRModel, series, observed) -> np.ndarray:
    """Online-encoder representations without recording, as a plain array."""
    with tn.no_grad():
        x, single = _as_batch(series, "series")
        obs, _ = _as_batch(observed, "observed")
        out = encode(model.online, model.config, x, obs).data
    return out[0] if single else out


# ----------------------------------------------------------------------------
# checkpoint file


def checkpoint_bytes(model: STBRModel) -> bytes:
    cfg = model.config.to_json().encode()
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(cfg)), cfg,
             struct.pack("<QQ", model.step, model.seed)]
    sections = [(f"online.{n}", p.data) for n, p in model.online.items()]
    sections += [(f"target.{n}", p.data) for n, p in model.target.items()]
    parts.append(struct.pack("<I", len(sections)))
    for name, arr in sections:
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: STBRModel, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_from_bytes(buf: bytes, expected_config: EncoderConfig | None = None) -> STBRModel:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if len(buf) < 10:
        raise CheckpointError("checkpoint is truncated")
    r = _Reader(buf[:-4])
    r.take(4)
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {VERSION})")
    (crc,) = struct.unpack("<I", buf[-4:])
    (cfg_len,) = r.unpack("<I")
    cfg_raw = r.take(cfg_len)
    if zlib.crc32(buf[:-4]) != crc:
        raise CheckpointError("checkpoint checksum mismatch (file corrupted or truncated)")
    try:
        config = EncoderConfig.from_dict(json.loads(cfg_raw))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"checkpoint config block is invalid: {exc}") from None
    if expected_config is not None and expected_config.hash() != config.hash():
        raise CompatibilityError(
            f"checkpoint config hash {config.hash()[:12]} does not match requested {expected_config.hash()[:12]}")
    step, seed = r.unpack("<QQ")
    model = STBRModel(config, seed)
    model.step = step
    (n_sections,) = r.unpack("<I")
    seen = set()
    for _ in range(n_sections):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        data = np.frombuffer(r.take(8 * int(np.prod(shape, dtype=np.int64))), dtype="<f8").reshape(shape)
        branch, _, pname = name.partition(".")
        table = {"online": model.online, "target": model.target}.get(branch)
        if table is None or pname not in table:
            raise CheckpointError(f"unexpected checkpoint section {name!r}")
        if table[pname].shape != tuple(shape):
            raise CheckpointError(f"section {name!r} has shape {tuple(shape)}, expected {table[pname].shape}")
        table[pname].data[...] = data
        seen.add(name)
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after the last checkpoint section")
    expected = {f"online.{n}" for n in model.online} | {f"target.{n}" for n in model.target}
    if seen != expected:
        raise CheckpointError(f"checkpoint is missing sections {sorted(expected - seen)}")
    return model


def load_checkpoint(path, expected_config: EncoderConfig | None = None) -> STBRModel:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return checkpoint_from_bytes(path.read_bytes(), expected_config)
