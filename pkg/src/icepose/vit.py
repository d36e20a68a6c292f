"""Vision-Transformer pose regressor on top of :mod:`icepose.tensor`.

Image -> non-overlapping patches -> linear embedding -> prepend a learned
class token -> add learned positional embeddings -> ``depth`` pre-norm
encoder blocks -> final LayerNorm -> the class-token row feeds two separate
linear heads: position (3, mm) and orientation (6, two rotation columns).

Parameter count (T tokens, P patch, E embed, r mlp_ratio, L depth)::

    P²E + E                     patch embedding
    (T + 1)E + E                positional embeddings + class token
    L [(4 + 2r)E² + (9 + r)E]   encoder blocks (q/k/v/out, 2 LayerNorms, MLP)
    2E                          final LayerNorm
    9E + 9                      position head (E->3) + orientation head (E->6)
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .config import to_floats, to_int
from .errors import ConfigError, DimensionError, FormatError
from .tensor import Tensor


@dataclass(frozen=True)
class ViTConfig:
    image_h: int = 64
    image_w: int = 64
    patch: int = 16
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    pos_head_dim: int = 3
    ori_head_dim: int = 6
    position_scale: float = 30.0  # mm per unit of position-head output
    ln_eps: float = 1e-5

    def __post_init__(self):
        if min(self.image_h, self.image_w, self.patch, self.embed_dim, self.depth, self.heads, self.mlp_ratio) < 1:
            raise ConfigError("ViT dimensions must all be positive")
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ConfigError(f"image {self.image_h}x{self.image_w} is not divisible by patch {self.patch}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.pos_head_dim != 3 or self.ori_head_dim != 6:
            raise ConfigError("heads must be 3 (position) and 6 (rotation columns) wide")
        if not self.position_scale > 0:
            raise ConfigError("position_scale must be positive")

    @property
    def tokens(self) -> int:
        return (self.image_h // self.patch) * (self.image_w // self.patch)

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    def parameter_count(self) -> int:
        e, r = self.embed_dim, self.mlp_ratio
        block = (4 + 2 * r) * e * e + (9 + r) * e
        return self.patch**2 * e + e + (self.tokens + 1) * e + e + self.depth * block + 2 * e + 9 * e + 9

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> ViTConfig:
        preset = kv.get("model.preset", "desk").strip()
        if preset not in PRESETS:
            raise ConfigError(f"unknown model preset {preset!r}; choose from {sorted(PRESETS)}")
        base = PRESETS[preset]
        updates = {}
        for f in fields(cls):
            key = f"model.{f.name}"
            if key in kv:
                updates[f.name] = to_int(kv[key], key) if f.type == "int" else to_floats(kv[key], 1, key)[0]
        for src, dst in (("fan.image_h", "image_h"), ("fan.image_w", "image_w")):
            if src in kv and dst not in updates:
                updates[dst] = to_int(kv[src], src)
        return replace(base, **updates)


PRESETS = {
    "desk": ViTConfig(),
    "micro": ViTConfig(image_h=8, image_w=8, patch=4, embed_dim=8, depth=1, heads=2),
    # 768-wide, 16-pixel patches; depth and heads as in ViT-Base
    "paper": ViTConfig(image_h=224, image_w=224, patch=16, embed_dim=768, depth=12, heads=12),
}


class ViTParams:
    """Ordered name -> Tensor mapping holding every learnable tensor."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        T.zero_grad(self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def copy(self) -> ViTParams:
        return ViTParams({k: Tensor(t.data, requires_grad=t.requires_grad) for k, t in self.tensors.items()})


def param_shapes(config: ViTConfig) -> dict[str, tuple[int, ...]]:
    e, p2, hid = config.embed_dim, config.patch**2, config.mlp_ratio * config.embed_dim
    shapes = {
        "patch_embed.w": (p2, e),
        "patch_embed.b": (e,),
        "pos_embed": (config.tokens + 1, e),
        "cls_token": (e,),
    }
    for i in range(config.depth):
        b = f"blocks.{i}."
        shapes[b + "ln1.g"] = (e,)
        shapes[b + "ln1.b"] = (e,)
        for name in ("q", "k", "v", "out"):
            shapes[b + f"attn.{name}.w"] = (e, e)
            shapes[b + f"attn.{name}.b"] = (e,)
        shapes[b + "ln2.g"] = (e,)
        shapes[b + "ln2.b"] = (e,)
        shapes[b + "mlp.fc1.w"] = (e, hid)
        shapes[b + "mlp.fc1.b"] = (hid,)
        shapes[b + "mlp.fc2.w"] = (hid, e)
        shapes[b + "mlp.fc2.b"] = (e,)
    shapes["norm.g"] = (e,)
    shapes["norm.b"] = (e,)
    shapes["head_p.w"] = (e, config.pos_head_dim)
    shapes["head_p.b"] = (config.pos_head_dim,)
    shapes["head_o.w"] = (e, config.ori_head_dim)
    shapes["head_o.b"] = (config.ori_head_dim,)
    return shapes


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) resampled until every value lies within ``bound`` std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


def init_params(config: ViTConfig, seed: int = 0) -> ViTParams:
    """Truncated normal (std 0.02, +-2 std) weights/embeddings; zero biases; unit LayerNorm gains."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".g"):
            data = np.ones(shape)
        elif name.endswith(".b"):
            data = np.zeros(shape)
        else:
            data = truncated_normal(rng, shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return ViTParams(tensors)


def check_params(params: ViTParams, config: ViTConfig) -> None:
    expected = param_shapes(config)
    if list(expected) != list(params.tensors):
        missing = set(expected) ^ set(params.tensors)
        raise DimensionError(f"parameter names do not match config: {sorted(missing)[:5]}")
    for name, shape in expected.items():
        t = params[name]
        if t.shape != shape:
            raise DimensionError(f"{name}: shape {t.shape}, config expects {shape}")
        if not np.all(np.isfinite(t.data)):
            raise FormatError(f"{name}: non-finite values")


# --------------------------------------------------------------------------
# forward


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """[..., H, W] -> [..., T, patch²]; patches and within-patch pixels both row-major."""
    x = np.asarray(images, dtype=np.float64)
    h, w = x.shape[-2:]
    if patch < 1 or h % patch or w % patch:
        raise ConfigError(f"image {h}x{w} is not divisible by patch {patch}")
    lead = x.shape[:-2]
    gh, gw = h // patch, w // patch
    x = x.reshape(*lead, gh, patch, gw, patch)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3)
    return np.ascontiguousarray(x.reshape(*lead, gh * gw, patch * patch))


def unpatchify(tokens: np.ndarray, patch: int, h: int, w: int) -> np.ndarray:
    gh, gw = h // patch, w // patch
    lead = tokens.shape[:-2]
    x = tokens.reshape(*lead, gh, gw, patch, patch)
    n = len(lead)
    return x.transpose(*range(n), n, n + 2, n + 1, n + 3).reshape(*lead, h, w)


@dataclass(frozen=True, eq=False)
class PosePrediction:
    p_hat: Tensor  # [B, 3] mm, anatomy frame
    o_hat: Tensor  # [B, 6] unconstrained rotation columns

    def __len__(self) -> int:
        return self.p_hat.shape[0]


def _attention(x: Tensor, params: ViTParams, prefix: str, config: ViTConfig) -> Tensor:
    b, n, e = x.shape
    h, d = config.heads, config.head_dim

    def proj(name: str) -> Tensor:
        y = T.linear(x, params[f"{prefix}{name}.w"], params[f"{prefix}{name}.b"])
        return T.reshape(y, (b, n, h, d))

    q = T.transpose(proj("q"), (0, 2, 1, 3))
    k_t = T.transpose(proj("k"), (0, 2, 3, 1))
    v = T.transpose(proj("v"), (0, 2, 1, 3))
    weights = T.softmax(T.scale(T.matmul(q, k_t), 1.0 / math.sqrt(d)), axis=-1)
    mixed = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (b, n, e))
    return T.linear(mixed, params[f"{prefix}out.w"], params[f"{prefix}out.b"])


def _block(x: Tensor, params: ViTParams, i: int, config: ViTConfig) -> Tensor:
    p = f"blocks.{i}."
    eps = config.ln_eps
    h = T.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"], eps)
    x = T.add(x, _attention(h, params, p + "attn.", config))
    h = T.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"], eps)
    h = T.gelu(T.linear(h, params[p + "mlp.fc1.w"], params[p + "mlp.fc1.b"]))
    return T.add(x, T.linear(h, params[p + "mlp.fc2.w"], params[p + "mlp.fc2.b"]))


def forward(params: ViTParams, config: ViTConfig, images) -> PosePrediction:
    """Predict (position, 6D orientation) for a batch of images [B, H, W]."""
    imgs = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    if imgs.ndim != 3 or imgs.shape[1:] != (config.image_h, config.image_w):
        raise DimensionError(f"expected images [B, {config.image_h}, {config.image_w}], got {imgs.shape}")
    b, e, n = imgs.shape[0], config.embed_dim, config.tokens + 1

    tokens = Tensor(patchify(imgs, config.patch))
    x = T.linear(tokens, params["patch_embed.w"], params["patch_embed.b"])
    cls = T.expand(T.reshape(params["cls_token"], (1, 1, e)), (b, 1, e))
    x = T.concat([cls, x], axis=1)
    x = T.add(x, T.expand(T.reshape(params["pos_embed"], (1, n, e)), (b, n, e)))
    for i in range(config.depth):
        x = _block(x, params, i, config)
    x = T.layer_norm(x, params["norm.g"], params["norm.b"], config.ln_eps)
    cls_out = T.index(x, (slice(None), 0))

    # the head predicts position in units of position_scale mm
    p_hat = T.linear(cls_out, params["head_p.w"], params["head_p.b"])
    if config.position_scale != 1.0:
        p_hat = T.scale(p_hat, config.position_scale)
    o_hat = T.linear(cls_out, params["head_o.w"], params["head_o.b"])
    return PosePrediction(p_hat, o_hat)


def predict(params: ViTParams, config: ViTConfig, images, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Inference without graph recording; returns (p_hat [B, 3], o_hat [B, 6]) arrays."""
    imgs = np.asarray(images, dtype=np.float64)
    ps, os_ = [], []
    with T.no_grad():
        for start in range(0, len(imgs), batch_size):
            pred = forward(params, config, imgs[start : start + batch_size])
            ps.append(pred.p_hat.data)
            os_.append(pred.o_hat.data)
    return np.concatenate(ps), np.concatenate(os_)


def mse(pred: Tensor, target) -> Tensor:
    """Mean over every element of the squared difference."""
    d = T.sub(pred, T.as_tensor(target))
    return T.mean(T.mul(d, d))


def loss(pred: PosePrediction, target_pos, target_rot6d, lam: float = 2.0) -> Tensor:
    """mse(position) + lam * mse(6D orientation), means over batch and components."""
    if lam < 0:
        raise ConfigError("loss weight lambda must be non-negative")
    tp, to = T.as_tensor(target_pos), T.as_tensor(target_rot6d)
    if tp.shape != pred.p_hat.shape or to.shape != pred.o_hat.shape:
        raise DimensionError(
            f"prediction shapes {pred.p_hat.shape}/{pred.o_hat.shape} vs targets {tp.shape}/{to.shape}"
        )
    return T.add(mse(pred.p_hat, tp), T.scale(mse(pred.o_hat, to), lam))


# --------------------------------------------------------------------------
# checkpoints
#
# magic b"ICEVITCK", u32 version, u32 header length, UTF-8 JSON header
# {"config": ..., "meta": ...}, u32 tensor count, then per tensor:
# u16 name length, name, u8 ndim, ndim x u32 dims, little-endian f64 data,
# u32 CRC32 over (name, dims, data) bytes.

CKPT_MAGIC = b"ICEVITCK"
CKPT_VERSION = 1


def save_checkpoint(path: str | Path, params: ViTParams, config: ViTConfig, meta: dict | None = None) -> Path:
    path = Path(path)
    header = json.dumps({"config": asdict(config), "meta": meta or {}}, sort_keys=True).encode()
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(header)), header, struct.pack("<I", len(params))]
    for name, t in params.items():
        raw_name = name.encode()
        body = (
            struct.pack("<H", len(raw_name))
            + raw_name
            + struct.pack("<B", t.ndim)
            + struct.pack(f"<{t.ndim}I", *t.shape)
            + t.data.astype("<f8").tobytes()
        )
        chunks += [body, struct.pack("<I", zlib.crc32(body))]
    path.write_bytes(b"".join(chunks))
    return path


def load_checkpoint(path: str | Path) -> tuple[ViTParams, ViTConfig, dict]:
    buf = Path(path).read_bytes()
    if len(buf) < 20 or buf[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not an icepose checkpoint")
    version, hlen = struct.unpack_from("<II", buf, 8)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    try:
        header = json.loads(buf[pos : pos + hlen])
        config = ViTConfig(**header["config"])
    except (ValueError, TypeError, KeyError) as exc:
        raise FormatError(f"{path}: malformed checkpoint header ({exc})") from None
    pos += hlen
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors = {}
    try:
        for _ in range(count):
            start = pos
            (nlen,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2 : pos + 2 + nlen].decode()
            pos += 2 + nlen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            shape = struct.unpack_from(f"<{ndim}I", buf, pos + 1)
            pos += 1 + 4 * ndim
            n = math.prod(shape)
            data = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape)
            pos += 8 * n
            (crc,) = struct.unpack_from("<I", buf, pos)
            if zlib.crc32(buf[start:pos]) != crc:
                raise FormatError(f"{path}: checksum mismatch in tensor {name!r}")
            pos += 4
            tensors[name] = Tensor(data.astype(np.float64), requires_grad=True)
    except (struct.error, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: truncated or malformed checkpoint ({exc})") from None
    params = ViTParams(tensors)
    check_params(params, config)
    return params, config, header["meta"]
