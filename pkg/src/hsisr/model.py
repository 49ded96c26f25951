"""Iterative-refinement super-resolution transformer.

A 3x3 projection lifts the input cube to C feature channels, a schedule of
up/down rescale stages each followed by one attention encoder layer refines
the features, and a final 3x3 projection recovers the band count. Stages
whose encoder input resolution matches share one weight group; features
taken right after each rescale feed residual links across the adjacent
three stages.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .attention import AttentionConfig, essa_forward
from .data import HsiCube
from .tensor import (
    CorruptTensorError,
    Param,
    ShapeError,
    Tensor,
    concat,
    conv2d,
    matmul,
    pixel_shuffle,
    pixel_unshuffle,
    tensor_from_bytes,
    tensor_to_bytes,
)

__all__ = [
    "ModelConfig",
    "ParamStore",
    "ConfigMismatchError",
    "build_model",
    "rescale",
    "encoder_layer",
    "forward",
    "save_checkpoint",
    "load_checkpoint",
]


class ConfigMismatchError(ValueError):
    """Checkpoint was produced under a different model configuration."""


def _parse_factor(tok: str) -> Fraction:
    tok = tok.strip()
    if "/" in tok:
        num, den = tok.split("/")
        return Fraction(int(num), int(den))
    return Fraction(int(tok))


def parse_schedule(text: str) -> tuple[Fraction, ...]:
    return tuple(_parse_factor(t) for t in text.split(","))


def _format_factor(f: Fraction) -> str:
    return str(f.numerator) if f.denominator == 1 else f"{f.numerator}/{f.denominator}"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture settings; the default is the desk-scale configuration."""

    bands: int
    channels: int = 32
    scale: int = 2
    stage_schedule: tuple[Fraction, ...] = (
        Fraction(2), Fraction(1, 2), Fraction(2), Fraction(1, 2), Fraction(2))
    heads: int = 1
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    pre_norm: bool = False

    def __post_init__(self):
        if self.bands < 1 or self.channels < 2:
            raise ValueError("bands >= 1 and channels >= 2 required")
        if not self.stage_schedule:
            raise ValueError("stage_schedule must have at least one stage")
        prod = Fraction(1)
        for f in self.stage_schedule:
            f = Fraction(f)
            if f <= 0 or not _is_pow2(f):
                raise ValueError(f"schedule factor {f} is not a power of two")
            prod *= f
        if prod != self.scale:
            raise ValueError(
                f"schedule product {prod} != scale {self.scale}")

    @property
    def resolved_attention(self) -> AttentionConfig:
        return replace(self.attention, heads=self.heads)

    def stage_resolutions(self) -> list[Fraction]:
        """Encoder input resolution (relative to the input) per stage."""
        out, cur = [], Fraction(1)
        for f in self.stage_schedule:
            cur *= Fraction(f)
            out.append(cur)
        return out

    def share_map(self) -> dict[int, str]:
        """Stage index -> weight-group key, keyed by encoder input resolution."""
        return {i: f"r{_format_factor(res).replace('/', 'd')}"
                for i, res in enumerate(self.stage_resolutions())}

    def min_input_divisor(self) -> int:
        """Input dims must divide by this so every down step lands on even dims."""
        cur, low = Fraction(1), Fraction(1)
        for f in self.stage_schedule:
            cur *= Fraction(f)
            low = min(low, cur)
        return int(Fraction(1) / low) if low < 1 else 1

    def to_text(self) -> str:
        sched = ",".join(_format_factor(Fraction(f)) for f in self.stage_schedule)
        a = self.attention
        lines = [
            f"bands={self.bands}",
            f"channels={self.channels}",
            f"scale={self.scale}",
            f"schedule={sched}",
            f"heads={self.heads}",
            f"sigma={a.sigma!r}",
            f"order={a.order}",
            f"mode={a.mode}",
            f"normalize={int(a.normalize)}",
            f"epsilon={a.epsilon!r}",
            f"pre_norm={int(self.pre_norm)}",
        ]
        return "\n".join(lines)

    @staticmethod
    def from_text(text: str) -> "ModelConfig":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if line and "=" in line:
                k, v = line.split("=", 1)
                kv[k.strip()] = v.strip()
        att = AttentionConfig(
            sigma=float(kv["sigma"]),
            order=int(kv["order"]),
            mode=kv["mode"],
            normalize=bool(int(kv["normalize"])),
            heads=int(kv["heads"]),
            epsilon=float(kv["epsilon"]),
        )
        return ModelConfig(
            bands=int(kv["bands"]),
            channels=int(kv["channels"]),
            scale=int(kv["scale"]),
            stage_schedule=parse_schedule(kv["schedule"]),
            heads=int(kv["heads"]),
            attention=att,
            pre_norm=bool(int(kv.get("pre_norm", "0"))),
        )


def _is_pow2(f: Fraction) -> bool:
    n = f.numerator if f >= 1 else f.denominator
    other = f.denominator if f >= 1 else f.numerator
    return other == 1 and n & (n - 1) == 0


class ParamStore:
    """Named parameters plus the stage -> weight-group map."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Param] = {}
        self.stage_groups: dict[int, str] = {}

    def create(self, name: str, shape, rng: np.random.Generator,
               fan_in: int) -> Param:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        bound = float(np.sqrt(6.0 / fan_in))
        value = Tensor(rng.uniform(-bound, bound, size=shape).astype(self.dtype),
                       self.dtype, requires_grad=True)
        p = Param(name, value)
        self.params[name] = p
        return p

    def create_zeros(self, name: str, shape) -> Param:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Param(name, Tensor.zeros(shape, self.dtype, requires_grad=True))
        self.params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def parameters(self) -> list[Param]:
        return list(self.params.values())

    def total_count(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def build_model(cfg: ModelConfig, seed: int, dtype=np.float32) -> ParamStore:
    """Create and initialize all parameters deterministically from the seed."""
    cfg.resolved_attention.validate_channels(cfg.channels)
    store = ParamStore(dtype)
    store.stage_groups = cfg.share_map()
    rng = np.random.default_rng(seed)
    c = cfg.channels

    store.create("head.w", (c, cfg.bands, 3, 3), rng, fan_in=cfg.bands * 9)
    store.create_zeros("head.b", (c,))

    made_rescale: set[str] = set()
    made_enc: set[str] = set()
    cur = Fraction(1)
    for i, f in enumerate(cfg.stage_schedule):
        f = Fraction(f)
        rkey = _rescale_key(cur, f)
        if rkey not in made_rescale:
            made_rescale.add(rkey)
            for j in range(_rescale_steps(f)):
                if f > 1:
                    store.create(f"{rkey}.s{j}.w", (4 * c, c, 1, 1), rng, fan_in=c)
                    store.create_zeros(f"{rkey}.s{j}.b", (4 * c,))
                else:
                    store.create(f"{rkey}.s{j}.w", (c, 4 * c, 1, 1), rng, fan_in=4 * c)
                    store.create_zeros(f"{rkey}.s{j}.b", (c,))
        cur *= f
        gkey = store.stage_groups[i]
        if gkey not in made_enc:
            made_enc.add(gkey)
            for nm in ("q", "k", "v"):
                store.create(f"enc.{gkey}.w{nm}", (c, c), rng, fan_in=c)
                store.create_zeros(f"enc.{gkey}.b{nm}", (c,))
            store.create(f"enc.{gkey}.ffn.w1", (2 * c, 2 * c, 1, 1), rng, fan_in=2 * c)
            store.create_zeros(f"enc.{gkey}.ffn.b1", (2 * c,))
            store.create(f"enc.{gkey}.ffn.wd", (2 * c, 1, 3, 3), rng, fan_in=9)
            store.create_zeros(f"enc.{gkey}.ffn.bd", (2 * c,))
            store.create(f"enc.{gkey}.ffn.w2", (c, 2 * c, 1, 1), rng, fan_in=2 * c)
            store.create_zeros(f"enc.{gkey}.ffn.b2", (c,))

    store.create("tail.w", (cfg.bands, c, 3, 3), rng, fan_in=c * 9)
    store.create_zeros("tail.b", (cfg.bands,))
    return store


def _rescale_steps(f: Fraction) -> int:
    n = f.numerator if f >= 1 else f.denominator
    return n.bit_length() - 1


def _rescale_key(entry_res: Fraction, f: Fraction) -> str:
    return (f"rescale.r{_format_factor(entry_res).replace('/', 'd')}"
            f"xf{_format_factor(f).replace('/', 'd')}")


def rescale(x: Tensor, factor: Fraction, store: ParamStore, rkey: str) -> Tensor:
    """Spatial rescale by a power of two; channel count preserved end to end.

    Up steps are 1x1 conv C -> 4C then pixel shuffle; down steps are pixel
    unshuffle then 1x1 conv 4C -> C.
    """
    factor = Fraction(factor)
    for j in range(_rescale_steps(factor)):
        w = store[f"{rkey}.s{j}.w"].value
        b = store[f"{rkey}.s{j}.b"].value
        if factor > 1:
            x = conv2d(x, w, b, mode="pointwise")
            x = pixel_shuffle(x, 2)
        else:
            if x.data.shape[1] % 2 or x.data.shape[2] % 2:
                raise ShapeError(
                    f"downsample needs even spatial dims, got {x.shape[1:]}")
            x = pixel_unshuffle(x, 2)
            x = conv2d(x, w, b, mode="pointwise")
    return x


def encoder_layer(x: Tensor, store: ParamStore, gkey: str, cfg: ModelConfig) -> Tensor:
    """One attention + feed-forward block; output shape equals input shape."""
    c, h, w = x.data.shape
    tokens = x.reshape((c, h * w)).transpose()  # (N, C)
    if cfg.pre_norm:
        from .attention import center_normalize
        tokens_in = center_normalize(tokens, cfg.attention.epsilon)
    else:
        tokens_in = tokens
    acfg = cfg.resolved_attention
    q = matmul(tokens_in, store[f"enc.{gkey}.wq"].value).add_rowvec(store[f"enc.{gkey}.bq"].value)
    k = matmul(tokens_in, store[f"enc.{gkey}.wk"].value).add_rowvec(store[f"enc.{gkey}.bk"].value)
    v = matmul(tokens_in, store[f"enc.{gkey}.wv"].value).add_rowvec(store[f"enc.{gkey}.bv"].value)
    att = essa_forward(q, k, v, acfg)
    att_sp = att.transpose().reshape((c, h, w))
    y = concat([att_sp, x], axis=0)
    y = conv2d(y, store[f"enc.{gkey}.ffn.w1"].value, store[f"enc.{gkey}.ffn.b1"].value,
               mode="pointwise")
    y = conv2d(y, store[f"enc.{gkey}.ffn.wd"].value, store[f"enc.{gkey}.ffn.bd"].value,
               mode="depthwise")
    y = y.gelu()
    y = conv2d(y, store[f"enc.{gkey}.ffn.w2"].value, store[f"enc.{gkey}.ffn.b2"].value,
               mode="pointwise")
    return y


def forward_features(x: Tensor, store: ParamStore, cfg: ModelConfig) -> Tensor:
    """Full feature pipeline on a (bands, h, w) tensor; returns (bands, sh, sw)."""
    h, w = x.data.shape[1:]
    d = cfg.min_input_divisor()
    if h % d or w % d:
        raise ShapeError(
            f"input dims {h}x{w} must be divisible by {d} for schedule "
            f"{[str(Fraction(f)) for f in cfg.stage_schedule]}")
    x = conv2d(x, store["head.w"].value, store["head.b"].value, mode="spatial")
    history: list[tuple[Fraction, Tensor]] = []  # post-rescale feature per stage
    cur = Fraction(1)
    for i, f in enumerate(cfg.stage_schedule):
        f = Fraction(f)
        rkey = _rescale_key(cur, f)
        x = rescale(x, f, store, rkey)
        cur *= f
        post = x
        # residual over the window of the adjacent three stages: most recent
        # earlier post-rescale feature at this resolution
        for res, feat in reversed(history[-2:]):
            if res == cur:
                x = x.add(feat)
                break
        history.append((cur, post))
        x = encoder_layer(x, store, store.stage_groups[i], cfg)
    return conv2d(x, store["tail.w"].value, store["tail.b"].value, mode="spatial")


def forward(x_l: HsiCube, store: ParamStore, cfg: ModelConfig,
            clamp: bool = False) -> HsiCube:
    """Map a low-resolution cube to its super-resolved prediction."""
    if x_l.bands != cfg.bands:
        raise ShapeError(f"input has {x_l.bands} bands, model expects {cfg.bands}")
    out = forward_features(x_l.tensor(store.dtype), store, cfg)
    v = out.data
    if clamp:
        v = np.clip(v, 0.0, 1.0)
    return HsiCube(v)


# -- checkpoints -------------------------------------------------------------------

_CKPT_MAGIC = b"ESSF"
_CKPT_VERSION = 1


def save_checkpoint(path, store: ParamStore, cfg: ModelConfig,
                    extra: dict[str, Tensor] | None = None) -> None:
    """Write config plus all named tensors (and any extra state tensors)."""
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(struct.pack("<H", _CKPT_VERSION))
    cfg_bytes = cfg.to_text().encode()
    buf.write(struct.pack("<I", len(cfg_bytes)))
    buf.write(cfg_bytes)
    items: list[tuple[str, Tensor]] = [(p.name, p.value) for p in store.parameters()]
    if extra:
        items += sorted(extra.items())
    buf.write(struct.pack("<I", len(items)))
    for name, t in items:
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(tensor_to_bytes(t))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, expect_cfg: ModelConfig | None = None
                    ) -> tuple[ModelConfig, ParamStore, dict[str, Tensor]]:
    """Read a checkpoint; validates config equality when one is expected."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _CKPT_MAGIC:
        raise CorruptTensorError(f"{path}: bad checkpoint magic")
    off = 4
    try:
        (version,) = struct.unpack_from("<H", buf, off)
        off += 2
        if version != _CKPT_VERSION:
            raise CorruptTensorError(f"unsupported checkpoint version {version}")
        (clen,) = struct.unpack_from("<I", buf, off)
        off += 4
        cfg_text = buf[off:off + clen].decode()
        off += clen
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
    except struct.error as exc:
        raise CorruptTensorError(f"{path}: truncated checkpoint header") from exc
    cfg = ModelConfig.from_text(cfg_text)
    if expect_cfg is not None and cfg.to_text() != expect_cfg.to_text():
        raise ConfigMismatchError(
            "checkpoint config differs from the expected one:\n"
            f"--- checkpoint ---\n{cfg.to_text()}\n--- expected ---\n{expect_cfg.to_text()}")
    tensors: dict[str, Tensor] = {}
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<H", buf, off)
        except struct.error as exc:
            raise CorruptTensorError(f"{path}: truncated tensor table") from exc
        off += 2
        name = buf[off:off + nlen].decode()
        off += nlen
        t, off = tensor_from_bytes(buf, off)
        tensors[name] = t
    if off != len(buf):
        raise CorruptTensorError(f"{path}: {len(buf) - off} trailing bytes")

    store = build_model(cfg, seed=0, dtype=np.float32)
    extra: dict[str, Tensor] = {}
    for name, t in tensors.items():
        if name in store:
            p = store[name]
            if p.value.shape != t.shape:
                raise CorruptTensorError(
                    f"{path}: tensor {name} shape {t.shape}, expected {p.value.shape}")
            p.value.data = t.data.astype(store.dtype)
        else:
            extra[name] = t
    missing = [n for n in store.names() if n not in tensors]
    if missing:
        raise CorruptTensorError(f"{path}: missing parameters {missing[:5]}")
    return cfg, store, extra
