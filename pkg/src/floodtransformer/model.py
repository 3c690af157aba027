"""Dual-branch segmentation network: ViT encoder/decoder, shallow residual CNN,
per-scale BiFusion and a multi-level prediction head.

Feature scales follow a fixed convention. Index 0 is the coarsest map
(H/8 x W/8), index 1 sits at H/4 x W/4 and index 2 at H/2 x W/2, for both
the transformer features ``t_i`` and the CNN features ``v_i``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, NamedTuple, Tuple

import numpy as np

from . import tensor as T
from .errors import InvalidParam, ShapeMismatch
from .tensor import Tensor

LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``cnn_channels[i]`` is the channel count of ``t_i`` and ``v_i``;
    ``fusion_channels[i]`` that of the fused map ``f_i``.
    """

    image_size: Tuple[int, int] = (32, 32)
    patch_size: int = 8
    depth: int = 2
    heads: int = 4
    embed_dim: int = 32
    mlp_ratio: int = 2
    cnn_channels: Tuple[int, int, int] = (16, 12, 8)
    fusion_channels: Tuple[int, int, int] = (16, 12, 8)
    attn_reduction: int = 4
    seed: int = 0

    def __post_init__(self):
        h, w = self.image_size
        f = self.patch_size
        if h <= 0 or w <= 0 or f <= 0:
            raise InvalidParam("image and patch sizes must be positive")
        if h % f or w % f:
            raise InvalidParam(f"image size {self.image_size} not divisible by patch size {f}")
        if h % 8 or w % 8:
            raise InvalidParam(f"image size {self.image_size} not divisible by 8")
        if f % 8:
            raise InvalidParam(f"patch size {f} must be a multiple of 8")
        if self.depth < 0 or self.heads <= 0 or self.embed_dim <= 0:
            raise InvalidParam("depth must be >= 0, heads and embed_dim positive")
        if self.embed_dim % self.heads:
            raise InvalidParam(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if len(self.cnn_channels) != 3 or len(self.fusion_channels) != 3:
            raise InvalidParam("cnn_channels and fusion_channels need one entry per scale")
        if min(self.cnn_channels) <= 0 or min(self.fusion_channels) <= 0:
            raise InvalidParam("channel counts must be positive")
        if self.mlp_ratio <= 0 or self.attn_reduction <= 0:
            raise InvalidParam("mlp_ratio and attn_reduction must be positive")

    @property
    def grid(self) -> Tuple[int, int]:
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    def scale_size(self, i: int) -> Tuple[int, int]:
        div = (8, 4, 2)[i]
        return self.image_size[0] // div, self.image_size[1] // div

    def to_kv(self) -> Dict[str, str]:
        out = {}
        for k, v in asdict(self).items():
            out[k] = ",".join(str(x) for x in v) if isinstance(v, (tuple, list)) else str(v)
        return out

    @classmethod
    def from_kv(cls, kv: Dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in kv:
                continue
            raw = kv[f.name]
            if f.name in ("image_size", "cnn_channels", "fusion_channels"):
                kwargs[f.name] = tuple(int(x) for x in raw.split(","))
            else:
                kwargs[f.name] = int(raw)
        return cls(**kwargs)


class TransformerFeatures(NamedTuple):
    t0: Tensor
    t1: Tensor
    t2: Tensor
    z_L: Tensor


class CnnFeatures(NamedTuple):
    v0: Tensor
    v1: Tensor
    v2: Tensor


class FusionMaps(NamedTuple):
    f0: Tensor
    f1: Tensor
    f2: Tensor


class ForwardOutput(NamedTuple):
    logits: Tensor
    aux: FusionMaps


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    y = T.matmul(x, w)
    return T.add(y, T.expand(b, y.shape))


class FloodTransformer:
    """The full network. Parameters live in :attr:`params`, keyed by dotted name."""

    def __init__(self, config: ModelConfig | None = None):
        self.config = config or ModelConfig()
        self.params: Dict[str, Tensor] = {}
        self._rng = np.random.default_rng(self.config.seed)
        self._build()
        del self._rng

    # --- parameter construction ----------------------------------------

    def _add(self, name: str, data: np.ndarray) -> None:
        self.params[name] = Tensor(data, requires_grad=True, name=name)

    def _dense(self, name: str, d_in: int, d_out: int) -> None:
        self._add(f"{name}.weight", _he_uniform(self._rng, (d_in, d_out), d_in))
        self._add(f"{name}.bias", np.zeros((1, d_out)))

    def _conv(self, name: str, c_in: int, c_out: int, k: int) -> None:
        self._add(f"{name}.weight", _he_uniform(self._rng, (c_out, c_in, k, k), c_in * k * k))
        self._add(f"{name}.bias", np.zeros(c_out))

    def _norm(self, name: str, d: int) -> None:
        self._add(f"{name}.gamma", np.ones(d))
        self._add(f"{name}.beta", np.zeros(d))

    def _build(self) -> None:
        cfg = self.config
        d, f = cfg.embed_dim, cfg.patch_size
        c0, c1, c2 = cfg.cnn_channels
        k0, k1, k2 = cfg.fusion_channels

        self._dense("embed.proj", f * f * 3, d)
        self._add("embed.pos", self._rng.uniform(-0.02, 0.02, size=(cfg.num_patches, d)))
        hidden = d * cfg.mlp_ratio
        for layer in range(cfg.depth):
            p = f"encoder.{layer}"
            self._norm(f"{p}.norm1", d)
            self._dense(f"{p}.qkv", d, 3 * d)
            self._dense(f"{p}.proj", d, d)
            self._norm(f"{p}.norm2", d)
            self._dense(f"{p}.fc1", d, hidden)
            self._dense(f"{p}.fc2", hidden, d)

        self._conv("decoder.0", d, c0, 3)
        self._conv("decoder.1", c0, c1, 3)
        self._conv("decoder.2", c1, c2, 3)

        # block order runs fine to coarse: block 1 emits v2, block 3 emits v0
        for name, c_in, c_out in (("cnn.block1", 3, c2), ("cnn.block2", c2, c1), ("cnn.block3", c1, c0)):
            self._conv(f"{name}.conv1", c_in, c_out, 3)
            self._conv(f"{name}.conv2", c_out, c_out, 3)
            self._conv(f"{name}.skip", c_in, c_out, 1)

        for i, (c, k) in enumerate(zip(cfg.cnn_channels, cfg.fusion_channels)):
            p = f"fuse{i}"
            r = max(1, c // cfg.attn_reduction)
            self._dense(f"{p}.ca1", c, r)
            self._dense(f"{p}.ca2", r, c)
            self._conv(f"{p}.sa", 2, 1, 3)
            self._conv(f"{p}.w1", c, k, 1)
            self._conv(f"{p}.w2", c, k, 1)
            self._conv(f"{p}.bil", k, k, 3)
            self._conv(f"{p}.res_skip", 2 * c + k, k, 1)
            self._conv(f"{p}.res_conv1", 2 * c + k, k, 3)
            self._conv(f"{p}.res_conv2", k, k, 3)
            self._conv(f"aux{i}", k, 1, 1)

        self._conv("head.merge1", k0 + k1, k1, 3)
        self._conv("head.merge2", k1 + k2, k2, 3)
        self._conv("head.refine", k2, k2, 3)
        self._conv("head.out", k2, 1, 1)

    def _c(self, x: Tensor, name: str, stride: int = 1) -> Tensor:
        w = self.params[f"{name}.weight"]
        pad = w.shape[-1] // 2
        return T.conv2d(x, w, stride=stride, padding=pad, bias=self.params[f"{name}.bias"])

    def _lin(self, x: Tensor, name: str) -> Tensor:
        return _linear(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def _check_image(self, image: Tensor) -> None:
        h, w = self.config.image_size
        if image.shape != (3, h, w):
            raise ShapeMismatch(f"expected image of shape (3, {h}, {w}), got {image.shape}")

    # --- transformer branch ----------------------------------------------

    def patch_embed(self, image: Tensor) -> Tensor:
        """Slice into F x F patches, project each flattened patch, add positions."""
        self._check_image(image)
        cfg = self.config
        f = cfg.patch_size
        gh, gw = cfg.grid
        x = T.reshape(image, (3, gh, f, gw, f))
        x = T.transpose(x, (1, 3, 2, 4, 0))
        x = T.reshape(x, (gh * gw, f * f * 3))
        x = self._lin(x, "embed.proj")
        return T.add(x, self.params["embed.pos"])

    def attention(self, x: Tensor, prefix: str) -> Tensor:
        n, d = x.shape
        heads = self.config.heads
        dh = d // heads
        qkv = self._lin(x, f"{prefix}.qkv")
        outs = []
        for h in range(heads):
            q = qkv[:, h * dh : (h + 1) * dh]
            k = qkv[:, d + h * dh : d + (h + 1) * dh]
            v = qkv[:, 2 * d + h * dh : 2 * d + (h + 1) * dh]
            scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dh))
            outs.append(T.matmul(T.softmax(scores, axis=1), v))
        merged = outs[0] if heads == 1 else T.concat(outs, axis=1)
        return self._lin(merged, f"{prefix}.proj")

    def _norm_apply(self, x: Tensor, name: str) -> Tensor:
        return T.layernorm(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"], LN_EPS)

    def encode(self, tokens: Tensor) -> Tensor:
        cfg = self.config
        if tokens.shape != (cfg.num_patches, cfg.embed_dim):
            raise ShapeMismatch(f"expected tokens {(cfg.num_patches, cfg.embed_dim)}, got {tokens.shape}")
        x = tokens
        for layer in range(cfg.depth):
            p = f"encoder.{layer}"
            x = T.add(x, self.attention(self._norm_apply(x, f"{p}.norm1"), p))
            h = T.gelu(self._lin(self._norm_apply(x, f"{p}.norm2"), f"{p}.fc1"))
            x = T.add(x, self._lin(h, f"{p}.fc2"))
        return x

    def decode(self, z_L: Tensor) -> TransformerFeatures:
        cfg = self.config
        if z_L.shape != (cfg.num_patches, cfg.embed_dim):
            raise ShapeMismatch(f"expected z_L {(cfg.num_patches, cfg.embed_dim)}, got {z_L.shape}")
        gh, gw = cfg.grid
        grid = T.reshape(T.transpose(z_L), (cfg.embed_dim, gh, gw))
        t0 = T.relu(self._c(T.upsample_bilinear(grid, cfg.patch_size // 8), "decoder.0"))
        t1 = T.relu(self._c(T.upsample_bilinear(t0, 2), "decoder.1"))
        t2 = T.relu(self._c(T.upsample_bilinear(t1, 2), "decoder.2"))
        return TransformerFeatures(t0, t1, t2, z_L)

    # --- CNN branch ------------------------------------------------------

    def res_block(self, x: Tensor, name: str) -> Tensor:
        h = T.relu(self._c(x, f"{name}.conv1", stride=2))
        h = self._c(h, f"{name}.conv2")
        return T.relu(T.add(h, self._c(x, f"{name}.skip", stride=2)))

    def cnn_branch(self, image: Tensor) -> CnnFeatures:
        self._check_image(image)
        v2 = self.res_block(image, "cnn.block1")
        v1 = self.res_block(v2, "cnn.block2")
        v0 = self.res_block(v1, "cnn.block3")
        return CnnFeatures(v0, v1, v2)

    # --- fusion ----------------------------------------------------------

    def channel_attention(self, t: Tensor, scale: int) -> Tensor:
        c = t.shape[0]
        pooled = T.reshape(T.mean(t, axis=(1, 2)), (1, c))
        hidden = T.relu(self._lin(pooled, f"fuse{scale}.ca1"))
        gate = T.sigmoid(self._lin(hidden, f"fuse{scale}.ca2"))
        return T.mul(t, T.expand(T.reshape(gate, (c, 1, 1)), t.shape))

    def spatial_attention(self, v: Tensor, scale: int) -> Tensor:
        pooled = T.concat([T.mean(v, axis=0, keepdims=True), T.max(v, axis=0, keepdims=True)], axis=0)
        gate = T.sigmoid(self._c(pooled, f"fuse{scale}.sa"))
        return T.mul(v, T.expand(gate, v.shape))

    def hadamard_interaction(self, t: Tensor, v: Tensor, scale: int) -> Tensor:
        """``(W1 t) * (W2 v)`` with 1x1 projections, before the 3x3 mixing conv."""
        return T.mul(self._c(t, f"fuse{scale}.w1"), self._c(v, f"fuse{scale}.w2"))

    def bifuse(self, t: Tensor, v: Tensor, scale: int) -> Tensor:
        if scale not in (0, 1, 2):
            raise InvalidParam(f"scale must be 0, 1 or 2, got {scale}")
        if t.ndim != 3 or v.ndim != 3 or t.shape[1:] != v.shape[1:]:
            raise ShapeMismatch(f"bifuse: spatial sizes differ, {t.shape} vs {v.shape}")
        p = f"fuse{scale}"
        b = self._c(self.hadamard_interaction(t, v, scale), f"{p}.bil")
        x = T.concat([self.channel_attention(t, scale), self.spatial_attention(v, scale), b], axis=0)
        h = self._c(T.relu(self._c(x, f"{p}.res_conv1")), f"{p}.res_conv2")
        return T.relu(T.add(h, self._c(x, f"{p}.res_skip")))

    # --- head ------------------------------------------------------------

    def predict(self, f: FusionMaps) -> Tensor:
        cfg = self.config
        for i, fi in enumerate(f):
            if fi.ndim != 3 or fi.shape[1:] != cfg.scale_size(i):
                raise ShapeMismatch(f"fusion map {i} has shape {fi.shape}, expected spatial {cfg.scale_size(i)}")
        g = T.relu(self._c(T.concat([T.upsample_bilinear(f.f0, 2), f.f1], axis=0), "head.merge1"))
        g = T.relu(self._c(T.concat([T.upsample_bilinear(g, 2), f.f2], axis=0), "head.merge2"))
        g = T.relu(self._c(T.upsample_bilinear(g, 2), "head.refine"))
        return self._c(g, "head.out")

    def aux_logits(self, f: FusionMaps) -> List[Tensor]:
        """One full-resolution logit map per fusion scale, for deep supervision."""
        return [T.upsample_bilinear(self._c(fi, f"aux{i}"), (8, 4, 2)[i]) for i, fi in enumerate(f)]

    def forward(self, image) -> ForwardOutput:
        image = T.as_tensor(image)
        z = self.encode(self.patch_embed(image))
        tf = self.decode(z)
        cf = self.cnn_branch(image)
        fused = FusionMaps(
            self.bifuse(tf.t0, cf.v0, 0),
            self.bifuse(tf.t1, cf.v1, 1),
            self.bifuse(tf.t2, cf.v2, 2),
        )
        return ForwardOutput(self.predict(fused), fused)

    __call__ = forward

    def predict_proba(self, image) -> np.ndarray:
        """Sigmoid probabilities ``1 x H x W``; records nothing on any tape."""
        with T.no_grad():
            logits = self.forward(_detached(image)).logits.data
        return T._sigmoid(logits)

    # --- parameter utilities --------------------------------------------

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ShapeMismatch(f"state mismatch: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeMismatch(f"{k}: shape {arr.shape} != expected {p.shape}")
            p.data = arr.copy()


def _detached(image) -> Tensor:
    arr = image.data if isinstance(image, Tensor) else image
    return Tensor(arr)
