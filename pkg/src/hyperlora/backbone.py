"""A small pre-norm vision transformer with low-rank adapter injection points.

Every block exposes its six linears (q, k, v, attn_out, fc1, fc2) as adapter
targets, addressed by a flat module index ``layer * 6 + kind_ordinal``. The
backbone is randomly initialised (truncated normal, std 0.02) and frozen; all
task adaptation happens through the injected factor pairs.

Inputs are three-channel 2-D slabs (consecutive volume slices stacked on the
channel axis). Patch extraction is a fixed reshape, so it is precomputed as
plain numpy; the learned stem (projection + positional rows + class token)
lives in the graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats as _sp_stats

from . import tensor as T
from .lora import LoraFactors, apply_delta
from .tensor import ParamStore, Tensor

KINDS = ("q", "k", "v", "attn_out", "fc1", "fc2")

IN_CHANNELS = 3


@dataclass
class BackboneConfig:
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 8
    patch_size: int = 6
    image_side: int = 24
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.hidden_dim <= 0 or self.num_layers <= 0 or self.num_heads <= 0:
            raise ValueError("dims and depths must be positive")
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if self.image_side % self.patch_size != 0:
            raise ValueError("image_side must be divisible by patch_size")

    @property
    def n_patches(self) -> int:
        return (self.image_side // self.patch_size) ** 2

    @property
    def seq_len(self) -> int:
        return self.n_patches + 1  # class token

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * IN_CHANNELS


@dataclass(frozen=True)
class ModuleDescriptor:
    flat_index: int
    layer: int
    kind: str
    d_in: int
    d_out: int


def enumerate_target_modules(cfg: BackboneConfig) -> list[ModuleDescriptor]:
    """All adapter targets in flat order: 6 per block, ``layer*6 + ordinal``."""
    descs = []
    d = cfg.hidden_dim
    for layer in range(cfg.num_layers):
        for ordinal, kind in enumerate(KINDS):
            if kind == "fc1":
                d_in, d_out = d, cfg.mlp_ratio * d
            elif kind == "fc2":
                d_in, d_out = cfg.mlp_ratio * d, d
            else:
                d_in, d_out = d, d
            descs.append(ModuleDescriptor(layer * len(KINDS) + ordinal, layer, kind, d_in, d_out))
    return descs


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated to +/- 2 std, the usual ViT init."""
    draws = _sp_stats.truncnorm.rvs(-2.0, 2.0, scale=std, size=int(np.prod(shape)), random_state=rng)
    return draws.reshape(shape).astype(dtype)


def build_backbone(store: ParamStore, cfg: BackboneConfig, rng: np.random.Generator, dtype=np.float32) -> None:
    """Add the (frozen) backbone parameters to `store` under ``backbone.*``."""

    def frozen(path, arr):
        store.add(path, arr.astype(dtype), trainable=False)

    d = cfg.hidden_dim
    frozen("backbone.patch.w", trunc_normal(rng, (cfg.patch_dim, d), dtype=dtype))
    frozen("backbone.patch.b", np.zeros(d, dtype=dtype))
    frozen("backbone.cls", trunc_normal(rng, (1, 1, d), dtype=dtype))
    frozen("backbone.pos", trunc_normal(rng, (cfg.seq_len, d), dtype=dtype))
    for i in range(cfg.num_layers):
        p = f"backbone.block{i}"
        frozen(f"{p}.ln1.gamma", np.ones(d, dtype=dtype))
        frozen(f"{p}.ln1.beta", np.zeros(d, dtype=dtype))
        for kind in ("q", "k", "v", "attn_out"):
            frozen(f"{p}.{kind}.w", trunc_normal(rng, (d, d), dtype=dtype))
            frozen(f"{p}.{kind}.b", np.zeros(d, dtype=dtype))
        frozen(f"{p}.ln2.gamma", np.ones(d, dtype=dtype))
        frozen(f"{p}.ln2.beta", np.zeros(d, dtype=dtype))
        frozen(f"{p}.fc1.w", trunc_normal(rng, (d, cfg.mlp_ratio * d), dtype=dtype))
        frozen(f"{p}.fc1.b", np.zeros(cfg.mlp_ratio * d, dtype=dtype))
        frozen(f"{p}.fc2.w", trunc_normal(rng, (cfg.mlp_ratio * d, d), dtype=dtype))
        frozen(f"{p}.fc2.b", np.zeros(d, dtype=dtype))
    frozen("backbone.final_ln.gamma", np.ones(d, dtype=dtype))
    frozen("backbone.final_ln.beta", np.zeros(d, dtype=dtype))


def extract_patches(image: np.ndarray, patch_size: int) -> np.ndarray:
    """(H, W, 3) -> (n_patches, p*p*3), patch grid row-major, each patch
    flattened row-major over (row, col, channel)."""
    h, w, c = image.shape
    if c != IN_CHANNELS:
        raise ValueError(f"expected {IN_CHANNELS} channels, got {c}")
    if h != w:
        raise ValueError("inputs must be square")
    if h % patch_size:
        raise ValueError("side not divisible by patch size")
    g = h // patch_size
    x = image.reshape(g, patch_size, g, patch_size, c)
    x = x.transpose(0, 2, 1, 3, 4)  # (gy, gx, p, p, c)
    return np.ascontiguousarray(x.reshape(g * g, patch_size * patch_size * c))


def extract_patches_batch(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(N, H, W, 3) -> (N, n_patches, p*p*3)."""
    n, h, w, c = images.shape
    g = h // patch_size
    x = images.reshape(n, g, patch_size, g, patch_size, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(n, g * g, patch_size * patch_size * c))


DeltaSet = dict  # flat_index -> LoraFactors


def _delta_for(deltas: DeltaSet, flat_index: int) -> LoraFactors | None:
    return deltas.get(flat_index) if deltas else None


def embed_tokens(store: ParamStore, cfg: BackboneConfig, patches: Tensor) -> Tensor:
    """Patch rows -> projected tokens with class token and positional rows.

    `patches` is (N, n_patches, patch_dim); returns (N, seq_len, D)."""
    n = patches.shape[0]
    toks = T.add(T.matmul(patches, store["backbone.patch.w"]), store["backbone.patch.b"])
    cls = T.broadcast_to(store["backbone.cls"], (n, 1, cfg.hidden_dim))
    x = T.concat([cls, toks], axis=1)
    return T.add(x, store["backbone.pos"])


def forward_pooled(store: ParamStore, cfg: BackboneConfig, patches, deltas: DeltaSet) -> Tensor:
    """Run the block stack and return the pooled feature (N, D): the class
    token after the final layer norm. `patches` is (N, n_patches, patch_dim).

    Adapter factors may be shared (2-D) or stacked per sample (3-D with
    leading axis N); shapes are validated against the module descriptors.
    """
    if deltas:
        max_m = cfg.num_layers * len(KINDS)
        for m in deltas:
            if not 0 <= m < max_m:
                raise ValueError(f"delta key {m} out of range for M={max_m}")
    if not isinstance(patches, Tensor):
        patches = Tensor(patches)
    n, n_heads = patches.shape[0], cfg.num_heads
    d = cfg.hidden_dim
    head_dim = d // n_heads
    att_scale = 1.0 / np.sqrt(head_dim)

    x = embed_tokens(store, cfg, patches)
    seq = cfg.seq_len

    for i in range(cfg.num_layers):
        p = f"backbone.block{i}"
        base = i * len(KINDS)

        def lin(h, kind, ordinal):
            return apply_delta(h, store[f"{p}.{kind}.w"], store[f"{p}.{kind}.b"],
                               _delta_for(deltas, base + ordinal))

        h = T.layer_norm(x, store[f"{p}.ln1.gamma"], store[f"{p}.ln1.beta"])
        q, k, v = lin(h, "q", 0), lin(h, "k", 1), lin(h, "v", 2)

        def heads(t):  # (N, S, D) -> (N, heads, S, head_dim)
            return T.transpose(T.reshape(t, (n, seq, n_heads, head_dim)), (0, 2, 1, 3))

        qh, kh, vh = heads(q), heads(k), heads(v)
        scores = T.scale(T.matmul(qh, T.swap_last2(kh)), att_scale)
        att = T.softmax_lastdim(scores)
        ctx = T.matmul(att, vh)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (n, seq, d))
        x = T.add(x, lin(ctx, "attn_out", 3))

        h = T.layer_norm(x, store[f"{p}.ln2.gamma"], store[f"{p}.ln2.beta"])
        h = T.gelu(lin(h, "fc1", 4))
        x = T.add(x, lin(h, "fc2", 5))

    x = T.layer_norm(x, store["backbone.final_ln.gamma"], store["backbone.final_ln.beta"])
    cls_tok = T.narrow(x, 1, 0, 1)
    return T.reshape(cls_tok, (n, d))


def patchify(store: ParamStore, cfg: BackboneConfig, image) -> Tensor:
    """Single-image stem: (H, W, 3) -> (seq_len, D) tokens, positional rows
    and class token included."""
    image = np.asarray(image)
    if image.shape != (cfg.image_side, cfg.image_side, IN_CHANNELS):
        raise ValueError(f"expected ({cfg.image_side}, {cfg.image_side}, {IN_CHANNELS}), got {image.shape}")
    patches = extract_patches(image, cfg.patch_size)[None]
    toks = embed_tokens(store, cfg, Tensor(patches))
    return T.reshape(toks, (cfg.seq_len, cfg.hidden_dim))


def forward(store: ParamStore, cfg: BackboneConfig, image, deltas: DeltaSet) -> Tensor:
    """Single-image forward: (H, W, 3) plus a delta set -> pooled feature (D,)."""
    image = np.asarray(image)
    if image.shape != (cfg.image_side, cfg.image_side, IN_CHANNELS):
        raise ValueError(f"expected ({cfg.image_side}, {cfg.image_side}, {IN_CHANNELS}), got {image.shape}")
    patches = extract_patches(image, cfg.patch_size)[None]
    pooled = forward_pooled(store, cfg, patches, deltas)
    return T.reshape(pooled, (cfg.hidden_dim,))
