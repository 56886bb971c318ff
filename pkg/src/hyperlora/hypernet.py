"""Task-conditioned generation of low-rank adapter factors.

A trainable embedding row per task and one per target module are concatenated
and pushed through a small trunk; per-module linear heads then regress the
flattened factor pair for that (task, module) combination. The head output
layout is a frozen contract: the first ``rank * d_in`` entries are ``b``
(reshaped row-major to ``d_in x rank``), the remainder are ``a`` (reshaped to
``rank x d_out``). Checkpoints and the weight-space analysis both rely on it.

Two trunk architectures are available:

* ``residual`` (default): mixer (two SiLU linears) -> two pre-norm residual
  blocks -> layer-normed output projection to the head input width.
* ``mlp``: a plain three-linear SiLU stack, the shallow variant.

Head initialisation defaults to ``warm``: the ``b`` half of each head gets
small random weights while the ``a`` half starts at zero. Generated deltas
are therefore exactly zero at initialisation (the adapted model *is* the
frozen base model) while gradients still reach the trunk and embeddings
through the ``a`` half. An all-zero head init is available as ``zero``; it
keeps the identity property but parks the generator on a stationary point —
with both factors zero every upstream gradient vanishes identically, so
nothing upstream of the heads would ever train.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import ModuleDescriptor
from .lora import LoraFactors
from .tensor import ParamStore, Tensor

HEAD_INIT_STD = 0.02


@dataclass
class HyperNetConfig:
    embed_dim: int = 64       # task embedding width
    pos_dim: int = 16         # module embedding width
    latent_dim: int = 32      # trunk width
    head_in_dim: int = 64     # width fed to the per-module heads
    rank: int = 4
    alpha: float = 4.0
    dropout: float = 0.05
    arch: str = "residual"    # or "mlp"
    mlp_hidden: int = 32      # hidden width of the "mlp" trunk
    head_init: str = "warm"   # or "zero"

    def __post_init__(self):
        if self.arch not in ("residual", "mlp"):
            raise ValueError(f"unknown hypernet arch: {self.arch!r}")
        if self.head_init not in ("warm", "zero"):
            raise ValueError(f"unknown head init: {self.head_init!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if min(self.embed_dim, self.pos_dim, self.latent_dim, self.head_in_dim, self.rank) < 1:
            raise ValueError("dims must be positive")

    @property
    def input_dim(self) -> int:
        return self.embed_dim + self.pos_dim


def head_out_len(desc: ModuleDescriptor, rank: int) -> int:
    return rank * (desc.d_in + desc.d_out)


def _linear_init(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    return (rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)).astype(dtype)


def build_hypernet(
    store: ParamStore,
    cfg: HyperNetConfig,
    descriptors: list[ModuleDescriptor],
    n_tasks: int,
    rng: np.random.Generator,
    dtype=np.float32,
) -> None:
    """Add task/module tables, trunk and heads to `store` (all trainable)."""
    if n_tasks < 1:
        raise ValueError("need at least one task")
    store.add("task_embed.table",
              (rng.standard_normal((n_tasks, cfg.embed_dim)) / np.sqrt(cfg.embed_dim)).astype(dtype))
    store.add("pos_embed.table",
              (rng.standard_normal((len(descriptors), cfg.pos_dim)) / np.sqrt(cfg.pos_dim)).astype(dtype))

    def linear(path, fan_in, fan_out):
        store.add(f"{path}.w", _linear_init(rng, fan_in, fan_out, dtype))
        store.add(f"{path}.b", np.zeros(fan_out, dtype=dtype))

    def ln(path, width):
        store.add(f"{path}.gamma", np.ones(width, dtype=dtype))
        store.add(f"{path}.beta", np.zeros(width, dtype=dtype))

    if cfg.arch == "residual":
        linear("hypernet.mixer.l1", cfg.input_dim, cfg.latent_dim)
        linear("hypernet.mixer.l2", cfg.latent_dim, cfg.latent_dim)
        for r in range(2):
            ln(f"hypernet.res{r}.ln", cfg.latent_dim)
            linear(f"hypernet.res{r}.l1", cfg.latent_dim, cfg.latent_dim)
            linear(f"hypernet.res{r}.l2", cfg.latent_dim, cfg.latent_dim)
        ln("hypernet.out.ln", cfg.latent_dim)
        linear("hypernet.out.l1", cfg.latent_dim, cfg.head_in_dim)
        linear("hypernet.out.l2", cfg.head_in_dim, cfg.head_in_dim)
    else:
        linear("hypernet.mlp.l1", cfg.input_dim, cfg.mlp_hidden)
        linear("hypernet.mlp.l2", cfg.mlp_hidden, cfg.mlp_hidden)
        linear("hypernet.mlp.l3", cfg.mlp_hidden, cfg.head_in_dim)

    for desc in descriptors:
        out_len = head_out_len(desc, cfg.rank)
        w = np.zeros((cfg.head_in_dim, out_len), dtype=dtype)
        if cfg.head_init == "warm":
            b_cols = cfg.rank * desc.d_in
            w[:, :b_cols] = (HEAD_INIT_STD * rng.standard_normal((cfg.head_in_dim, b_cols))).astype(dtype)
        store.add(f"hypernet.head{desc.flat_index}.w", w)
        store.add(f"hypernet.head{desc.flat_index}.b", np.zeros(out_len, dtype=dtype))


def build_shared_lora(
    store: ParamStore,
    descriptors: list[ModuleDescriptor],
    rank: int,
    rng: np.random.Generator,
    dtype=np.float32,
) -> None:
    """Directly trainable factor pairs shared by every task (the equal-weight
    baseline). Same warm start as the generated factors: random ``b``,
    zero ``a``."""
    for desc in descriptors:
        store.add(f"shared_lora.m{desc.flat_index}.b",
                  (HEAD_INIT_STD * rng.standard_normal((desc.d_in, rank))).astype(dtype))
        store.add(f"shared_lora.m{desc.flat_index}.a",
                  np.zeros((rank, desc.d_out), dtype=dtype))


def shared_lora_deltas(store: ParamStore, cfg: HyperNetConfig, descriptors: list[ModuleDescriptor]) -> dict:
    return {
        d.flat_index: LoraFactors(
            store[f"shared_lora.m{d.flat_index}.b"],
            store[f"shared_lora.m{d.flat_index}.a"],
            cfg.rank,
            cfg.alpha,
        )
        for d in descriptors
    }


def _trunk(store: ParamStore, cfg: HyperNetConfig, x: Tensor, training: bool, rng) -> Tensor:
    """(n, input_dim) -> (n, head_in_dim). Dropout follows each activation in
    the mixer and residual blocks, never the output projection."""

    def lin(path, h):
        return T.add(T.matmul(h, store[f"{path}.w"]), store[f"{path}.b"])

    def act(h):
        h = T.silu(h)
        return T.dropout(h, cfg.dropout, rng, training)

    if cfg.arch == "mlp":
        h = act(lin("hypernet.mlp.l1", x))
        h = act(lin("hypernet.mlp.l2", h))
        return T.silu(lin("hypernet.mlp.l3", h))

    h = act(lin("hypernet.mixer.l1", x))
    h = act(lin("hypernet.mixer.l2", h))
    for r in range(2):
        p = f"hypernet.res{r}"
        z = T.layer_norm(h, store[f"{p}.ln.gamma"], store[f"{p}.ln.beta"])
        z = act(lin(f"{p}.l1", z))
        z = act(lin(f"{p}.l2", z))
        h = T.add(h, z)
    h = T.layer_norm(h, store["hypernet.out.ln.gamma"], store["hypernet.out.ln.beta"])
    h = T.silu(lin("hypernet.out.l1", h))
    return T.silu(lin("hypernet.out.l2", h))


def _split_head_output(flat: Tensor, desc: ModuleDescriptor, cfg: HyperNetConfig) -> LoraFactors:
    """(g, out_len) -> factors (g, d_in, r) and (g, r, d_out); b first, then a,
    both row-major. The split order is part of the on-disk contract."""
    g = flat.shape[0]
    r = cfg.rank
    b_len = r * desc.d_in
    b = T.reshape(T.narrow(flat, 1, 0, b_len), (g, desc.d_in, r))
    a = T.reshape(T.narrow(flat, 1, b_len, r * desc.d_out), (g, r, desc.d_out))
    return LoraFactors(b, a, r, cfg.alpha)


def generate_stacked(
    store: ParamStore,
    cfg: HyperNetConfig,
    descriptors: list[ModuleDescriptor],
    task_ids: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> dict:
    """Factor stacks for several tasks at once.

    Returns {flat_index: LoraFactors} where factor tensors carry a leading
    axis over ``task_ids``. One trunk evaluation covers all (task, module)
    pairs; per-module heads then split out their slices.
    """
    task_ids = np.asarray(task_ids, dtype=np.intp)
    g, m = task_ids.size, len(descriptors)
    e = T.index_rows(store["task_embed.table"], task_ids)                    # (g, d_e)
    e = T.broadcast_to(T.reshape(e, (g, 1, cfg.embed_dim)), (g, m, cfg.embed_dim))
    pos = T.broadcast_to(T.reshape(store["pos_embed.table"], (1, m, cfg.pos_dim)), (g, m, cfg.pos_dim))
    x = T.reshape(T.concat([e, pos], axis=2), (g * m, cfg.input_dim))
    z = _trunk(store, cfg, x, training, rng)
    z = T.reshape(z, (g, m, cfg.head_in_dim))

    out = {}
    for j, desc in enumerate(descriptors):
        row = T.reshape(T.narrow(z, 1, j, 1), (g, cfg.head_in_dim))
        flat = T.add(T.matmul(row, store[f"hypernet.head{desc.flat_index}.w"]),
                     store[f"hypernet.head{desc.flat_index}.b"])
        out[desc.flat_index] = _split_head_output(flat, desc, cfg)
    return out


def generate(
    store: ParamStore,
    cfg: HyperNetConfig,
    desc: ModuleDescriptor,
    task_index: int,
    n_modules: int,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> LoraFactors:
    """Factor pair for a single (task, module) combination, 2-D shapes."""
    if not 0 <= desc.flat_index < n_modules:
        raise IndexError(f"module index {desc.flat_index} out of range (M={n_modules})")
    e = T.index_rows(store["task_embed.table"], np.array([task_index]))
    p = T.narrow(store["pos_embed.table"], 0, desc.flat_index, 1)
    x = T.concat([e, p], axis=1)
    z = _trunk(store, cfg, x, training, rng)
    flat = T.add(T.matmul(z, store[f"hypernet.head{desc.flat_index}.w"]),
                 store[f"hypernet.head{desc.flat_index}.b"])
    stacked = _split_head_output(flat, desc, cfg)
    return LoraFactors(
        T.reshape(stacked.b, (desc.d_in, cfg.rank)),
        T.reshape(stacked.a, (cfg.rank, desc.d_out)),
        cfg.rank,
        cfg.alpha,
    )


def generate_all(
    store: ParamStore,
    cfg: HyperNetConfig,
    descriptors: list[ModuleDescriptor],
    task_index: int,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> dict:
    """DeltaSet for one task: {flat_index: LoraFactors} with 2-D factors."""
    stacked = generate_stacked(store, cfg, descriptors, np.array([task_index]), training, rng)
    out = {}
    for desc in descriptors:
        f = stacked[desc.flat_index]
        out[desc.flat_index] = LoraFactors(
            T.reshape(f.b, (desc.d_in, cfg.rank)),
            T.reshape(f.a, (cfg.rank, desc.d_out)),
            cfg.rank,
            cfg.alpha,
        )
    return out


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------


def param_count_lora(d_h: int, d: int, r: int) -> int:
    """Final-projection weight cost of generating a rank-r factor pair for one
    square d x d target from a d_h-wide head input: d_h * d * 2r."""
    return d_h * d * 2 * r

def param_count_full(d_h: int, d: int) -> int:
    """Same projection cost if the head regressed the dense d x d update."""
    return d_h * d * d


def head_shape_plan(descriptors: list[ModuleDescriptor], rank: int, head_in_dim: int) -> list[dict]:
    """Per-head parameter shapes without allocating anything — the reference
    configuration's heads would not fit in memory, but their census is exact
    integer arithmetic."""
    plan = []
    for desc in descriptors:
        out_len = head_out_len(desc, rank)
        plan.append({
            "flat_index": desc.flat_index,
            "kind": desc.kind,
            "out_len": out_len,
            "weight_params": head_in_dim * out_len,
            "bias_params": out_len,
        })
    return plan


def heads_closed_form(descriptors: list[ModuleDescriptor], rank: int, head_in_dim: int) -> int:
    return sum(p["weight_params"] + p["bias_params"]
               for p in head_shape_plan(descriptors, rank, head_in_dim))


_COMPONENT_PREFIXES = (
    ("hypernet.head", "heads"),
    ("hypernet.", "trunk"),
    ("task_embed.", "task_embed"),
    ("pos_embed.", "pos_embed"),
    ("shared_lora.", "shared_lora"),
    ("heads.", "classifier_heads"),
    ("backbone.", "backbone"),
)


def census(store: ParamStore) -> dict:
    """Exact per-component parameter counts. Trainable components are counted
    from live arrays; the frozen backbone is reported separately."""
    counts: dict[str, int] = {}
    for path, tensor in store.items():
        for prefix, component in _COMPONENT_PREFIXES:
            if path.startswith(prefix):
                counts[component] = counts.get(component, 0) + tensor.data.size
                break
        else:
            raise ValueError(f"parameter path outside the known components: {path}")
    counts["trainable_total"] = store.n_params(trainable_only=True)
    return counts
