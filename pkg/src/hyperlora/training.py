"""Multi-task training: sampling protocol, objective, optimizer, loop.

Each training sample contributes one task per step — drawn uniformly from its
non-missing labels — and one binary cross-entropy term on that task's logit.
The logit path: slice triplets through the adapted backbone, mean-pool the
per-triplet features, then the sampled task's linear head. Two variants share
this pipeline and differ only in where adapter factors come from:

* ``hyperct``: factors are generated per task by the conditioning network, so
  gradients flow into the trunk, the task/position embeddings, and the heads.
* ``ew_baseline``: one directly-trained factor pair per module, shared by all
  tasks; gradients flow into those factors and the classification heads.

The backbone is frozen in both. All randomness comes from generators derived
from ``(seed, stream)`` integer sequences, giving bitwise-reproducible runs:
stream 0 seeds parameter initialization (backbone/trunk/heads/shared factors
get sub-streams, so both variants start from the same backbone at equal
seeds), stream 1 drives task sampling, stream 2 dropout, stream 3 shuffling.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import backbone as bb
from . import datagen as dg
from . import evaluation as ev
from . import hypernet as hn
from . import tensor as T
from .errors import DataError, NumericError

VARIANTS = ("hyperct", "ew_baseline")

_STREAM_INIT = 0
_STREAM_TASKS = 1
_STREAM_DROPOUT = 2
_STREAM_SHUFFLE = 3
_SUB_BACKBONE = 0
_SUB_HYPERNET = 1
_SUB_HEADS = 2
_SUB_SHARED = 3


@dataclass
class TrainConfig:
    seed: int
    epochs: int = 30
    batch_size: int = 8
    lr: float = 3e-4
    weight_decay: float = 0.0
    lr_decay_factor: float = 0.1
    lr_decay_every_epochs: int = 15
    variant: str = "hyperct"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ValueError("lr_decay_factor must lie in (0, 1]")
        if self.lr_decay_every_epochs < 1:
            raise ValueError("lr_decay_every_epochs must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every_epochs)


@dataclass
class ModelBundle:
    store: T.ParamStore
    backbone_cfg: bb.BackboneConfig
    hyper_cfg: hn.HyperNetConfig
    descriptors: list
    n_tasks: int
    variant: str


def build_model(backbone_cfg: bb.BackboneConfig, hyper_cfg: hn.HyperNetConfig,
                n_tasks: int, variant: str, seed: int,
                dtype=np.float32) -> ModelBundle:
    """Assemble a fresh model. Both variants share the frozen backbone drawn
    from the same stream, so at equal seeds they differ only in adapter
    machinery. Classification heads start at zero, pinning the first-step
    loss to ln 2 per sample."""
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    if n_tasks < 1:
        raise ValueError("need at least one task")
    store = T.ParamStore()
    descriptors = bb.enumerate_target_modules(backbone_cfg)
    bb.build_backbone(store, backbone_cfg,
                      np.random.default_rng([seed, _STREAM_INIT, _SUB_BACKBONE]), dtype)
    if variant == "hyperct":
        hn.build_hypernet(store, hyper_cfg, descriptors, n_tasks,
                          np.random.default_rng([seed, _STREAM_INIT, _SUB_HYPERNET]), dtype)
    else:
        hn.build_shared_lora(store, descriptors, hyper_cfg.rank,
                             np.random.default_rng([seed, _STREAM_INIT, _SUB_SHARED]), dtype)
    d = backbone_cfg.hidden_dim
    for k in range(n_tasks):
        store.add(f"heads.task{k}.w", np.zeros((d, 1), dtype=dtype), trainable=True)
        store.add(f"heads.task{k}.b", np.zeros((1,), dtype=dtype), trainable=True)
    return ModelBundle(store, backbone_cfg, hyper_cfg, descriptors, n_tasks, variant)


# ---------------------------------------------------------------------------
# sampling and the objective
# ---------------------------------------------------------------------------


def sample_task(labels_row, rng: np.random.Generator) -> int:
    """Uniform draw over the row's non-missing label positions."""
    row = np.asarray(labels_row)
    avail = np.nonzero(row != -1)[0]
    if len(avail) == 0:
        raise DataError("sample has no recorded label to train on")
    return int(avail[rng.integers(0, len(avail))])


def _batch_deltas(bundle: ModelBundle, tasks: np.ndarray, n_triplets: int,
                  training: bool, dropout_rng) -> dict:
    """Adapter factors aligned with the flattened (sample x triplet) axis."""
    if bundle.variant == "ew_baseline":
        return hn.shared_lora_deltas(bundle.store, bundle.hyper_cfg, bundle.descriptors)
    stacked = hn.generate_stacked(bundle.store, bundle.hyper_cfg, bundle.descriptors,
                                  tasks, training=training, rng=dropout_rng)
    rep = np.repeat(np.arange(len(tasks)), n_triplets)
    out = {}
    for m, f in stacked.items():
        out[m] = type(f)(
            T.index_rows(f.b, rep), T.index_rows(f.a, rep), f.rank, f.alpha
        )
    return out


def pooled_features(bundle: ModelBundle, volumes: np.ndarray, tasks: np.ndarray,
                    training: bool = False, dropout_rng=None) -> T.Tensor:
    """(N, H, W, Z) volumes -> (N, D) features: every slice triplet runs the
    adapted backbone and the per-triplet class features are mean-pooled."""
    volumes = np.asarray(volumes)
    if volumes.dtype != np.float64:  # keep the wide-precision analysis path wide
        volumes = volumes.astype(np.float32, copy=False)
    trips = dg.triplets_batch(volumes)
    n, n_trip = trips.shape[:2]
    flat = trips.reshape(n * n_trip, *trips.shape[2:])
    patches = T.Tensor(
        bb.extract_patches_batch(flat, bundle.backbone_cfg.patch_size),
        requires_grad=False,
    )
    deltas = _batch_deltas(bundle, tasks, n_trip, training, dropout_rng)
    pooled = bb.forward_pooled(bundle.store, bundle.backbone_cfg, patches, deltas)
    d = bundle.backbone_cfg.hidden_dim
    return T.tmean(T.reshape(pooled, (n, n_trip, d)), axis=1)


def head_logits(bundle: ModelBundle, feats: T.Tensor, task: int) -> T.Tensor:
    w = bundle.store[f"heads.task{task}.w"]
    b = bundle.store[f"heads.task{task}.b"]
    n = feats.shape[0]
    return T.reshape(T.add(T.matmul(feats, w), b), (n,))


def loss_for_batch(bundle: ModelBundle, volumes: np.ndarray, label_rows: np.ndarray,
                   task_rng: np.random.Generator, dropout_rng=None,
                   training: bool = True) -> tuple[T.Tensor, np.ndarray]:
    """Mean BCE over the batch, one sampled task per sample. Returns the
    scalar loss tensor and the drawn task indices."""
    label_rows = np.asarray(label_rows)
    n = len(label_rows)
    if n == 0:
        raise ValueError("batch must be non-empty")
    tasks = np.array([sample_task(row, task_rng) for row in label_rows], dtype=np.intp)
    feats = pooled_features(bundle, volumes, tasks, training, dropout_rng)

    total = None
    for k in sorted(set(tasks.tolist())):
        idx = np.nonzero(tasks == k)[0]
        sub = T.index_rows(feats, idx)
        logits = head_logits(bundle, sub, k)
        targets = label_rows[idx, k].astype(np.float32)
        part = T.tsum(T.bce_with_logits(logits, targets))
        total = part if total is None else T.add(total, part)
    return T.scale(total, 1.0 / n), tasks


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamW:
    """Adam with bias correction and decoupled weight decay. The decay term
    lr * wd * param comes off the pre-step value, separately from the moment
    update. Only trainable store entries may receive gradients."""

    def __init__(self, store: T.ParamStore, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.weight_decay = float(weight_decay)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, grads: dict, lr: float) -> None:
        trainable = set(self.store.trainable_paths())
        for path in grads:
            if path not in trainable:
                raise ValueError(f"gradient supplied for frozen or unknown parameter: {path}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for path in sorted(trainable):
            p = self.store[path].data
            g = grads.get(path)
            if g is None:
                g = np.zeros_like(p)
            m = self._m.setdefault(path, np.zeros_like(p))
            v = self._v.setdefault(path, np.zeros_like(p))
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            decay = self.weight_decay * p if self.weight_decay else 0.0
            p -= (lr * (update + decay)).astype(p.dtype)


# ---------------------------------------------------------------------------
# validation metrics and scoring
# ---------------------------------------------------------------------------


def _task_features(bundle: ModelBundle, volumes: np.ndarray, task: int,
                   chunk: int = 64) -> np.ndarray:
    """Inference features for one task's adapter over many volumes."""
    outs = []
    with T.no_grad():
        if bundle.variant == "ew_baseline":
            deltas = hn.shared_lora_deltas(bundle.store, bundle.hyper_cfg,
                                           bundle.descriptors)
        else:
            deltas = hn.generate_all(bundle.store, bundle.hyper_cfg,
                                     bundle.descriptors, task)
        for start in range(0, len(volumes), chunk):
            sel = volumes[start:start + chunk]
            trips = dg.triplets_batch(np.asarray(sel, dtype=np.float32))
            n, n_trip = trips.shape[:2]
            flat = trips.reshape(n * n_trip, *trips.shape[2:])
            patches = T.Tensor(
                bb.extract_patches_batch(flat, bundle.backbone_cfg.patch_size),
                requires_grad=False,
            )
            pooled = bb.forward_pooled(bundle.store, bundle.backbone_cfg, patches, deltas)
            d = bundle.backbone_cfg.hidden_dim
            feats = T.tmean(T.reshape(pooled, (n, n_trip, d)), axis=1)
            outs.append(feats.data)
    return np.concatenate(outs) if outs else np.zeros((0, bundle.backbone_cfg.hidden_dim))


def task_scores(bundle: ModelBundle, volumes: np.ndarray, task: int) -> np.ndarray:
    """Raw logits for one task over the given volumes."""
    feats = _task_features(bundle, volumes, task)
    with T.no_grad():
        logits = head_logits(bundle, T.Tensor(feats.astype(np.float32), requires_grad=False), task)
    return logits.data.astype(np.float64)


def validation_metrics(bundle: ModelBundle, volumes: np.ndarray,
                       label_rows: np.ndarray) -> tuple[list, float | None]:
    """Per-task AUC over non-missing labels (None where undefined) and the
    unweighted mean over tasks carrying both classes."""
    label_rows = np.asarray(label_rows)
    per_task: list = []
    for k in range(bundle.n_tasks):
        mask = label_rows[:, k] >= 0
        y = label_rows[mask, k]
        if mask.sum() == 0 or y.min() == y.max():
            per_task.append(None)
            continue
        scores = task_scores(bundle, volumes[mask], k)
        per_task.append(ev.roc_auc(scores, y))
    defined = [a for a in per_task if a is not None]
    mean = float(np.mean(defined)) if defined else None
    return per_task, mean


def score_rows(bundle: ModelBundle, volumes: np.ndarray, label_rows: np.ndarray,
               ids: list) -> list[dict]:
    """Score-file records covering every non-missing (sample, task) pair,
    task-major for a stable order."""
    label_rows = np.asarray(label_rows)
    rows = []
    for k in range(bundle.n_tasks):
        mask = label_rows[:, k] >= 0
        if mask.sum() == 0:
            continue
        scores = task_scores(bundle, volumes[mask], k)
        for pos, i in enumerate(np.nonzero(mask)[0]):
            rows.append({
                "sample_id": str(ids[i]),
                "task": int(k),
                "score": float(scores[pos]),
                "label": int(label_rows[i, k]),
            })
    return rows


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    bundle: ModelBundle          # holds the best-epoch parameters
    log: list = field(default_factory=list)
    best_epoch: int = -1         # -1 means "initialization"
    best_val_auc: float | None = None
    rng_state: dict = field(default_factory=dict)


def _snapshot(store: T.ParamStore) -> dict:
    return {p: t.data.copy() for p, t in store.items()}


def _restore(store: T.ParamStore, snap: dict) -> None:
    for p, arr in snap.items():
        store[p].data[...] = arr


def metrics_jsonl(log: list) -> str:
    return "".join(json.dumps(row, sort_keys=True) + "\n" for row in log)


def train(bundle: ModelBundle, cfg: TrainConfig,
          train_volumes: np.ndarray, train_labels: np.ndarray,
          val_volumes: np.ndarray, val_labels: np.ndarray) -> TrainResult:
    """Run the full loop and leave the best-validation parameters in the
    bundle. Selection: highest mean validation AUC, strict improvement, so
    the earliest epoch wins ties; with zero epochs the initialization is the
    result."""
    train_labels = np.asarray(train_labels)
    val_labels = np.asarray(val_labels)
    if len(train_volumes) == 0 or len(val_volumes) == 0:
        raise DataError("training needs non-empty train and validation splits")
    if train_labels.shape[1] != bundle.n_tasks or val_labels.shape[1] != bundle.n_tasks:
        raise DataError("label width disagrees with the model's task count")

    opt = AdamW(bundle.store, weight_decay=cfg.weight_decay)
    task_rng = np.random.default_rng([cfg.seed, _STREAM_TASKS])
    dropout_rng = np.random.default_rng([cfg.seed, _STREAM_DROPOUT])
    shuffle_rng = np.random.default_rng([cfg.seed, _STREAM_SHUFFLE])

    best_snap = _snapshot(bundle.store)
    best_epoch, best_val = -1, None
    log: list = []
    n = len(train_volumes)

    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        perm = shuffle_rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            sel = perm[start:start + cfg.batch_size]
            loss, _ = loss_for_batch(
                bundle, train_volumes[sel], train_labels[sel],
                task_rng, dropout_rng, training=True,
            )
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            loss.backward()
            opt.step(bundle.store.grads(), lr)
            bundle.store.zero_grad()
            loss_sum += value * len(sel)

        per_task, val_mean = validation_metrics(bundle, val_volumes, val_labels)
        log.append({
            "epoch": epoch,
            "lr": lr,
            "train_loss": loss_sum / n,
            "val_auc_per_task": per_task,
            "val_auc_mean": val_mean,
        })
        if val_mean is not None and (best_val is None or val_mean > best_val):
            best_val = val_mean
            best_epoch = epoch
            best_snap = _snapshot(bundle.store)

    _restore(bundle.store, best_snap)
    return TrainResult(
        bundle=bundle,
        log=log,
        best_epoch=best_epoch,
        best_val_auc=best_val,
        rng_state={
            "tasks": task_rng.bit_generator.state,
            "dropout": dropout_rng.bit_generator.state,
            "shuffle": shuffle_rng.bit_generator.state,
        },
    )
