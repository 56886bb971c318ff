"""Synthetic multi-task volumes with planted, family-correlated signals.

Each task owns a disjoint region of the volume. "Blob" tasks add a constant
intensity shift inside a small central box when the label is positive;
"texture" tasks always add region-local noise whose standard deviation jumps
between the negative and positive label. Labels are correlated within a task
family through a shared Gaussian factor (weight ``rho``), then thresholded to
hit each task's marginal prevalence. Volumes are z-normalised at generation
time, so every consumer sees zero-mean/unit-variance intensities.

Because regions never overlap, a per-task contrast statistic computed against
the out-of-region background separates the classes perfectly at zero noise —
the emitted rulebook pins that statistic per task and is the learnability
ceiling the training benchmark is judged against.

File formats (normative):
* volume: magic ``HCTV``, version byte, H/W/Z as little-endian uint32, then
  H*W*Z little-endian float32 voxels, slice-major (z outermost), each slice
  row-major.
* label manifest: JSON lines ``{"id": str, "labels": [K ints in {0,1,-1}]}``
  with -1 meaning "not recorded for this sample".
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats as _sp_stats

from .errors import DataError

VOLUME_MAGIC = b"HCTV"
VOLUME_VERSION = 1

_SEED_LABELS = 11
_SEED_NOISE = 12


def _per_task(value, k: int, name: str) -> tuple:
    vals = [value] * k if np.isscalar(value) else list(value)
    if len(vals) != k:
        raise ValueError(f"{name} must be scalar or length {k}")
    return tuple(float(v) for v in vals)


@dataclass
class SyntheticSpec:
    n_samples: int
    n_tasks: int = 6
    family_sizes: tuple = (3, 3)
    prevalence: object = 0.35          # scalar or per-task sequence
    rho: float = 0.6                   # within-family label correlation weight
    missing_rate: object = 0.1        # scalar or per-task sequence
    sigma: float = 0.2                 # background noise level
    height: int = 24
    width: int = 24
    depth: int = 6
    seed: int = 0
    blob_amplitude: float = 1.0
    texture_std_lo: float = 0.0
    texture_std_hi: float = 2.0
    signal_kinds: tuple = ()           # per family; derived when empty

    def __post_init__(self):
        if self.n_samples < 0:
            raise ValueError("n_samples must be >= 0")
        if sum(self.family_sizes) != self.n_tasks:
            raise ValueError("family sizes must sum to the task count")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if min(self.height, self.width) < 12 or self.depth < 1:
            raise ValueError("volume dims too small to place signal regions")
        if not self.signal_kinds:
            self.signal_kinds = tuple("blob" if i % 2 == 0 else "texture"
                                      for i in range(len(self.family_sizes)))
        if len(self.signal_kinds) != len(self.family_sizes):
            raise ValueError("need one signal kind per family")
        for kind in self.signal_kinds:
            if kind not in ("blob", "texture"):
                raise ValueError(f"unknown signal kind: {kind!r}")
        self.prevalence = _per_task(self.prevalence, self.n_tasks, "prevalence")
        self.missing_rate = _per_task(self.missing_rate, self.n_tasks, "missing_rate")
        if any(not 0.0 < p < 1.0 for p in self.prevalence):
            raise ValueError("prevalence entries must lie in (0, 1)")
        if any(not 0.0 <= m < 1.0 for m in self.missing_rate):
            raise ValueError("missing_rate entries must lie in [0, 1)")

    @property
    def task_family(self) -> tuple:
        fam = []
        for f, size in enumerate(self.family_sizes):
            fam.extend([f] * size)
        return tuple(fam)

    @property
    def task_kinds(self) -> tuple:
        return tuple(self.signal_kinds[f] for f in self.task_family)


# ---------------------------------------------------------------------------
# region placement
# ---------------------------------------------------------------------------


def task_regions(spec: SyntheticSpec) -> list[dict]:
    """One disjoint box per task, full depth. Blob boxes tile the central
    area; texture strips hug the borders (top, bottom, left, right)."""
    h, w, z = spec.height, spec.width, spec.depth
    kinds = spec.task_kinds
    n_blob = sum(k == "blob" for k in kinds)
    n_tex = len(kinds) - n_blob
    if n_tex > 4:
        raise ValueError("at most four texture tasks fit on the volume borders")

    strip = max(2, h // 8)
    margin = max(strip + 1, h // 4)
    side = max(3, h // 6)
    span = h - 2 * margin
    grid = 1
    while grid * grid < max(1, n_blob):
        grid += 1
    if span < grid * side:
        raise ValueError("volume too small for the requested number of blob tasks")
    cell = span // grid

    blob_boxes = []
    for i in range(n_blob):
        gy, gx = divmod(i, grid)
        r0 = margin + gy * cell + (cell - side) // 2
        c0 = margin + gx * cell + (cell - side) // 2
        blob_boxes.append(((r0, r0 + side), (c0, c0 + side), (0, z)))
    tex_boxes = [
        ((0, strip), (0, w), (0, z)),
        ((h - strip, h), (0, w), (0, z)),
        ((strip, h - strip), (0, strip), (0, z)),
        ((strip, h - strip), (w - strip, w), (0, z)),
    ][:n_tex]

    regions, bi, ti = [], 0, 0
    for task, kind in enumerate(kinds):
        if kind == "blob":
            box = blob_boxes[bi]
            bi += 1
        else:
            box = tex_boxes[ti]
            ti += 1
        regions.append({"task": task, "kind": kind, "box": [list(b) for b in box]})
    return regions


def _box_slices(box) -> tuple:
    (r0, r1), (c0, c1), (z0, z1) = box
    return slice(r0, r1), slice(c0, c1), slice(z0, z1)


def background_mask(regions: list[dict], shape: tuple) -> np.ndarray:
    mask = np.ones(shape, dtype=bool)
    for reg in regions:
        mask[_box_slices(reg["box"])] = False
    return mask


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def draw_labels(spec: SyntheticSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Returns (labels in {0,1}, visible mask). Labels are thresholded Gaussian
    scores sharing a family factor with weight rho; the mask is i.i.d. per
    task and redrawn until at least one task stays visible."""
    fam = np.asarray(spec.task_family)
    u = rng.standard_normal(len(spec.family_sizes))
    eps = rng.standard_normal(spec.n_tasks)
    score = np.sqrt(spec.rho) * u[fam] + np.sqrt(1.0 - spec.rho) * eps
    cut = _sp_stats.norm.ppf(1.0 - np.asarray(spec.prevalence))
    labels = (score > cut).astype(np.int64)
    for _ in range(1000):
        visible = rng.random(spec.n_tasks) >= np.asarray(spec.missing_rate)
        if visible.any():
            return labels, visible
    raise DataError("could not draw a sample with at least one visible label")


def render_volume(spec: SyntheticSpec, regions: list[dict], labels: np.ndarray,
                  rng: np.random.Generator) -> np.ndarray:
    """Background noise + per-task planted signals, then global z-norm."""
    shape = (spec.height, spec.width, spec.depth)
    vol = spec.sigma * rng.standard_normal(shape)
    for reg in regions:
        sl = _box_slices(reg["box"])
        y = labels[reg["task"]]
        if reg["kind"] == "blob":
            if y == 1:
                vol[sl] += spec.blob_amplitude
        else:
            std = spec.texture_std_hi if y == 1 else spec.texture_std_lo
            vol[sl] += std * rng.standard_normal(vol[sl].shape)
    mu = vol.mean()
    sd = vol.std()
    if sd < 1e-12:
        return (vol - mu).astype(np.float32)
    return ((vol - mu) / sd).astype(np.float32)


def sample_rng(seed: int, index: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng([seed, index, purpose])


def generate_sample(spec: SyntheticSpec, regions: list[dict], index: int):
    """Deterministic (volume, labels-with-missing) for one sample index."""
    labels, visible = draw_labels(spec, sample_rng(spec.seed, index, _SEED_LABELS))
    vol = render_volume(spec, regions, labels, sample_rng(spec.seed, index, _SEED_NOISE))
    recorded = np.where(visible, labels, -1)
    return vol, recorded


# ---------------------------------------------------------------------------
# volume file format
# ---------------------------------------------------------------------------


def save_volume(path, vol: np.ndarray) -> None:
    vol = np.asarray(vol)
    if vol.ndim != 3:
        raise ValueError("volumes are 3-D")
    h, w, z = vol.shape
    if max(h, w, z) >= 2 ** 32:
        raise ValueError("volume dimension overflows the u32 header")
    payload = np.ascontiguousarray(vol.transpose(2, 0, 1).astype("<f4"))
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<B", VOLUME_VERSION))
        fh.write(struct.pack("<III", h, w, z))
        fh.write(payload.tobytes())


def load_volume(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    head = 4 + 1 + 12
    if len(raw) < head:
        raise DataError(f"volume file truncated before header: {path}")
    if raw[:4] != VOLUME_MAGIC:
        raise DataError(f"bad magic in volume file: {path}")
    version = raw[4]
    if version != VOLUME_VERSION:
        raise DataError(f"unsupported volume format version {version}: {path}")
    h, w, z = struct.unpack("<III", raw[5:head])
    expect = h * w * z * 4
    if len(raw) - head != expect:
        raise DataError(
            f"volume payload truncated: expected {expect} bytes, found {len(raw) - head}: {path}"
        )
    flat = np.frombuffer(raw, dtype="<f4", offset=head)
    return np.ascontiguousarray(flat.reshape(z, h, w).transpose(1, 2, 0))


def slice_triplets(vol: np.ndarray) -> list[np.ndarray]:
    """Non-overlapping consecutive slice triplets as (H, W, 3) slabs; a
    trailing remainder of one or two slices is dropped."""
    z = vol.shape[2]
    if z < 3:
        raise DataError(f"need at least 3 slices, volume has {z}")
    return [np.ascontiguousarray(vol[:, :, 3 * i:3 * i + 3]) for i in range(z // 3)]


def triplets_batch(vols: np.ndarray) -> np.ndarray:
    """(N, H, W, Z) -> (N, Z//3, H, W, 3)."""
    n, h, w, z = vols.shape
    if z < 3:
        raise DataError(f"need at least 3 slices, volumes have {z}")
    t = z // 3
    return np.ascontiguousarray(
        vols[:, :, :, :3 * t].reshape(n, h, w, t, 3).transpose(0, 3, 1, 2, 4)
    )


# ---------------------------------------------------------------------------
# cohort generation and the rulebook
# ---------------------------------------------------------------------------


def generate_cohort(spec: SyntheticSpec, out_dir, split: str) -> list[dict]:
    """Write `n_samples` volumes plus the split's label manifest; returns the
    manifest rows. Sample i is fully determined by (seed, i), so cohorts are
    reproducible file-for-file."""
    out = Path(out_dir)
    vol_dir = out / "volumes"
    vol_dir.mkdir(parents=True, exist_ok=True)
    regions = task_regions(spec)
    rows = []
    for i in range(spec.n_samples):
        vol, recorded = generate_sample(spec, regions, i)
        sid = f"{split}-{i:05d}"
        save_volume(vol_dir / f"{sid}.hctv", vol)
        rows.append({"id": sid, "labels": [int(v) for v in recorded]})
    with open(out / f"{split}.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return rows


def read_manifest(path, n_tasks: int | None = None) -> list[dict]:
    rows = []
    seen = set()
    try:
        fh = open(path)
    except OSError as exc:
        raise DataError(f"cannot open manifest: {exc}") from exc
    with fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{ln}: manifest line is not valid JSON") from exc
            if not isinstance(row, dict) or "id" not in row or "labels" not in row:
                raise DataError(f"{path}:{ln}: manifest record needs 'id' and 'labels'")
            if row["id"] in seen:
                raise DataError(f"{path}:{ln}: duplicate sample id {row['id']!r}")
            seen.add(row["id"])
            labels = row["labels"]
            if n_tasks is not None and len(labels) != n_tasks:
                raise DataError(f"{path}:{ln}: expected {n_tasks} labels, found {len(labels)}")
            if any(v not in (-1, 0, 1) for v in labels):
                raise DataError(f"{path}:{ln}: labels must be 0, 1 or -1")
            rows.append({"id": row["id"], "labels": [int(v) for v in labels]})
    return rows


def build_rulebook(spec: SyntheticSpec) -> dict:
    """Per-task oracle statistics. Blob tasks: region mean minus background
    mean. Texture tasks: region std minus background std. Both are invariant
    to the global normalisation shift and share its positive scale."""
    tasks = []
    for reg in task_regions(spec):
        tasks.append({
            "task": reg["task"],
            "statistic": {"kind": f"{reg['kind']}_contrast", "box": reg["box"]},
            "threshold": None,
        })
    return {
        "height": spec.height,
        "width": spec.width,
        "depth": spec.depth,
        "tasks": tasks,
    }


class RulebookScorer:
    """Evaluates the rulebook statistics against volumes."""

    def __init__(self, rulebook: dict):
        self.rulebook = rulebook
        shape = (rulebook["height"], rulebook["width"], rulebook["depth"])
        regions = [{"box": t["statistic"]["box"]} for t in rulebook["tasks"]]
        self._bg = background_mask(regions, shape)

    def score(self, vol: np.ndarray, task_entry: dict) -> float:
        sl = _box_slices(task_entry["statistic"]["box"])
        region = vol[sl].astype(np.float64)
        bg = vol[self._bg].astype(np.float64)
        if task_entry["statistic"]["kind"] == "blob_contrast":
            return float(region.mean() - bg.mean())
        return float(region.std() - bg.std())

    def score_all(self, vol: np.ndarray) -> list[float]:
        return [self.score(vol, t) for t in self.rulebook["tasks"]]


def fill_thresholds(rulebook: dict, stats: np.ndarray, labels: np.ndarray) -> dict:
    """Midpoint thresholds from a labelled cohort: per task, halfway between
    the class-conditional mean statistics (informational — ranking metrics
    never use them)."""
    for entry in rulebook["tasks"]:
        k = entry["task"]
        mask = labels[:, k] >= 0
        y = labels[mask, k]
        s = stats[mask, k]
        if len(np.unique(y)) == 2:
            entry["threshold"] = float((s[y == 1].mean() + s[y == 0].mean()) / 2.0)
    return rulebook


def rulebook_scores(rulebook: dict, rows: list[dict], volumes_dir) -> list[dict]:
    """Score file rows for a manifest, bypassing any model."""
    scorer = RulebookScorer(rulebook)
    out = []
    vol_dir = Path(volumes_dir)
    for row in rows:
        vol = load_volume(vol_dir / f"{row['id']}.hctv")
        stats = scorer.score_all(vol)
        for entry in rulebook["tasks"]:
            k = entry["task"]
            if row["labels"][k] >= 0:
                out.append({
                    "sample_id": row["id"],
                    "task": k,
                    "score": float(stats[k]),
                    "label": int(row["labels"][k]),
                })
    return out
