"""Ranking metrics, bootstrap intervals, and decision-curve analysis.

Scores live in task-grouped parallel arrays (score, binary label), built from
JSON-lines score files of ``{sample_id, task, score, label}`` records. AUC is
the tied-rank Mann-Whitney statistic; confidence intervals come from a
percentile bootstrap whose per-iteration RNG streams depend only on
``(seed, iteration)`` so any execution order reproduces the same interval.
Decision curves follow the standard net-benefit construction
``TP/N - (FP/N) * t/(1-t)`` with the positive call made at ``score >= t``;
model scores entering a curve are probabilities (map logits through
:func:`sigmoid_map` first).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from .errors import DataError

DCA_T_LO = 0.05
DCA_T_HI = 0.80
DCA_STEPS = 76


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative, ties
    counted one half (Mann-Whitney through average ranks)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be parallel 1-D arrays")
    if not np.isin(y, (0, 1)).all():
        raise DataError("labels must be 0 or 1")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC needs at least one positive and one negative")
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _seed_seq(seed) -> list:
    if isinstance(seed, (tuple, list)):
        return [int(v) for v in seed]
    return [int(seed)]


def bootstrap_auc_ci(scores, labels, iters: int, seed) -> tuple[float, float]:
    """Percentile 95% interval over bootstrap resamples. Resamples that lose
    one of the classes are skipped; more than half skipped is an error.
    Iteration i draws from its own stream seeded by (seed..., i), so the
    result is independent of evaluation order."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    roc_auc(s, y)  # validates shapes, labels, and class presence
    if iters < 1:
        raise ValueError("iters must be >= 1")
    base = _seed_seq(seed)
    n = len(s)
    vals = []
    skipped = 0
    for i in range(iters):
        rng = np.random.default_rng(base + [i])
        idx = rng.integers(0, n, n)
        yi = y[idx]
        if yi.min() == yi.max():
            skipped += 1
            continue
        vals.append(roc_auc(s[idx], yi))
    if skipped * 2 > iters:
        raise DataError(
            f"bootstrap unstable: {skipped}/{iters} resamples lost a class"
        )
    lo, hi = np.percentile(np.asarray(vals, dtype=np.float64), [2.5, 97.5])
    return float(lo), float(hi)


# ---------------------------------------------------------------------------
# decision curves
# ---------------------------------------------------------------------------


@dataclass
class NetBenefitCurve:
    thresholds: np.ndarray
    nb_model: np.ndarray
    nb_treat_all: np.ndarray
    nb_treat_none: np.ndarray

    def rows(self):
        for i in range(len(self.thresholds)):
            yield (
                float(self.thresholds[i]),
                float(self.nb_model[i]),
                float(self.nb_treat_all[i]),
                float(self.nb_treat_none[i]),
            )


def _check_probs(p: np.ndarray) -> None:
    if not np.isfinite(p).all():
        raise DataError("probabilities must be finite")
    if p.min() < 0.0 or p.max() > 1.0:
        raise ValueError("decision curves need probabilities in [0, 1]")


def net_benefit(probs, labels, t: float) -> float:
    """Net benefit of calling positive at probability >= t."""
    if not 0.0 < t < 1.0:
        raise ValueError("threshold must lie strictly inside (0, 1)")
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    if p.shape != y.shape or p.ndim != 1 or len(p) == 0:
        raise ValueError("probs and labels must be parallel non-empty 1-D arrays")
    if not np.isin(y, (0, 1)).all():
        raise DataError("labels must be 0 or 1")
    _check_probs(p)
    called = p >= t
    n = float(len(p))
    tp = float(np.count_nonzero(called & (y == 1)))
    fp = float(np.count_nonzero(called & (y == 0)))
    return tp / n - (fp / n) * (t / (1.0 - t))


def threshold_grid(t_lo: float = DCA_T_LO, t_hi: float = DCA_T_HI,
                   steps: int = DCA_STEPS) -> np.ndarray:
    if not 0.0 < t_lo < t_hi < 1.0:
        raise ValueError("need 0 < t_lo < t_hi < 1")
    if steps < 2:
        raise ValueError("a threshold grid needs at least 2 points")
    return np.linspace(t_lo, t_hi, steps)


def dca_curve(probs, labels, t_lo: float = DCA_T_LO, t_hi: float = DCA_T_HI,
              steps: int = DCA_STEPS) -> NetBenefitCurve:
    grid = threshold_grid(t_lo, t_hi, steps)
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    pi = float(np.mean(y == 1))
    nb_model = np.array([net_benefit(p, y, float(t)) for t in grid])
    nb_all = pi - (1.0 - pi) * grid / (1.0 - grid)
    nb_none = np.zeros_like(grid)
    return NetBenefitCurve(grid, nb_model, nb_all, nb_none)


def sigmoid_map(scores) -> np.ndarray:
    """Logits to probabilities for decision-curve consumption."""
    return expit(np.asarray(scores, dtype=np.float64))


# ---------------------------------------------------------------------------
# score files and per-task summaries
# ---------------------------------------------------------------------------


def write_scores(path, rows) -> None:
    with open(path, "w") as fh:
        for row in rows:
            rec = {
                "sample_id": str(row["sample_id"]),
                "task": int(row["task"]),
                "score": float(row["score"]),
                "label": int(row["label"]),
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_scores(path) -> list[dict]:
    rows = []
    try:
        fh = open(path)
    except OSError as exc:
        raise DataError(f"cannot open score file: {exc}") from exc
    with fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{ln}: score line is not valid JSON") from exc
            missing = {"sample_id", "task", "score", "label"} - set(row)
            if missing:
                raise DataError(f"{path}:{ln}: score record missing {sorted(missing)}")
            if row["label"] not in (0, 1):
                raise DataError(f"{path}:{ln}: label must be 0 or 1")
            score = float(row["score"])
            if not np.isfinite(score):
                raise DataError(f"{path}:{ln}: score is not finite")
            rows.append({
                "sample_id": str(row["sample_id"]),
                "task": int(row["task"]),
                "score": score,
                "label": int(row["label"]),
            })
    return rows


def group_scores(rows) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    by_task: dict[int, list] = {}
    for row in rows:
        by_task.setdefault(int(row["task"]), []).append((row["score"], row["label"]))
    out = {}
    for task in sorted(by_task):
        pairs = by_task[task]
        s = np.array([p[0] for p in pairs], dtype=np.float64)
        y = np.array([p[1] for p in pairs], dtype=np.int64)
        out[task] = (s, y)
    return out


def evaluate_tasks(rows, iters: int, seed) -> list[dict]:
    """Per-task AUC (and bootstrap CI when iters > 0), tasks in ascending id
    order. Every task in the input must carry both classes."""
    out = []
    for task, (s, y) in group_scores(rows).items():
        if y.min() == y.max():
            raise DataError(f"task {task} has a single label class")
        auc = roc_auc(s, y)
        lo = hi = None
        if iters > 0:
            lo, hi = bootstrap_auc_ci(s, y, iters, _seed_seq(seed) + [task])
        out.append({"task": task, "auc": auc, "ci_lo": lo, "ci_hi": hi, "n": int(len(s))})
    if not out:
        raise DataError("score file holds no records")
    return out


def _cell(v) -> str:
    return "" if v is None else repr(float(v))


def eval_csv(summaries) -> str:
    lines = ["task,auc,ci_lo,ci_hi,n"]
    for row in summaries:
        lines.append(
            f"{row['task']},{_cell(row['auc'])},{_cell(row['ci_lo'])},"
            f"{_cell(row['ci_hi'])},{row['n']}"
        )
    return "\n".join(lines) + "\n"


def dca_csv(curve: NetBenefitCurve) -> str:
    lines = ["threshold,nb_model,nb_treat_all,nb_treat_none"]
    for t, m, a, z in curve.rows():
        lines.append(f"{t!r},{m!r},{a!r},{z!r}")
    return "\n".join(lines) + "\n"
