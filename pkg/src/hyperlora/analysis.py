"""Weight-space analysis of per-task generated adapters.

Task vectors are flattened adapter weights, one row per task. ``materialized``
mode flattens the scaled products (alpha/r) * B @ A per module — invariant to
the GL(r) gauge freedom of the factor pair — and is the default for distance
work; ``factors`` mode concatenates the raw B then A blocks per module and is
cheaper for very wide configurations.

On top of the task matrix: 2-D PCA (computed through the K x K Gram matrix so
the feature dimension never enters), classical Torgerson MDS, complete-linkage
agglomeration under cosine distance with a deterministic smallest-pair
tie-break, and silhouette-scored selection of the cluster count.
"""

from __future__ import annotations

import numpy as np

from . import hypernet as hn
from . import tensor as T
from .errors import DataError

_SIGN_EPS = 1e-12


# ---------------------------------------------------------------------------
# flattening
# ---------------------------------------------------------------------------


def flatten_factors(factors: dict, mode: str = "materialized") -> np.ndarray:
    """One flat float64 vector from per-module factor pairs, modules in
    ascending flat-index order."""
    if mode not in ("factors", "materialized"):
        raise ValueError(f"unknown flatten mode: {mode!r}")
    chunks = []
    for m in sorted(factors):
        f = factors[m]
        b = np.asarray(f.b.data if isinstance(f.b, T.Tensor) else f.b, dtype=np.float64)
        a = np.asarray(f.a.data if isinstance(f.a, T.Tensor) else f.a, dtype=np.float64)
        if mode == "factors":
            chunks.append(b.reshape(-1))
            chunks.append(a.reshape(-1))
        else:
            chunks.append((f.scale * (b @ a)).reshape(-1))
    return np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.float64)


def task_weight_matrix(store, cfg, descriptors, n_tasks: int,
                       mode: str = "materialized") -> np.ndarray:
    """K x F matrix of flattened generated adapters, one row per task."""
    rows = []
    with T.no_grad():
        for k in range(n_tasks):
            factors = hn.generate_all(store, cfg, descriptors, k)
            rows.append(flatten_factors(factors, mode))
    return np.stack(rows)


# ---------------------------------------------------------------------------
# projections
# ---------------------------------------------------------------------------


def _fix_column_signs(coords: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Flip each embedding column so the first non-negligible entry of its
    reference vector is positive."""
    out = coords.copy()
    for j in range(reference.shape[1]):
        col = reference[:, j]
        nz = np.nonzero(np.abs(col) > _SIGN_EPS)[0]
        if len(nz) and col[nz[0]] < 0:
            out[:, j] = -out[:, j]
    return out


def pca_2d(V: np.ndarray) -> tuple[np.ndarray, tuple[float, float]]:
    """Top-2 principal coordinates and their explained-variance ratios.

    Works through the K x K Gram matrix of centred rows, so cost is set by the
    task count, not the feature width. Component signs follow the first
    non-zero feature-space loading.
    """
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2 or V.shape[0] < 3:
        raise ValueError("PCA needs a matrix with at least 3 rows")
    X = V - V.mean(axis=0, keepdims=True)
    gram = X @ X.T
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    total = float(evals.sum())

    k = V.shape[0]
    coords = np.zeros((k, 2))
    loadings = np.zeros((V.shape[1], 2))
    for j in range(2):
        lam = float(evals[j])
        if lam > _SIGN_EPS * max(1.0, total):
            u = evecs[:, j]
            coords[:, j] = u * np.sqrt(lam)
            loadings[:, j] = X.T @ u / np.sqrt(lam)
    coords = _fix_column_signs(coords, loadings)
    if total <= 0.0:
        ratios = (0.0, 0.0)
    else:
        ratios = (float(evals[0] / total), float(evals[1] / total))
    return coords, ratios


def mds_2d(D: np.ndarray) -> np.ndarray:
    """Classical (Torgerson) 2-D embedding of a symmetric zero-diagonal
    distance matrix: double-centre -1/2 D^2, take the top-2 eigenpairs."""
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ValueError("distance matrix must be square")
    if not np.array_equal(D, D.T):
        raise ValueError("distance matrix must be symmetric")
    if np.abs(np.diag(D)).max() > 0.0:
        raise ValueError("distance matrix needs a zero diagonal")
    k = D.shape[0]
    j = np.eye(k) - np.full((k, k), 1.0 / k)
    b = -0.5 * j @ (D * D) @ j
    b = (b + b.T) / 2.0
    evals, evecs = np.linalg.eigh(b)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]
    coords = np.zeros((k, 2))
    for col in range(2):
        lam = float(evals[col])
        if lam > _SIGN_EPS:
            coords[:, col] = evecs[:, col] * np.sqrt(lam)
    return _fix_column_signs(coords, coords)


# ---------------------------------------------------------------------------
# clustering
# ---------------------------------------------------------------------------


def cosine_distances(V: np.ndarray) -> np.ndarray:
    V = np.asarray(V, dtype=np.float64)
    norms = np.linalg.norm(V, axis=1)
    dead = np.nonzero(norms < 1e-30)[0]
    if len(dead):
        raise DataError(f"zero-norm task vectors at rows {dead.tolist()}")
    unit = V / norms[:, None]
    d = 1.0 - unit @ unit.T
    d = np.clip((d + d.T) / 2.0, 0.0, 2.0)
    np.fill_diagonal(d, 0.0)
    return d


def hierarchical_cluster(V: np.ndarray, distances: np.ndarray | None = None) -> list[tuple]:
    """Complete-linkage agglomeration. Returns K-1 merges as
    (left_id, right_id, height, new_size); original rows are ids 0..K-1 and
    merge t creates id K+t. Equal-height candidates resolve to the smallest
    (left, right) id pair, so the sequence is deterministic."""
    d = cosine_distances(V) if distances is None else np.asarray(distances, dtype=np.float64)
    k = d.shape[0]
    if k < 2:
        raise ValueError("clustering needs at least two rows")
    members = {i: (i,) for i in range(k)}
    merges = []
    next_id = k
    for _ in range(k - 1):
        best = None
        for i in sorted(members):
            for j in sorted(members):
                if j <= i:
                    continue
                height = max(
                    d[p, q] for p in members[i] for q in members[j]
                )
                key = (height, i, j)
                if best is None or key < best:
                    best = key
        height, i, j = best
        merges.append((i, j, float(height), len(members[i]) + len(members[j])))
        members[next_id] = tuple(sorted(members[i] + members[j]))
        del members[i], members[j]
        next_id += 1
    return merges


def cut_clusters(merges: list[tuple], n_rows: int, k: int) -> np.ndarray:
    """Labels from stopping the merge sequence at k clusters, relabelled so
    cluster ids follow each cluster's smallest row index."""
    if not 1 <= k <= n_rows:
        raise ValueError("k must lie in [1, number of rows]")
    members = {i: [i] for i in range(n_rows)}
    next_id = n_rows
    for left, right, _, _ in merges[: n_rows - k]:
        members[next_id] = members.pop(left) + members.pop(right)
        next_id += 1
    groups = sorted((min(rows), rows) for rows in members.values())
    labels = np.empty(n_rows, dtype=np.int64)
    for cid, (_, rows) in enumerate(groups):
        labels[rows] = cid
    return labels


def _silhouette_from_distances(d: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    ids = np.unique(labels)
    if len(ids) < 2:
        raise ValueError("silhouette needs at least two clusters")
    vals = []
    for i in range(len(labels)):
        own = labels == labels[i]
        own_size = int(own.sum())
        if own_size == 1:
            vals.append(0.0)
            continue
        a = d[i, own].sum() / (own_size - 1)  # excludes the zero self-term
        b = min(
            d[i, labels == c].mean() for c in ids if c != labels[i]
        )
        denom = max(a, b)
        vals.append(0.0 if denom == 0.0 else (b - a) / denom)
    return float(np.mean(vals))


def silhouette(V: np.ndarray, labels, distances: np.ndarray | None = None) -> float:
    """Mean silhouette width under cosine distance; singletons contribute 0."""
    d = cosine_distances(V) if distances is None else np.asarray(distances, dtype=np.float64)
    return _silhouette_from_distances(d, np.asarray(labels))


def select_k(V: np.ndarray, k_range=range(2, 9)) -> tuple[int, float, np.ndarray]:
    """Silhouette-maximising cut of the dendrogram over the candidate cluster
    counts (capped below the row count); ties go to the smaller k."""
    V = np.asarray(V, dtype=np.float64)
    n = V.shape[0]
    if n <= 2:
        raise DataError("cluster-count selection needs more than two task vectors")
    ks = sorted(k for k in k_range if 2 <= k < n)
    if not ks:
        raise ValueError("no admissible k in range for this row count")
    d = cosine_distances(V)
    merges = hierarchical_cluster(V, distances=d)
    best = None
    for k in ks:  # ascending, so a strict improvement rule keeps the smaller k on ties
        labels = cut_clusters(merges, n, k)
        score = _silhouette_from_distances(d, labels)
        if best is None or score > best[1]:
            best = (k, score, labels)
    return best


def cluster_report(V: np.ndarray, k_range=range(2, 9)) -> dict:
    """JSON-ready clustering summary: chosen k, its silhouette, per-task
    labels, and the full merge list."""
    k_star, score, labels = select_k(V, k_range)
    merges = hierarchical_cluster(V)
    return {
        "k_star": int(k_star),
        "silhouette": float(score),
        "labels": [int(v) for v in labels],
        "merge_list": [
            {"left": int(l), "right": int(r), "height": float(h), "size": int(s)}
            for l, r, h, s in merges
        ],
    }


def embeddings_csv(coords: np.ndarray) -> str:
    lines = ["task_id,x,y"]
    for i, (x, y) in enumerate(np.asarray(coords, dtype=np.float64)):
        lines.append(f"{i},{float(x)!r},{float(y)!r}")
    return "\n".join(lines) + "\n"


def adjusted_rand_index(labels_a, labels_b) -> float:
    """Chance-corrected agreement between two partitions of the same items,
    from the pair-count contingency table (Hubert & Arabie)."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("partitions must be 1-D and the same length")
    n = len(a)
    if n < 2:
        raise ValueError("adjusted Rand needs at least two items")

    def pairs(x):
        return x * (x - 1) // 2

    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    sum_cells = pairs(table).sum()
    sum_rows = pairs(table.sum(axis=1)).sum()
    sum_cols = pairs(table.sum(axis=0)).sum()
    expected = sum_rows * sum_cols / pairs(n)
    max_index = (sum_rows + sum_cols) / 2.0
    if max_index == expected:  # both partitions trivial (all-one-cluster etc.)
        return 1.0 if sum_cells == expected else 0.0
    return float((sum_cells - expected) / (max_index - expected))
