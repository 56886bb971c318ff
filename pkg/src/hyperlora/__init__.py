"""Task-conditioned low-rank adapter generation for a small vision transformer.

The package trains a hypernetwork that emits per-task LoRA factor pairs for
every attention/MLP linear in a frozen ViT, evaluates the resulting multi-task
screener (ROC-AUC, bootstrap CIs, decision curves), and analyses the geometry
of the generated adapters (PCA/MDS, hierarchical clustering).

``HYPERLORA_THREADS`` caps internal parallelism (default 1 so repeated runs
are bit-identical). It must be honoured before numpy first initialises its
BLAS thread pool, which is why the cap is applied here at import time.
"""

import os as _os

_threads = _os.environ.get("HYPERLORA_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, _threads)


def thread_cap() -> int:
    """Parallelism budget from ``HYPERLORA_THREADS`` (minimum 1)."""
    try:
        return max(1, int(_os.environ.get("HYPERLORA_THREADS", "1")))
    except ValueError:
        return 1


__version__ = "0.1.0"
