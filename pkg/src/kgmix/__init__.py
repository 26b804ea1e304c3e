"""kgmix: bilinear knowledge-graph link predictors with softmax or
mixture-of-softmaxes output layers, plus rank analysis of the
log-probability matrices they can express."""

import os as _os

# honor the thread cap before numpy is first imported anywhere below
_threads = _os.environ.get("KGMIX_NUM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from . import autodiff, evaluate, graph, linalg, models, mos, theory, train

__all__ = [
    "autodiff",
    "evaluate",
    "graph",
    "linalg",
    "models",
    "mos",
    "theory",
    "train",
]

__version__ = "0.1.0"
