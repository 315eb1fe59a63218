"""Elementwise cos/sin kernels.

numpy's float64 cos/sin go through scalar libm and dominate the cost of
evaluating empirical characteristic functions over an N x M projection. When
torch is importable its vectorised float64 kernels are used instead (results
agree with libm to within one ulp). Set ``ADALIGN_PURE_NUMPY=1`` to force
the numpy path.
"""

import os

import numpy as np

_torch = None
if not os.environ.get("ADALIGN_PURE_NUMPY"):
    try:
        import torch as _torch

        _torch.set_num_threads(1)
    except ImportError:  # pragma: no cover - depends on environment
        _torch = None

BACKEND = "torch" if _torch is not None else "numpy"

# Below this many elements the conversion overhead outweighs the gain.
_MIN_SIZE = 4096


def _apply(x: np.ndarray, np_fn, torch_fn, out: np.ndarray | None) -> np.ndarray:
    """``out`` may alias ``x`` (in-place evaluation) and must be C-contiguous float64."""
    if _torch is None or x.size < _MIN_SIZE:
        return np_fn(x, out=out)
    x = np.ascontiguousarray(x, dtype=np.float64)
    if out is None:
        out = np.empty_like(x)
    torch_fn(_torch.from_numpy(x), out=_torch.from_numpy(out))
    return out


def cos(x: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    return _apply(x, np.cos, _torch.cos if _torch is not None else None, out)


def sin(x: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    return _apply(x, np.sin, _torch.sin if _torch is not None else None, out)
