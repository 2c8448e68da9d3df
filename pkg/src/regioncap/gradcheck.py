"""Central finite-difference verification of analytic gradients.

All checks run on a float64 tape (callers wrap in ``precision("float64")``
or use `run_suite`, which does).  The numeric side perturbs parameter
entries in place and rebuilds the forward graph, so it is independent of
the reverse-mode path it validates.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward, precision

DEFAULT_STEP = 1e-4
DEFAULT_TOL = 1e-3


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst-case elementwise |a-n| / max(1, |a|, |n|)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric) / denom))


def numeric_gradient(build_loss: Callable[[], Tensor], param: Tensor,
                     h: float = DEFAULT_STEP, coords=None) -> np.ndarray:
    """Central differences of the scalar loss w.r.t. `param`.

    `coords` restricts the estimate to a subset of flat indices (the rest
    of the returned array is nan and must be compared only at `coords`).
    """
    flat = param.data.reshape(-1)
    if coords is None:
        coords = range(flat.size)
        out = np.zeros(flat.size, dtype=np.float64)
    else:
        out = np.full(flat.size, np.nan, dtype=np.float64)
    for i in coords:
        saved = flat[i]
        flat[i] = saved + h
        up = build_loss().item()
        flat[i] = saved - h
        down = build_loss().item()
        flat[i] = saved
        out[i] = (up - down) / (2.0 * h)
    return out.reshape(param.shape)


def check_gradients(build_loss: Callable[[], Tensor], params: Mapping[str, Tensor],
                    h: float = DEFAULT_STEP, coords_per_tensor: int | None = None,
                    rng: np.random.Generator | None = None) -> float:
    """Compare analytic and numeric gradients for every trainable parameter.

    When `coords_per_tensor` is set, each tensor is probed at that many
    randomly sampled entries instead of all of them (for composed graphs
    where the full sweep is too slow).  Returns the worst relative error.
    """
    analytic = backward(build_loss(), params)
    worst = 0.0
    for name, p in params.items():
        if not p.requires_grad:
            continue
        size = p.data.size
        if coords_per_tensor is None or coords_per_tensor >= size:
            coords = None
        else:
            if rng is None:
                raise ValueError("sampled coordinates need an rng")
            coords = sorted(rng.choice(size, size=coords_per_tensor, replace=False).tolist())
        numeric = numeric_gradient(build_loss, p, h=h, coords=coords)
        a = analytic[name].data
        if coords is None:
            err = max_relative_error(a, numeric)
        else:
            flat_a = a.reshape(-1)[coords]
            flat_n = numeric.reshape(-1)[coords]
            err = max_relative_error(flat_a, flat_n)
        worst = max(worst, err)
    return worst
