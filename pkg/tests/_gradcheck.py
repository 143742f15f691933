"""Finite-difference gradient oracle shared by the objective tests.

Central differences with h=1e-5 on every logit entry, compared against
the analytic gradients of a LossResult. The comparison metric is the
max-norm relative error of the full gradient block.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

H = 1e-5


def fd_block(loss_of: Callable[[np.ndarray], float], z: np.ndarray) -> np.ndarray:
    """Central-difference gradient of a scalar loss w.r.t. one logit block."""
    g = np.zeros_like(z)
    it = np.nditer(z, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        zp = z.copy()
        zp[idx] += H
        zm = z.copy()
        zm[idx] -= H
        g[idx] = (loss_of(zp) - loss_of(zm)) / (2.0 * H)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(), np.abs(numeric).max())
    if scale == 0.0:
        return float(np.abs(analytic - numeric).max())
    return float(np.abs(analytic - numeric).max() / scale)


def check_pair_gradients(
    loss_fn: Callable,
    logits_in: np.ndarray,
    logits_out: np.ndarray | None,
) -> float:
    """Worst relative error across the ID and (optional) OOD blocks.

    loss_fn(z_in, z_out) must return a LossResult; z_out is ignored for
    single-block objectives.
    """
    result = loss_fn(logits_in, logits_out)
    errs = [
        rel_error(
            result.d_logits_in,
            fd_block(lambda z: loss_fn(z, logits_out).loss, logits_in),
        )
    ]
    if logits_out is not None:
        errs.append(
            rel_error(
                result.d_logits_out,
                fd_block(lambda z: loss_fn(logits_in, z).loss, logits_out),
            )
        )
    return max(errs)
