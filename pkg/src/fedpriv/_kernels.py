"""Hot loops shared by the transcript builders and the membership audits.

Every kernel exists twice: a numba ``@njit`` version and a plain numpy
version with the same signature. The active backend is chosen once at import
time from the ``FEDPRIV_BACKEND`` environment variable (``numba`` or
``numpy``); ``FEDPRIV_DISABLE_NUMBA=1`` forces numpy. When numba is missing
the numpy versions are used silently.

Kernels never draw random numbers, so both backends consume identical
streams and differ at most in the last floating point bits of reductions.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba as nb

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    nb = None
    HAS_NUMBA = False


def _requested_backend() -> str:
    if os.environ.get("FEDPRIV_DISABLE_NUMBA", "") not in ("", "0"):
        return "numpy"
    choice = os.environ.get("FEDPRIV_BACKEND", "numba").strip().lower()
    if choice not in ("numba", "numpy"):
        raise ValueError(f"FEDPRIV_BACKEND must be 'numba' or 'numpy', got {choice!r}")
    if choice == "numba" and not HAS_NUMBA:
        return "numpy"
    return choice


BACKEND = _requested_backend()


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------


def sorted_observation_sums_numpy(x: np.ndarray) -> np.ndarray:
    """Sum ``x[j, :, c]`` over observations in ascending value order.

    Sorting first makes the result independent of observation order, bit for
    bit, which the per-server statistic relies on.
    """
    ordered = np.sort(x, axis=1)
    acc = ordered[:, 0, :].copy()
    for i in range(1, ordered.shape[1]):
        acc += ordered[:, i, :]
    return acc


def clipped_observation_sums_numpy(x: np.ndarray, tau: float) -> np.ndarray:
    """Return ``sum_i clip(x[j, i, c], -tau, tau)`` with shape ``(m, d)``."""
    clipped = np.clip(x, -tau, tau)
    acc = clipped[:, 0, :].copy()
    for i in range(1, clipped.shape[1]):
        acc += clipped[:, i, :]
    return acc


def max_leave_one_out_inner_numpy(x: np.ndarray) -> float:
    """Return ``max_i |<x_i, sum_{k != i} x_k>|`` for an ``(n, d)`` block."""
    total = x.sum(axis=0)
    inner = x @ total - np.einsum("ij,ij->i", x, x)
    return float(np.max(np.abs(inner)))


def subset_norm_excess_numpy(
    x: np.ndarray, members: np.ndarray, offsets: np.ndarray, slack_per_member: float
) -> float:
    """Largest ``| ||sum_J x_i||^2 - k d | - k * slack`` over the listed subsets.

    Subset ``t`` is ``members[offsets[t]:offsets[t + 1]]``. A positive return
    value means at least one subset violates its bound.
    """
    d = x.shape[1]
    worst = -np.inf
    for t in range(offsets.shape[0] - 1):
        idx = members[offsets[t] : offsets[t + 1]]
        k = idx.shape[0]
        v = x[idx].sum(axis=0)
        excess = abs(float(v @ v) - k * d) - k * slack_per_member
        worst = max(worst, excess)
    return float(worst)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @nb.njit(cache=True)
    def sorted_observation_sums_numba(x):
        m, n, d = x.shape
        out = np.empty((m, d))
        col = np.empty(n)
        for j in range(m):
            for c in range(d):
                for i in range(n):
                    col[i] = x[j, i, c]
                col.sort()
                acc = col[0]
                for i in range(1, n):
                    acc += col[i]
                out[j, c] = acc
        return out

    @nb.njit(cache=True)
    def clipped_observation_sums_numba(x, tau):
        m, n, d = x.shape
        out = np.zeros((m, d))
        for j in range(m):
            for i in range(n):
                for c in range(d):
                    v = x[j, i, c]
                    if v > tau:
                        v = tau
                    elif v < -tau:
                        v = -tau
                    out[j, c] += v
        return out

    @nb.njit(cache=True)
    def max_leave_one_out_inner_numba(x):
        n, d = x.shape
        total = np.zeros(d)
        for i in range(n):
            for c in range(d):
                total[c] += x[i, c]
        worst = 0.0
        for i in range(n):
            acc = 0.0
            for c in range(d):
                acc += x[i, c] * (total[c] - x[i, c])
            if abs(acc) > worst:
                worst = abs(acc)
        return worst

    @nb.njit(cache=True)
    def subset_norm_excess_numba(x, members, offsets, slack_per_member):
        n, d = x.shape
        worst = -np.inf
        v = np.empty(d)
        for t in range(offsets.shape[0] - 1):
            v[:] = 0.0
            k = offsets[t + 1] - offsets[t]
            for r in range(offsets[t], offsets[t + 1]):
                i = members[r]
                for c in range(d):
                    v[c] += x[i, c]
            sq = 0.0
            for c in range(d):
                sq += v[c] * v[c]
            excess = abs(sq - k * d) - k * slack_per_member
            if excess > worst:
                worst = excess
        return worst


def _pick(name: str):
    if BACKEND == "numba":
        return globals()[f"{name}_numba"]
    return globals()[f"{name}_numpy"]


def sorted_observation_sums(x: np.ndarray) -> np.ndarray:
    """Order-independent per-server coordinate sums, shape ``(m, d)``."""
    return _pick("sorted_observation_sums")(np.ascontiguousarray(x, dtype=np.float64))


def clipped_observation_sums(x: np.ndarray, tau: float) -> np.ndarray:
    """Per-server sums of coordinates clipped to ``[-tau, tau]``."""
    return _pick("clipped_observation_sums")(
        np.ascontiguousarray(x, dtype=np.float64), float(tau)
    )


def max_leave_one_out_inner(x: np.ndarray) -> float:
    """Largest absolute inner product of an observation with the others."""
    return float(_pick("max_leave_one_out_inner")(np.ascontiguousarray(x, dtype=np.float64)))


def subset_norm_excess(
    x: np.ndarray, members: np.ndarray, offsets: np.ndarray, slack_per_member: float
) -> float:
    """Worst violation margin of the subset norm inequality (positive = violated)."""
    return float(
        _pick("subset_norm_excess")(
            np.ascontiguousarray(x, dtype=np.float64),
            np.ascontiguousarray(members, dtype=np.int64),
            np.ascontiguousarray(offsets, dtype=np.int64),
            float(slack_per_member),
        )
    )
