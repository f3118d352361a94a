"""Classical per-series forecasters used as reference points.

Every method fits on one history window and emits ``T'`` values:
``mean``, ``last``, ``ar``, ``var``, ``es``, ``linear``, ``cyclic`` and
``geostyle``. All fits are closed-form least squares or grid searches, so
results are deterministic.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import InvalidArgumentError

log = logging.getLogger(__name__)

RIDGE = 1e-6
DEFAULT_ORDER = 4
DEFAULT_ALPHA_GRID = tuple(np.round(np.arange(1, 21) * 0.05, 2))
METHODS = ("mean", "last", "ar", "var", "es", "linear", "cyclic", "geostyle")


@dataclass
class BaselineFit:
    method: str
    coefficients: list
    fit_window: tuple

    def __post_init__(self):
        if not np.all(np.isfinite(np.asarray(self.coefficients, dtype=np.float64))):
            raise InvalidArgumentError(f"{self.method}: non-finite coefficients")


def _history(history):
    y = np.asarray(history, dtype=np.float64).ravel()
    if y.size == 0:
        raise InvalidArgumentError("empty history")
    return y


def lstsq(X, y, ridge=RIDGE):
    """Least squares, switching to ridge when ``X`` is rank deficient."""
    if np.linalg.matrix_rank(X) < X.shape[1]:
        log.debug("rank-deficient design %s, ridge %g", X.shape, ridge)
        return np.linalg.solve(X.T @ X + ridge * np.eye(X.shape[1]), X.T @ y)
    return np.linalg.lstsq(X, y, rcond=None)[0]


# -------------------------------------------------------------- mean / last

def forecast_mean(history, T_prime):
    return np.full(T_prime, _history(history).mean())


def forecast_last(history, T_prime):
    return np.full(T_prime, _history(history)[-1])


# ------------------------------------------------------------------- AR / VAR

def _lag_design(Y, p):
    # Y: (k, n). Row for target step t holds [1, Y[:, t-1], Y[:, t-2], ...]
    k, n = Y.shape
    rows = n - p
    X = np.ones((rows, 1 + k * p))
    for lag in range(1, p + 1):
        X[:, 1 + (lag - 1) * k:1 + lag * k] = Y[:, p - lag:n - lag].T
    return X, Y[:, p:].T


def fit_var(Y, p=DEFAULT_ORDER):
    """Per-equation least squares over the lags of all ``k`` series.

    ``coefficients[i]`` is ``[c, A1[i, :], A2[i, :], ...]``. Falls back to an
    independent AR per series when the system would be underdetermined.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    k, n = Y.shape
    if p < 0:
        raise InvalidArgumentError("order must be >= 0")
    if k == 1:
        return BaselineFit("var", [fit_ar(Y[0], p).coefficients], (0, n))
    if n <= k * p + 1 or n - p < 1 + k * p:
        log.info("VAR(%d) on %d series of length %d underdetermined; using AR", p, k, n)
        fits = [fit_ar(Y[i], p) for i in range(k)]
        return BaselineFit("var-ar", [f.coefficients for f in fits], (0, n))
    X, T = _lag_design(Y, p)
    coef = lstsq(X, T)
    return BaselineFit("var", coef.T.tolist(), (0, n))


def forecast_var(fit, Y, T_prime):
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if fit.method == "var-ar":
        return np.stack([forecast_ar(BaselineFit("ar", c, fit.fit_window), Y[i], T_prime)
                         for i, c in enumerate(fit.coefficients)])
    C = np.asarray(fit.coefficients, dtype=np.float64)
    k = Y.shape[0]
    p = (C.shape[1] - 1) // k
    buf = [Y[:, -lag] for lag in range(1, p + 1)]   # most recent first
    out = np.empty((k, T_prime))
    for h in range(T_prime):
        x = np.concatenate([[1.0]] + buf) if p else np.ones(1)
        out[:, h] = C @ x
        if p:
            buf = [out[:, h]] + buf[:-1]
    return out


def fit_ar(history, p=DEFAULT_ORDER):
    """AR(p) with intercept; ``coefficients = [c, a_1, ..., a_p]``."""
    y = _history(history)
    if y.size <= p + 1:
        raise InvalidArgumentError(f"history of {y.size} too short for order {p}")
    X, T = _lag_design(y[None, :], p)
    return BaselineFit("ar", lstsq(X, T[:, 0]).tolist(), (0, y.size))


def forecast_ar(fit, history, T_prime):
    return forecast_var(BaselineFit("var", [fit.coefficients], fit.fit_window),
                        _history(history)[None, :], T_prime)[0]


# ------------------------------------------------------ exponential smoothing

def fit_es(history, alpha_grid=DEFAULT_ALPHA_GRID):
    """Pick the smoothing factor with least one-step SSE; ``[alpha, level]``."""
    y = _history(history)
    grid = np.asarray(alpha_grid, dtype=np.float64)
    if grid.size == 0 or np.any(grid <= 0) or np.any(grid > 1):
        raise InvalidArgumentError("alpha grid must be a nonempty subset of (0, 1]")
    sse, level = kernels.ses_sse(y, grid)
    j = int(np.argmin(sse))
    return BaselineFit("es", [float(grid[j]), float(level[j])], (0, y.size))


def forecast_es(history, T_prime, alpha_grid=DEFAULT_ALPHA_GRID):
    return np.full(T_prime, fit_es(history, alpha_grid).coefficients[1])


# ---------------------------------------------------------- parametric curves

_TERMS = {"linear": ("c0", "c1"), "cyclic": ("c0", "c2", "c3"),
          "geostyle": ("c0", "c1", "c2", "c3")}


def _curve_design(kind, t, P):
    cols = {"c0": np.ones_like(t), "c1": t, "c2": np.sin(2 * np.pi * t / P),
            "c3": np.cos(2 * np.pi * t / P)}
    return np.stack([cols[c] for c in _TERMS[kind]], axis=1)


def fit_curve(kind, history, steps_per_year, start=0):
    """Least-squares fit of a linear, cyclic or linear+cyclic curve.

    ``t`` counts absolute steps, starting at ``start`` for ``history[0]``;
    the period is ``steps_per_year``.
    """
    if kind not in _TERMS:
        raise InvalidArgumentError(f"unknown curve {kind!r}")
    y = _history(history)
    if kind != "linear":
        if y.size < steps_per_year:
            raise InvalidArgumentError(
                f"{kind} needs at least one period ({steps_per_year}), got {y.size}")
        if y.size < 2 * steps_per_year:
            log.info("%s fit on %d steps, under two periods", kind, y.size)
    t = start + np.arange(y.size, dtype=np.float64)
    coef = lstsq(_curve_design(kind, t, steps_per_year), y)
    return BaselineFit(kind, coef.tolist(), (start, start + y.size))


def forecast_curve(fit, T_prime, steps_per_year):
    end = fit.fit_window[1]
    t = end + np.arange(T_prime, dtype=np.float64)
    return _curve_design(fit.method, t, steps_per_year) @ np.asarray(fit.coefficients)


def fit_linear(history, steps_per_year=None, start=0):
    return fit_curve("linear", history, steps_per_year or 1, start)


def fit_cyclic(history, steps_per_year, start=0):
    return fit_curve("cyclic", history, steps_per_year, start)


def fit_geostyle(history, steps_per_year, start=0):
    return fit_curve("geostyle", history, steps_per_year, start)


# ----------------------------------------------------------------- dispatch

def sibling_sets(keys, elements):
    """Group series keys ``(group, element)`` into VAR variable sets: the
    series of one group whose elements share a parent. Roots stand alone."""
    parent = {e.id: e.parent_id for e in elements}
    sets = {}
    for g, e in keys:
        p = parent.get(e)
        sets.setdefault((g, p) if p is not None else (g, None, e), []).append((g, e))
    out = {}
    for members in sets.values():
        members = sorted(members)
        for k in members:
            out[k] = members
    return out


def forecast_samples(method, samples, values=None, steps_per_year=24, order=DEFAULT_ORDER,
                     siblings=None, alpha_grid=DEFAULT_ALPHA_GRID):
    """Forecast every sample's future from its own history window: (n, T').

    ``var`` needs ``values`` (key -> full series) and ``siblings``
    (key -> ordered sibling keys) to line up the co-evolving histories.
    """
    if method not in METHODS:
        raise InvalidArgumentError(f"unknown baseline {method!r}; choose from {METHODS}")
    out = []
    for s in samples:
        Tp, y = len(s.future), s.history
        if method == "mean":
            f = forecast_mean(y, Tp)
        elif method == "last":
            f = forecast_last(y, Tp)
        elif method == "ar":
            f = forecast_ar(fit_ar(y, order), y, Tp)
        elif method == "es":
            f = forecast_es(y, Tp, alpha_grid)
        elif method == "var":
            sib = siblings.get(s.key, [s.key]) if siblings else [s.key]
            Y = np.stack([values[k][s.start:s.start + len(y)] for k in sib]) \
                if len(sib) > 1 else y[None, :]
            f = forecast_var(fit_var(Y, order), Y, Tp)[sib.index(s.key)]
        else:
            fit = fit_curve(method, y, steps_per_year, s.start)
            f = forecast_curve(fit, Tp, steps_per_year)
        out.append(f)
    return np.stack(out)
