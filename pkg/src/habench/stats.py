"""Voxel-level statistics: one-way ANOVA, eta-squared, pooled t-tests, Hedges' g.

Each test has a scalar entry point taking plain sequences and a column-wise
kernel (``*_columns``) that evaluates thousands of voxels at once; the scalar
functions are thin wrappers around the kernels so both paths share one
implementation.

Degenerate voxels never produce NaN. A sum of squares that is zero up to
rounding (relative to the data magnitude) is treated as exactly zero, and

* zero within, positive between: ``F = inf``, ``p = 0``
* zero within, zero between: ``F = 0``, ``p = 1``

with the analogous rules for the t-test.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import HabenchError
from .special import f_sf, t_sf_two_sided

_ROUNDOFF = 64 * np.finfo(float).eps


class StatsError(HabenchError):
    pass


@dataclass(frozen=True)
class AnovaResult:
    F: float
    df_between: int
    df_within: int
    p: float
    ss_between: float
    ss_within: float
    ss_total: float


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    p: float


@dataclass(frozen=True)
class AnovaColumns:
    """Column-wise ANOVA output; every array has length ``V``."""

    F: np.ndarray
    p: np.ndarray
    ss_between: np.ndarray
    ss_within: np.ndarray
    ss_total: np.ndarray
    df_between: int
    df_within: int

    @property
    def eta_squared(self) -> np.ndarray:
        return eta_squared_columns(self.ss_between, self.ss_total)


def _zero_floor(values: np.ndarray) -> np.ndarray:
    """Squared-magnitude level below which a sum of squares is rounding noise."""
    scale = np.max(np.abs(values), axis=0)
    return values.shape[0] * (_ROUNDOFF * scale) ** 2


def _group_moments(values, membership, n_groups):
    counts = np.bincount(membership, minlength=n_groups)
    means = np.vstack([values[membership == g].mean(axis=0) for g in range(n_groups)])
    return counts, means


def anova_columns(values: np.ndarray, membership: np.ndarray, n_groups: int | None = None) -> AnovaColumns:
    """One-way ANOVA of every column of ``values`` (``N x V``) across groups.

    ``membership`` gives the group index of each row.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    membership = np.asarray(membership, dtype=np.intp)
    S = int(membership.max()) + 1 if n_groups is None else int(n_groups)
    counts = np.bincount(membership, minlength=S)
    if S < 2:
        raise StatsError("one-way ANOVA needs at least 2 groups")
    if np.any(counts < 2):
        raise StatsError(f"every group needs at least 2 samples (counts {counts.tolist()})")
    N = values.shape[0]
    _, means = _group_moments(values, membership, S)
    grand = values.mean(axis=0)
    ss_total = ((values - grand) ** 2).sum(axis=0)
    ss_within = ((values - means[membership]) ** 2).sum(axis=0)
    ss_between = (counts[:, None] * (means - grand) ** 2).sum(axis=0)

    floor = _zero_floor(values)
    w0 = ss_within <= floor
    b0 = ss_between <= floor
    ss_within = np.where(w0, 0.0, ss_within)
    ss_between = np.where(b0, 0.0, ss_between)
    ss_total = np.where(w0 & b0, 0.0, ss_total)

    dfb, dfw = S - 1, N - S
    with np.errstate(divide="ignore", invalid="ignore"):
        F = (ss_between / dfb) / (ss_within / dfw)
    F = np.where(w0, np.where(b0, 0.0, np.inf), F)
    p = f_sf(F, dfb, dfw)
    p = np.where(w0, np.where(b0, 1.0, 0.0), p)
    return AnovaColumns(F, np.asarray(p, dtype=float), ss_between, ss_within, ss_total, dfb, dfw)


def eta_squared_columns(ss_between: np.ndarray, ss_total: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        eta = np.where(ss_total > 0, ss_between / ss_total, 0.0)
    return np.clip(eta, 0.0, 1.0)


@dataclass(frozen=True)
class PairColumns:
    t: np.ndarray
    p: np.ndarray
    g: np.ndarray
    df: int
    zero_variance: np.ndarray


def pairwise_columns(a: np.ndarray, b: np.ndarray) -> PairColumns:
    """Pooled-variance two-sample t-test and Hedges' g for every column.

    ``a`` and ``b`` are ``n_a x V`` and ``n_b x V``. Where the pooled variance
    is zero, ``t``/``g`` are 0 for equal means and signed infinity otherwise.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    na, nb = a.shape[0], b.shape[0]
    if na < 2 or nb < 2:
        raise StatsError("each group needs at least 2 samples for a t-test")
    df = na + nb - 2
    ma, mb = a.mean(axis=0), b.mean(axis=0)
    ssa = ((a - ma) ** 2).sum(axis=0)
    ssb = ((b - mb) ** 2).sum(axis=0)
    floor = _zero_floor(np.vstack([a, b]))
    ss_pool = ssa + ssb
    diff = ma - mb
    sd0 = ss_pool <= floor
    mean0 = diff * diff * (na * nb / (na + nb)) <= floor
    diff = np.where(mean0, 0.0, diff)
    sp = np.sqrt(ss_pool / df)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = diff / (sp * np.sqrt(1.0 / na + 1.0 / nb))
        g = hedges_correction(df) * diff / sp
    signed_inf = np.where(diff == 0, 0.0, np.copysign(np.inf, diff))
    t = np.where(sd0, signed_inf, t)
    g = np.where(sd0, signed_inf, g)
    p = np.asarray(t_sf_two_sided(np.where(np.isinf(t), np.inf, t), df), dtype=float)
    return PairColumns(t, p, g, df, sd0)


def hedges_correction(df: int) -> float:
    """Small-sample factor J = 1 - 3 / (4 df - 1)."""
    return 1.0 - 3.0 / (4.0 * df - 1.0)


def _as_groups(groups: Sequence[Sequence[float]]):
    arrays = [np.asarray(g, dtype=float).ravel() for g in groups]
    membership = np.concatenate([np.full(len(g), i) for i, g in enumerate(arrays)]) if arrays else np.zeros(0)
    return np.concatenate(arrays) if arrays else np.zeros(0), membership.astype(np.intp)


def oneway_anova(groups: Sequence[Sequence[float]]) -> AnovaResult:
    if len(groups) < 2:
        raise StatsError("one-way ANOVA needs at least 2 groups")
    if any(len(g) < 2 for g in groups):
        raise StatsError("every group needs at least 2 samples")
    values, membership = _as_groups(groups)
    r = anova_columns(values, membership, len(groups))
    return AnovaResult(float(r.F[0]), r.df_between, r.df_within, float(r.p[0]),
                       float(r.ss_between[0]), float(r.ss_within[0]), float(r.ss_total[0]))


def eta_squared(anova: AnovaResult) -> float:
    """Share of the total sum of squares explained by group; 0 when there is no variance."""
    return float(eta_squared_columns(np.array([anova.ss_between]), np.array([anova.ss_total]))[0])


def pairwise_t(group_i: Sequence[float], group_j: Sequence[float]) -> TTestResult:
    r = pairwise_columns(np.asarray(group_i, float), np.asarray(group_j, float))
    return TTestResult(float(r.t[0]), r.df, float(r.p[0]))


def hedges_g(group_i: Sequence[float], group_j: Sequence[float]) -> float:
    r = pairwise_columns(np.asarray(group_i, float), np.asarray(group_j, float))
    if r.zero_variance[0]:
        raise StatsError("Hedges' g is undefined for zero pooled variance")
    return float(r.g[0])


def bonferroni_threshold(alpha: float, m: int) -> float:
    """Per-test level controlling the family-wise error at ``alpha`` over ``m`` tests."""
    if not 0 < alpha < 1:
        raise StatsError(f"alpha must be in (0, 1), got {alpha}")
    if int(m) != m or m < 1:
        raise StatsError(f"number of tests must be a positive integer, got {m}")
    return alpha / m
