"""ComBat location/scale harmonization with optional parametric empirical Bayes.

Model, per voxel ``v`` and image ``j`` of site ``i``::

    y_ijv = alpha_v + X_ij beta_v + gamma_iv + delta_iv * eps_ijv

Estimation
----------
1. Least squares of ``y`` on ``[site indicators | X]``; the grand intercept is
   the sample-size weighted mean of the site intercepts, which imposes
   ``sum_i n_i gamma_iv = 0``.
2. ``sigma2_v`` is the mean squared residual (divisor ``N``).
3. Data are standardized, ``z = (y - alpha - X beta) / sigma``.
4. Per site: ``gamma_hat`` is the mean of ``z`` and ``delta_hat2`` its
   variance with divisor ``n_i``, so that ``eb=False`` maps the standardized
   data of every site onto exactly zero mean and unit variance.
5. With ``eb=True`` the per-site estimates are shrunk towards normal /
   inverse-gamma priors whose hyperparameters are moment-matched across
   voxels; the posterior means are found by fixed-point iteration, each voxel
   stopping independently once its largest relative change is below ``tol``.

Adjustment restores the covariate effects:
``y* = sigma (z - gamma*) / delta* + alpha + X beta``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from ..core import DesignMatrix, HabenchError, VoxelDataset
from ..parallel import map_blocks

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-12


class CombatError(HabenchError):
    pass


@dataclass(frozen=True)
class SitePrior:
    gamma_bar: float
    tau2: float
    a_prior: float
    b_prior: float


@dataclass(frozen=True)
class CombatFit:
    sites: tuple[str, ...]
    design_columns: tuple[str, ...]
    alpha_hat: np.ndarray       # V
    beta_hat: np.ndarray        # K x V
    sigma_hat: np.ndarray       # V
    gamma_hat: np.ndarray       # S x V, standardized direct estimates
    delta_hat2: np.ndarray      # S x V
    gamma_star: np.ndarray      # S x V
    delta_star2: np.ndarray     # S x V
    eb_used: bool
    hyperparams: tuple[SitePrior, ...] = ()
    iterations: int = 0
    eb_history: tuple[float, ...] = field(default=())

    @property
    def delta_star(self) -> np.ndarray:
        return np.sqrt(self.delta_star2)

    def eb_monotone(self, burn_in: int = 3) -> bool:
        """Whether the per-iteration max change is non-increasing after ``burn_in`` iterations."""
        h = np.asarray(self.eb_history[burn_in:])
        return bool(np.all(np.diff(h) <= 0)) if h.size > 1 else True

    def to_dict(self) -> dict:
        return {
            "method": "combat",
            "sites": list(self.sites),
            "design_columns": list(self.design_columns),
            "eb_used": self.eb_used,
            "iterations": self.iterations,
            "alpha_hat": self.alpha_hat.tolist(),
            "beta_hat": self.beta_hat.tolist(),
            "sigma_hat": self.sigma_hat.tolist(),
            "gamma_hat": self.gamma_hat.tolist(),
            "delta_hat2": self.delta_hat2.tolist(),
            "gamma_star": self.gamma_star.tolist(),
            "delta_star2": self.delta_star2.tolist(),
            "hyperparams": {s: vars(h) for s, h in zip(self.sites, self.hyperparams)},
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "CombatFit":
        sites = tuple(obj["sites"])
        V = len(obj["alpha_hat"])
        hyper = obj.get("hyperparams") or {}
        return cls(
            sites=sites,
            design_columns=tuple(obj["design_columns"]),
            alpha_hat=np.array(obj["alpha_hat"], float),
            beta_hat=np.array(obj["beta_hat"], float).reshape(-1, V),
            sigma_hat=np.array(obj["sigma_hat"], float),
            gamma_hat=np.array(obj["gamma_hat"], float),
            delta_hat2=np.array(obj["delta_hat2"], float),
            gamma_star=np.array(obj["gamma_star"], float),
            delta_star2=np.array(obj["delta_star2"], float),
            eb_used=bool(obj["eb_used"]),
            hyperparams=tuple(SitePrior(**hyper[s]) for s in sites if s in hyper),
            iterations=int(obj.get("iterations", 0)),
        )


def _standardize(values, design_values, alpha, beta, sigma):
    return (values - alpha - design_values @ beta) / sigma


def _site_prior(g_hat: np.ndarray, d_hat2: np.ndarray) -> SitePrior:
    m = float(d_hat2.mean())
    s2 = float(d_hat2.var(ddof=1))
    if s2 > 0:
        a = (2.0 * s2 + m * m) / s2
        b = (m * s2 + m ** 3) / s2
    else:
        # limit of a point-mass prior at m
        a, b = np.inf, np.inf
    return SitePrior(float(g_hat.mean()), float(g_hat.var(ddof=1)), a, b)


def _relative_change(new, old):
    denom = np.abs(old)
    return np.where(denom > 0, np.abs(new - old) / np.where(denom > 0, denom, 1.0), np.abs(new - old))


def _eb_block(z_site, prior: SitePrior, g_hat, d_hat2, tol, max_iter):
    """Posterior estimates for one site on a block of voxels.

    Returns ``(gamma_star, delta_star2, history, unconverged_columns)``.
    """
    n = z_site.shape[0]
    g = g_hat.copy()
    d = d_hat2.copy()
    if np.isinf(prior.a_prior):
        # all delta_hat2 equal: the prior is a point mass there
        g = (n * prior.tau2 * g_hat + d * prior.gamma_bar) / (n * prior.tau2 + d)
        return g, d, [0.0], np.zeros(0, dtype=np.intp)
    denom = n / 2.0 + prior.a_prior - 1.0
    if not denom > 0:
        raise CombatError(f"EB scale update has non-positive denominator {denom}")
    active = np.arange(g.size)
    history: list[float] = []
    for _ in range(max_iter):
        if active.size == 0:
            break
        g_old, d_old = g[active], d[active]
        g_new = (n * prior.tau2 * g_hat[active] + d_old * prior.gamma_bar) / (n * prior.tau2 + d_old)
        ss = ((z_site[:, active] - g_new) ** 2).sum(axis=0)
        d_new = np.maximum((prior.b_prior + 0.5 * ss) / denom, VARIANCE_FLOOR)
        change = np.maximum(_relative_change(g_new, g_old), _relative_change(d_new, d_old))
        g[active], d[active] = g_new, d_new
        history.append(float(change.max()))
        active = active[change >= tol]
    return g, d, history, active


def fit_combat(dataset: VoxelDataset, design: DesignMatrix | None = None, eb: bool = True,
               tol: float = 1e-4, max_iter: int = 100, threads: int | None = None) -> CombatFit:
    layout = dataset.layout
    Y = dataset.values
    N, V = Y.shape
    S = layout.n_sites
    X = np.zeros((N, 0)) if design is None else np.asarray(design.values, dtype=float)
    K = X.shape[1]
    if X.shape[0] != N:
        raise CombatError(f"design has {X.shape[0]} rows for {N} images")
    small = [s for s, n in zip(layout.sites, layout.counts) if n < 2]
    if small:
        raise CombatError(f"site(s) {small} have fewer than 2 images")
    if not N > K + S:
        raise CombatError(f"not estimable: N={N} must exceed covariates K={K} plus sites S={S}")
    full = np.hstack([layout.indicator(), X])
    if np.linalg.matrix_rank(full) < S + K:
        raise CombatError("not estimable: covariates are collinear with site")

    coef, *_ = np.linalg.lstsq(full, Y, rcond=None)
    site_coef, beta = coef[:S], coef[S:]
    alpha = (layout.counts / N) @ site_coef
    resid = Y - full @ coef
    sigma2 = np.maximum((resid ** 2).mean(axis=0), VARIANCE_FLOOR)
    sigma = np.sqrt(sigma2)
    Z = _standardize(Y, X, alpha, beta, sigma)

    g_hat = np.empty((S, V))
    d_hat2 = np.empty((S, V))
    for i in range(S):
        zi = Z[layout.rows_of(i)]
        g_hat[i] = zi.mean(axis=0)
        d_hat2[i] = np.maximum(zi.var(axis=0), VARIANCE_FLOOR)

    columns = tuple(design.names) if design is not None else ()
    if not eb:
        return CombatFit(layout.sites, columns, alpha, beta, sigma, g_hat, d_hat2,
                         g_hat.copy(), d_hat2.copy(), False)

    if V < 2:
        raise CombatError("empirical Bayes needs at least 2 voxels to estimate priors")
    priors = tuple(_site_prior(g_hat[i], d_hat2[i]) for i in range(S))
    g_star = np.empty_like(g_hat)
    d_star = np.empty_like(d_hat2)
    history: list[float] = []
    for i in range(S):
        zi = Z[layout.rows_of(i)]

        def run(block, i=i, zi=zi):
            return _eb_block(zi[:, block], priors[i], g_hat[i, block], d_hat2[i, block], tol, max_iter)

        blocks = map_blocks(run, V, threads)
        offset = 0
        for g, d, hist, stuck in blocks:
            width = g.size
            g_star[i, offset:offset + width] = g
            d_star[i, offset:offset + width] = d
            if stuck.size:
                worst = offset + int(stuck[0])
                raise CombatError(
                    f"EB did not converge in {max_iter} iterations at site {layout.sites[i]!r}, voxel column {worst}")
            for k, h in enumerate(hist):
                if k < len(history):
                    history[k] = max(history[k], h)
                else:
                    history.append(h)
            offset += width
    fit = CombatFit(layout.sites, columns, alpha, beta, sigma, g_hat, d_hat2, g_star, d_star, True,
                    priors, len(history), tuple(history))
    if not fit.eb_monotone():
        logger.warning("EB convergence criterion was not monotone after 3 iterations: %s", history)
    return fit


def apply_combat(fit: CombatFit, dataset: VoxelDataset, design: DesignMatrix | None = None) -> np.ndarray:
    names = tuple(design.names) if design is not None else ()
    if names != fit.design_columns:
        raise CombatError(f"design columns {list(names)} do not match fitted columns {list(fit.design_columns)}")
    if fit.alpha_hat.size != dataset.shape[1]:
        raise CombatError(f"fit has {fit.alpha_hat.size} voxels, dataset has {dataset.shape[1]}")
    index = {s: i for i, s in enumerate(fit.sites)}
    missing = [s for s in dataset.layout.sites if s not in index]
    if missing:
        raise CombatError(f"site(s) {missing} not present in the ComBat fit")
    X = np.zeros((dataset.shape[0], 0)) if design is None else np.asarray(design.values, float)
    rows = np.array([index[s] for s in dataset.layout.sites])[dataset.layout.membership]
    covariate_part = fit.alpha_hat + X @ fit.beta_hat
    z = (dataset.values - covariate_part) / fit.sigma_hat
    return fit.sigma_hat * (z - fit.gamma_star[rows]) / fit.delta_star[rows] + covariate_part


@dataclass(frozen=True)
class Combat:
    eb: bool = True
    tol: float = 1e-4
    max_iter: int = 100
    threads: int | None = None
    name: str = "combat"

    def configure(self, config) -> "Combat":
        return replace(self, eb=config.combat_eb, tol=config.combat_tol, max_iter=config.combat_max_iter)

    def fit(self, dataset, design=None):
        return fit_combat(dataset, design, self.eb, self.tol, self.max_iter, self.threads)

    def apply(self, fitted, dataset, design=None):
        return apply_combat(fitted, dataset, design)

    def load(self, obj):
        return CombatFit.from_dict(obj)
