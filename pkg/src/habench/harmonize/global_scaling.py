"""Global scaling: one affine intensity map per site.

Each site's mean image is regressed on the mean image of all subjects across
the masked voxels, ``site_mean = loc + scl * grand_mean``, and every image from
that site is mapped through ``y -> (y - loc) / scl``. The same map is used at
every voxel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import HabenchError, VoxelDataset, site_means

MIN_SCALE = 1e-8


@dataclass(frozen=True)
class GlobalScalingFit:
    sites: tuple[str, ...]
    theta_loc: np.ndarray
    theta_scl: np.ndarray
    sigma2: float

    def to_dict(self) -> dict:
        return {
            "method": "global_scaling",
            "sites": list(self.sites),
            "theta_loc": self.theta_loc.tolist(),
            "theta_scl": self.theta_scl.tolist(),
            "sigma2": self.sigma2,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "GlobalScalingFit":
        return cls(tuple(obj["sites"]), np.array(obj["theta_loc"], float),
                   np.array(obj["theta_scl"], float), float(obj["sigma2"]))


def fit_global_scaling(dataset: VoxelDataset) -> GlobalScalingFit:
    S = dataset.layout.n_sites
    V = dataset.shape[1]
    if S < 2:
        raise HabenchError("global scaling needs at least 2 sites")
    if V < 2:
        raise HabenchError("global scaling needs at least 2 masked voxels")
    means, grand = site_means(dataset)
    gc = grand - grand.mean()
    sxx = float(gc @ gc)
    if sxx <= (1e-12 * max(1.0, float(np.abs(grand).max()))) ** 2 * V:
        raise HabenchError("zero regressor variance: the grand-mean image is constant across voxels")
    slopes = (means - means.mean(axis=1, keepdims=True)) @ gc / sxx
    intercepts = means.mean(axis=1) - slopes * grand.mean()
    small = np.flatnonzero(np.abs(slopes) < MIN_SCALE)
    if small.size:
        raise HabenchError(
            f"site {dataset.layout.sites[small[0]]!r}: fitted scale {slopes[small[0]]:.3g} is below {MIN_SCALE}")
    resid = means - intercepts[:, None] - slopes[:, None] * grand
    return GlobalScalingFit(dataset.layout.sites, intercepts, slopes, float(np.mean(resid ** 2)))


def apply_global_scaling(fit: GlobalScalingFit, dataset: VoxelDataset) -> np.ndarray:
    index = {s: i for i, s in enumerate(fit.sites)}
    missing = [s for s in dataset.layout.sites if s not in index]
    if missing:
        raise HabenchError(f"site(s) {missing} not present in the global scaling fit")
    rows = np.array([index[s] for s in dataset.layout.sites])[dataset.layout.membership]
    loc = fit.theta_loc[rows][:, None]
    scl = fit.theta_scl[rows][:, None]
    return (dataset.values - loc) / scl


class GlobalScaling:
    name = "global_scaling"

    def fit(self, dataset, design=None):
        return fit_global_scaling(dataset)

    def apply(self, fitted, dataset, design=None):
        return apply_global_scaling(fitted, dataset)

    def load(self, obj):
        return GlobalScalingFit.from_dict(obj)
