"""Synthetic multi-site volumes with known site effects.

Images follow the ComBat generative form at every voxel::

    y = alpha_v + beta_age_v * (age - age_mid) + beta_sex * male + gamma_iv + delta_iv * eps

``alpha`` is a smooth field (a coarse random grid, one node every 4 voxels,
trilinearly interpolated). Site shifts ``gamma_iv ~ N(0, gamma_scale_i^2)``
and the noise scale ``delta_iv = delta_scale_i`` are injected only at a
random subset of masked voxels; elsewhere ``gamma = 0`` and ``delta = 1``.

Optionally each site also gets a scanner-wide intensity calibration applied
to the whole image afterwards, ``y -> global_gain_i * y + global_shift_i``.
This is the kind of effect a global (rather than voxel-wise) method can
remove; it is recorded separately from ``gamma``/``delta``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import HabenchError, Mask, SampleRow, SampleTable, VolumeGeometry, flatten_volume, unflatten_volume
from .nifti_io import Volume, mask_volume, write_volume
from .rng import Substreams
from .tabular_io import write_sample_table

# substream identifiers
_ALPHA, _AFFECTED, _GAMMA, _AGE, _SEX, _NOISE, _BETA = range(1, 8)

COARSE_FACTOR = 4


class SynthError(HabenchError):
    pass


@dataclass(frozen=True)
class SiteSpec:
    label: str
    n_images: int
    gamma_scale: float = 0.0
    delta_scale: float = 1.0
    global_shift: float = 0.0
    global_gain: float = 1.0


@dataclass(frozen=True)
class CovariateEffects:
    age_range: tuple[float, float] = (9.0, 11.0)
    age_effect: float = 0.0
    sex_effect: float = 0.0


@dataclass(frozen=True)
class SynthSpec:
    seed: int
    dims: tuple[int, int, int]
    sites: tuple[SiteSpec, ...]
    mask_shape: str | float = "full"
    covariates: CovariateEffects = field(default_factory=CovariateEffects)
    noise_sd: float = 0.05
    affected_fraction: float = 0.0
    alpha_range: tuple[float, float] = (0.2, 0.7)

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "sites", tuple(self.sites))
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise SynthError("dims must be 3 positive integers")
        if not self.sites:
            raise SynthError("at least one site is required")
        labels = [s.label for s in self.sites]
        if len(set(labels)) != len(labels) or any(not s.label for s in self.sites):
            raise SynthError(f"site labels must be distinct and non-empty: {labels}")
        if sum(s.n_images for s in self.sites) < 4 or any(s.n_images < 1 for s in self.sites):
            raise SynthError("need at least 4 images in total and at least 1 per site")
        if any(not s.delta_scale > 0 or s.gamma_scale < 0 for s in self.sites):
            raise SynthError("delta_scale must be positive and gamma_scale nonnegative")
        if any(s.global_gain == 0 for s in self.sites):
            raise SynthError("global_gain must be nonzero")
        if not self.noise_sd > 0:
            raise SynthError("noise_sd must be positive")
        if not 0.0 <= self.affected_fraction <= 1.0:
            raise SynthError("affected_fraction must be in [0, 1]")
        if self.mask_shape != "full" and not (isinstance(self.mask_shape, (int, float)) and 0 < self.mask_shape <= 1):
            raise SynthError("mask_shape must be 'full' or a centered-box fraction in (0, 1]")
        lo, hi = self.covariates.age_range
        if not hi >= lo:
            raise SynthError("age_range must be [lo, hi] with hi >= lo")

    @classmethod
    def from_dict(cls, obj: dict) -> "SynthSpec":
        try:
            mask = obj.get("mask_shape", "full")
            if isinstance(mask, dict):
                mask = float(mask["centered_box"])
            cov = obj.get("covariates", {})
            return cls(
                seed=int(obj["seed"]),
                dims=tuple(obj["dims"]),
                sites=tuple(SiteSpec(**s) for s in obj["sites"]),
                mask_shape=mask,
                covariates=CovariateEffects(
                    age_range=tuple(cov.get("age_range", (9.0, 11.0))),
                    age_effect=float(cov.get("age_effect", 0.0)),
                    sex_effect=float(cov.get("sex_effect", 0.0)),
                ),
                noise_sd=float(obj.get("noise_sd", 0.05)),
                affected_fraction=float(obj.get("affected_fraction", 0.0)),
                alpha_range=tuple(obj.get("alpha_range", (0.2, 0.7))),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SynthError(f"invalid synth spec: {exc}") from None

    def to_dict(self) -> dict:
        out = asdict(self)
        if self.mask_shape != "full":
            out["mask_shape"] = {"centered_box": self.mask_shape}
        return out


@dataclass(frozen=True)
class GroundTruth:
    affected_voxels: np.ndarray   # linear voxel indices
    affected_columns: np.ndarray  # positions within the mask's column order
    gamma: np.ndarray             # S x V
    delta: np.ndarray             # S x V
    beta: np.ndarray              # K x V, rows (age, sex[M])
    alpha: np.ndarray             # V
    sites: tuple[SiteSpec, ...]

    def to_json(self) -> dict:
        return {
            "affected_voxels": [int(v) for v in self.affected_voxels],
            "per_site": {s.label: {"gamma_scale": s.gamma_scale, "delta_scale": s.delta_scale,
                                   "global_shift": s.global_shift, "global_gain": s.global_gain}
                         for s in self.sites},
            "alpha_summary": {"min": float(self.alpha.min()), "max": float(self.alpha.max())},
        }


@dataclass(frozen=True)
class SynthResult:
    volumes: list[tuple[str, Volume]]
    table: SampleTable
    mask: Mask
    truth: GroundTruth
    spec: SynthSpec


def _mask_flags(spec: SynthSpec) -> np.ndarray:
    flags = np.zeros(spec.dims, dtype=bool)
    if spec.mask_shape == "full":
        flags[:] = True
        return flags
    sl = []
    for d in spec.dims:
        width = max(1, int(round(d * float(spec.mask_shape))))
        start = (d - width) // 2
        sl.append(slice(start, start + width))
    flags[tuple(sl)] = True
    return flags


def _alpha_field(spec: SynthSpec, rng: Substreams) -> np.ndarray:
    coarse = tuple(math.ceil((d - 1) / COARSE_FACTOR) + 1 for d in spec.dims)
    lo, hi = spec.alpha_range
    nodes = lo + (hi - lo) * rng.uniform(_ALPHA, np.arange(int(np.prod(coarse))))[:, 0]
    grid = unflatten_volume(nodes, coarse)
    coords = np.meshgrid(*(np.arange(d) / COARSE_FACTOR for d in spec.dims), indexing="ij")
    return ndimage.map_coordinates(grid, coords, order=1, mode="nearest")


def generate(spec: SynthSpec) -> SynthResult:
    rng = Substreams(spec.seed)
    geometry = VolumeGeometry(spec.dims, (2.0, 2.0, 2.0))
    mask = Mask(geometry, _mask_flags(spec))
    V = mask.n_voxels
    total = geometry.n_voxels
    all_vox = np.arange(total)

    alpha_full = flatten_volume(_alpha_field(spec, rng))

    n_affected = int(round(spec.affected_fraction * V))
    keys = rng.uniform(_AFFECTED, mask.voxel_index)[:, 0]
    affected_cols = np.sort(np.argsort(keys, kind="stable")[:n_affected])
    affected_flag = np.zeros(total, dtype=bool)
    affected_flag[mask.voxel_index[affected_cols]] = True

    S = len(spec.sites)
    z_gamma = rng.normal(_GAMMA, all_vox, S).T          # S x total
    gamma_scale = np.array([s.gamma_scale for s in spec.sites])[:, None]
    delta_scale = np.array([s.delta_scale for s in spec.sites])[:, None]
    gamma_full = np.where(affected_flag, gamma_scale * z_gamma, 0.0)
    delta_full = np.where(affected_flag, delta_scale, 1.0)

    cov = spec.covariates
    lo, hi = cov.age_range
    age_mid = 0.5 * (lo + hi)
    beta_age = cov.age_effect * rng.normal(_BETA, all_vox)[:, 0]
    beta_sex = np.full(total, cov.sex_effect)

    n_total = sum(s.n_images for s in spec.sites)
    image_idx = np.arange(n_total)
    ages = lo + (hi - lo) * rng.uniform(_AGE, image_idx)[:, 0]
    male = rng.uniform(_SEX, image_idx)[:, 0] < 0.5
    noise = spec.noise_sd * rng.normal(_NOISE, all_vox, n_total)   # total x N

    volumes: list[tuple[str, Volume]] = []
    rows: list[SampleRow] = []
    n = 0
    for i, site in enumerate(spec.sites):
        for j in range(site.n_images):
            age = float(np.round(ages[n], 2))
            y = (alpha_full + beta_age * (age - age_mid) + beta_sex * float(male[n])
                 + gamma_full[i] + delta_full[i] * noise[:, n])
            y = site.global_gain * y + site.global_shift
            image_id = f"{site.label}_{j:03d}.nii.gz"
            volumes.append((image_id, Volume(geometry, unflatten_volume(y, spec.dims), f"synthetic {site.label}")))
            rows.append(SampleRow(image_id, site.label, {"age": age, "sex": "M" if male[n] else "F"}))
            n += 1
    table = SampleTable(tuple(rows), {"age": "continuous", "sex": "categorical"})
    cols = mask.voxel_index
    truth = GroundTruth(
        affected_voxels=mask.voxel_index[affected_cols],
        affected_columns=affected_cols,
        gamma=gamma_full[:, cols],
        delta=delta_full[:, cols],
        beta=np.vstack([beta_age[cols], beta_sex[cols]]),
        alpha=alpha_full[cols],
        sites=spec.sites,
    )
    return SynthResult(volumes, table, mask, truth, spec)


def write_synth_bundle(result: SynthResult, directory, element_type: str = "float32") -> None:
    """Write images, ``samples.csv``, ``mask.nii.gz`` and ``ground_truth.json`` into ``directory``."""
    out = Path(directory)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for image_id, vol in result.volumes:
            write_volume(vol, out / image_id, element_type)
        write_volume(mask_volume(result.mask), out / "mask.nii.gz", "float32")
        write_sample_table(result.table, out / "samples.csv")
        (out / "ground_truth.json").write_text(json.dumps(result.truth.to_json(), indent=1) + "\n")
        (out / "synth_spec.json").write_text(json.dumps(result.spec.to_dict(), indent=1) + "\n")
    except OSError as exc:
        raise SynthError(f"cannot write bundle to {out}: {exc}") from None
