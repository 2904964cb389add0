"""Domain types and dataset assembly.

Everything downstream works on a :class:`VoxelDataset`: an ``N x V`` matrix of
intensities (one row per image, one column per masked voxel) together with the
image geometry, the mask and the per-image sample table. Masked voxels are
flattened in ascending linear-index order with x varying fastest, so column
``k`` always refers to the same voxel across harmonization and reporting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np
from scipy import ndimage

Covariate = Union[float, str]


class HabenchError(ValueError):
    """Base class for validation errors raised by the toolkit."""


class GeometryError(HabenchError):
    pass


class DesignError(HabenchError):
    pass


@dataclass(frozen=True)
class VolumeGeometry:
    dims: tuple[int, int, int]
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray = field(default=None, compare=False)  # type: ignore[assignment]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise GeometryError(f"dims must be 3 positive integers, got {self.dims}")
        vs = tuple(float(v) for v in self.voxel_size)
        if len(vs) != 3 or any(not v > 0 for v in vs):
            raise GeometryError(f"voxel_size must be 3 positive reals, got {self.voxel_size}")
        aff = np.diag([*vs, 1.0]) if self.affine is None else np.array(self.affine, dtype=float)
        if aff.shape != (4, 4):
            raise GeometryError("affine must be 4x4")
        if abs(np.linalg.det(aff[:3, :3])) < 1e-12:
            raise GeometryError("affine rotation/zoom block is singular")
        aff.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", vs)
        object.__setattr__(self, "affine", aff)

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def same_space(self, other: "VolumeGeometry") -> bool:
        return self.dims == other.dims


def flatten_volume(data: np.ndarray) -> np.ndarray:
    """Linearize a 3D array with x fastest (Fortran order)."""
    return np.asarray(data).reshape(-1, order="F")


def unflatten_volume(flat: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    return np.asarray(flat).reshape(tuple(dims), order="F")


@dataclass(frozen=True)
class Mask:
    geometry: VolumeGeometry
    flags: np.ndarray
    voxel_index: np.ndarray = field(init=False)

    def __post_init__(self):
        flags = np.asarray(self.flags, dtype=bool)
        if flags.ndim == 3:
            if flags.shape != self.geometry.dims:
                raise GeometryError(f"mask shape {flags.shape} != geometry dims {self.geometry.dims}")
            flags = flatten_volume(flags)
        if flags.size != self.geometry.n_voxels:
            raise GeometryError("mask flag count does not match geometry")
        flags = flags.copy()
        flags.setflags(write=False)
        index = np.flatnonzero(flags)
        if index.size == 0:
            raise GeometryError("empty mask")
        index.setflags(write=False)
        object.__setattr__(self, "flags", flags)
        object.__setattr__(self, "voxel_index", index)

    @property
    def n_voxels(self) -> int:
        return int(self.voxel_index.size)

    def to_volume(self) -> np.ndarray:
        return unflatten_volume(self.flags, self.geometry.dims)

    def extract(self, volume: np.ndarray) -> np.ndarray:
        """Values of a 3D array (or a flat array) at the masked voxels, in column order."""
        flat = flatten_volume(volume) if np.ndim(volume) == 3 else np.asarray(volume)
        return flat[self.voxel_index]

    def embed(self, values: np.ndarray, background: float | np.ndarray = 0.0) -> np.ndarray:
        """Place ``V`` masked values into a full 3D volume."""
        if np.ndim(background) == 0:
            flat = np.full(self.geometry.n_voxels, float(background))
        else:
            flat = flatten_volume(np.asarray(background, dtype=float)).copy()
        flat[self.voxel_index] = values
        return unflatten_volume(flat, self.geometry.dims)


@dataclass(frozen=True)
class SampleRow:
    image_id: str
    site: str
    covariates: Mapping[str, Covariate]


@dataclass(frozen=True)
class SampleTable:
    rows: tuple[SampleRow, ...]
    kinds: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        rows = tuple(self.rows)
        object.__setattr__(self, "rows", rows)
        if not rows:
            raise HabenchError("sample table has no rows")
        seen = set()
        names = set(rows[0].covariates)
        for i, row in enumerate(rows):
            if row.image_id in seen:
                raise HabenchError(f"duplicate image_id {row.image_id!r}")
            seen.add(row.image_id)
            if not str(row.site):
                raise HabenchError(f"row {i}: empty site")
            if set(row.covariates) != names:
                raise HabenchError(f"row {i}: covariate names differ from first row")
            for name, value in row.covariates.items():
                if value is None or (isinstance(value, str) and value == ""):
                    raise HabenchError(f"row {i}: missing value for {name!r}")
        kinds = dict(self.kinds)
        for name in names:
            if name not in kinds:
                is_num = all(isinstance(r.covariates[name], (int, float)) for r in rows)
                kinds[name] = "continuous" if is_num else "categorical"
        object.__setattr__(self, "kinds", kinds)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def image_ids(self) -> list[str]:
        return [r.image_id for r in self.rows]

    @property
    def sites(self) -> list[str]:
        return [r.site for r in self.rows]

    @property
    def covariate_names(self) -> list[str]:
        return list(self.rows[0].covariates)

    def column(self, name: str) -> list[Covariate]:
        return [r.covariates[name] for r in self.rows]


@dataclass(frozen=True)
class SiteLayout:
    sites: tuple[str, ...]
    counts: np.ndarray
    membership: np.ndarray

    @classmethod
    def from_labels(cls, labels: Sequence[str]) -> "SiteLayout":
        order: dict[str, int] = {}
        for lab in labels:
            order.setdefault(str(lab), len(order))
        membership = np.array([order[str(lab)] for lab in labels], dtype=np.intp)
        counts = np.bincount(membership, minlength=len(order))
        membership.setflags(write=False)
        counts.setflags(write=False)
        return cls(tuple(order), counts, membership)

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    @property
    def n_samples(self) -> int:
        return int(self.membership.size)

    def indicator(self) -> np.ndarray:
        """``N x S`` one-hot site matrix."""
        out = np.zeros((self.n_samples, self.n_sites))
        out[np.arange(self.n_samples), self.membership] = 1.0
        return out

    def rows_of(self, site: int) -> np.ndarray:
        return np.flatnonzero(self.membership == site)


@dataclass(frozen=True)
class VoxelDataset:
    values: np.ndarray
    mask: Mask
    table: SampleTable
    layout: SiteLayout = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise HabenchError("values must be an N x V matrix")
        if values.shape[0] != len(self.table):
            raise HabenchError(f"{values.shape[0]} value rows for {len(self.table)} table rows")
        if values.shape[1] != self.mask.n_voxels:
            raise HabenchError(f"{values.shape[1]} value columns for {self.mask.n_voxels} mask voxels")
        if not np.all(np.isfinite(values)):
            n, k = np.argwhere(~np.isfinite(values))[0]
            raise HabenchError(f"non-finite value in image {self.table.rows[n].image_id!r} at masked voxel {k}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if self.layout is None:
            object.__setattr__(self, "layout", SiteLayout.from_labels(self.table.sites))

    @property
    def geometry(self) -> VolumeGeometry:
        return self.mask.geometry

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def with_values(self, values: np.ndarray) -> "VoxelDataset":
        return VoxelDataset(values, self.mask, self.table, self.layout)

    def volume(self, row: int, background: float | np.ndarray = 0.0) -> np.ndarray:
        return self.mask.embed(self.values[row], background)


def assemble_dataset(volumes, mask: Mask, table: SampleTable) -> VoxelDataset:
    """Build a dataset from ``(image_id, volume)`` pairs, a mask and a table.

    ``volume`` may be a 3D array or any object with ``geometry`` and ``data``
    attributes (such as :class:`habench.nifti_io.Volume`).
    """
    by_id = {}
    for image_id, vol in volumes:
        if image_id in by_id:
            raise HabenchError(f"duplicate volume for image_id {image_id!r}")
        by_id[image_id] = vol
    rows = []
    for row in table.rows:
        if row.image_id not in by_id:
            raise HabenchError(f"no volume for image_id {row.image_id!r}")
        vol = by_id[row.image_id]
        if hasattr(vol, "geometry"):
            if not vol.geometry.same_space(mask.geometry):
                raise GeometryError(
                    f"image {row.image_id!r} dims {vol.geometry.dims} != mask dims {mask.geometry.dims}")
            data = vol.data
        else:
            data = np.asarray(vol, dtype=float)
            if data.shape != mask.geometry.dims:
                raise GeometryError(f"image {row.image_id!r} shape {data.shape} != mask dims {mask.geometry.dims}")
        vals = mask.extract(data).astype(np.float64)
        bad = np.flatnonzero(~np.isfinite(vals))
        if bad.size:
            raise HabenchError(
                f"non-finite value in image {row.image_id!r} at voxel index {int(mask.voxel_index[bad[0]])}")
        rows.append(vals)
    return VoxelDataset(np.vstack(rows), mask, table)


@dataclass(frozen=True)
class DesignColumn:
    name: str
    kind: str  # "continuous" | "dummy"
    covariate: str
    level: str | None = None


@dataclass(frozen=True)
class DesignMatrix:
    columns: tuple[DesignColumn, ...]
    values: np.ndarray

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def n_columns(self) -> int:
        return len(self.columns)


def _as_float(value: Covariate, name: str, row: int) -> float:
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise DesignError(f"row {row}: covariate {name!r} value {value!r} is not a number") from None
    if not math.isfinite(out):
        raise DesignError(f"row {row}: covariate {name!r} is not finite")
    return out


def build_design_matrix(table: SampleTable, covariate_names: Sequence[str]) -> DesignMatrix:
    """Encode covariates as an ``N x K`` matrix without an intercept.

    Continuous covariates are copied. A categorical covariate with ``L``
    levels becomes ``L - 1`` indicator columns; the lexicographically
    smallest level is the reference.
    """
    columns: list[DesignColumn] = []
    blocks: list[np.ndarray] = []
    n = len(table)
    for name in covariate_names:
        if name not in table.kinds:
            raise DesignError(f"unknown covariate {name!r}; available: {sorted(table.kinds)}")
        raw = table.column(name)
        if table.kinds[name] == "continuous":
            blocks.append(np.array([_as_float(v, name, i) for i, v in enumerate(raw)])[:, None])
            columns.append(DesignColumn(name, "continuous", name))
        else:
            labels = [str(v) for v in raw]
            for level in sorted(set(labels))[1:]:
                blocks.append(np.array([1.0 if lab == level else 0.0 for lab in labels])[:, None])
                columns.append(DesignColumn(f"{name}[{level}]", "dummy", name, level))
    values = np.hstack(blocks) if blocks else np.zeros((n, 0))
    if values.shape[1]:
        gram = values.T @ values
        if np.linalg.matrix_rank(gram) < values.shape[1]:
            raise DesignError(f"design matrix is rank deficient (columns {[c.name for c in columns]})")
    values.setflags(write=False)
    return DesignMatrix(tuple(columns), values)


def erode_mask(mask: Mask, radius_voxels: int) -> Mask:
    """Binary erosion with the 6-connected structuring element, applied ``radius_voxels`` times."""
    if int(radius_voxels) != radius_voxels or radius_voxels < 1:
        raise HabenchError("erosion radius must be a positive integer")
    structure = ndimage.generate_binary_structure(3, 1)
    eroded = ndimage.binary_erosion(mask.to_volume(), structure=structure,
                                    iterations=int(radius_voxels), border_value=0)
    if not eroded.any():
        raise GeometryError("erosion produced an empty mask")
    return Mask(mask.geometry, eroded)


def site_means(dataset: VoxelDataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-site mean image (``S x V``) and the mean over all ``N`` images (``V``)."""
    layout = dataset.layout
    means = np.vstack([dataset.values[layout.rows_of(i)].mean(axis=0) for i in range(layout.n_sites)])
    return means, dataset.values.mean(axis=0)
