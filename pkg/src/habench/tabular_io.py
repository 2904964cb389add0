"""Sample-table CSV and run-configuration JSON parsing."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .core import HabenchError, SampleRow, SampleTable

KINDS = ("continuous", "categorical")
BUILTIN_METHODS = ("none", "global_scaling", "combat")


class TableError(HabenchError):
    pass


class ConfigError(HabenchError):
    pass


@dataclass(frozen=True)
class CovariateSpec:
    name: str
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise TableError(f"covariate {self.name!r}: kind must be one of {KINDS}")


@dataclass(frozen=True)
class TableSchema:
    image_column: str = "image"
    site_column: str = "site"
    covariates: tuple[CovariateSpec, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        names = [self.image_column, self.site_column] + [c.name for c in self.covariates]
        if len(set(names)) != len(names):
            raise TableError(f"schema column names are not distinct: {names}")


@dataclass(frozen=True)
class LoadedTable:
    """A parsed table plus the resolved file path of every image."""

    table: SampleTable
    paths: dict[str, Path]
    source: Path


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise TableError(f"{path}: empty file") from None
            rows = [r for r in reader if r]
    except OSError as exc:
        raise TableError(f"cannot read {path}: {exc.strerror or exc}") from None
    except csv.Error as exc:
        raise TableError(f"{path}: malformed CSV ({exc})") from None
    return [h.strip() for h in header], rows


def infer_schema(path, image_column: str = "image", site_column: str = "site",
                 categorical: Sequence[str] = ()) -> TableSchema:
    """Schema with every extra column as a covariate.

    A column is continuous when every cell parses as a finite number, unless
    it is listed in ``categorical``.
    """
    header, rows = _read_csv(Path(path))
    covs = []
    for j, name in enumerate(header):
        if name in (image_column, site_column):
            continue
        kind = "categorical"
        if name not in categorical:
            try:
                if all(math.isfinite(float(r[j])) for r in rows):
                    kind = "continuous"
            except (ValueError, IndexError):
                pass
        covs.append(CovariateSpec(name, kind))
    return TableSchema(image_column, site_column, tuple(covs))


def read_sample_table(path, schema: TableSchema | None = None) -> LoadedTable:
    path = Path(path)
    if schema is None:
        schema = infer_schema(path)
    header, rows = _read_csv(path)
    needed = [schema.image_column, schema.site_column] + [c.name for c in schema.covariates]
    missing = [c for c in needed if c not in header]
    if missing:
        raise TableError(f"{path}: missing column(s) {missing}")
    col = {name: header.index(name) for name in needed}

    out: list[SampleRow] = []
    paths: dict[str, Path] = {}
    for lineno, r in enumerate(rows, start=2):
        if len(r) != len(header):
            raise TableError(f"{path}: row {lineno} has {len(r)} fields, header has {len(header)}")
        for name in needed:
            if r[col[name]].strip() == "":
                raise TableError(f"{path}: row {lineno}, column {name!r}: empty cell")
        image_id = r[col[schema.image_column]].strip()
        if image_id in paths:
            raise TableError(f"{path}: row {lineno}: duplicate image_id {image_id!r}")
        covariates = {}
        for spec in schema.covariates:
            cell = r[col[spec.name]].strip()
            if spec.kind == "continuous":
                try:
                    value = float(cell)
                except ValueError:
                    raise TableError(
                        f"{path}: row {lineno}, column {spec.name!r}: cannot parse {cell!r} as a number") from None
                if not math.isfinite(value):
                    raise TableError(f"{path}: row {lineno}, column {spec.name!r}: value is not finite")
                covariates[spec.name] = value
            else:
                covariates[spec.name] = cell
        # site is categorical even when it looks numeric
        out.append(SampleRow(image_id, r[col[schema.site_column]].strip(), covariates))
        paths[image_id] = (path.parent / image_id).resolve()
    if not out:
        raise TableError(f"{path}: no data rows")
    kinds = {c.name: c.kind for c in schema.covariates}
    return LoadedTable(SampleTable(tuple(out), kinds), paths, path)


def write_sample_table(table: SampleTable, path, image_column: str = "image",
                       site_column: str = "site") -> None:
    names = table.covariate_names
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([image_column, site_column, *names])
        for row in table.rows:
            w.writerow([row.image_id, row.site, *(_cell(row.covariates[n]) for n in names)])


def _cell(value) -> str:
    return repr(float(value)) if isinstance(value, float) else str(value)


@dataclass(frozen=True)
class RunConfig:
    method: str = "none"
    covariate_names: tuple[str, ...] = ()
    categorical: tuple[str, ...] = ()
    alpha: float = 0.05
    combat_eb: bool = True
    combat_tol: float = 1e-4
    combat_max_iter: int = 100
    output_dir: str | None = None
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (isinstance(self.alpha, (int, float)) and 0 < self.alpha < 1):
            raise ConfigError(f"alpha must be in (0, 1), got {self.alpha!r}")
        if not self.combat_tol > 0:
            raise ConfigError("combat_tol must be positive")
        if int(self.combat_max_iter) < 1:
            raise ConfigError("combat_max_iter must be at least 1")


_CONFIG_KEYS = {"method", "covariates", "categorical", "alpha", "combat_eb", "combat_tol",
                "combat_max_iter", "output_dir", "options"}


def parse_run_config(obj: dict, known_methods: Sequence[str] | None = None) -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = set(obj) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    if known_methods is None:
        from .harmonize import available_methods
        known_methods = available_methods()
    method = obj.get("method", "none")
    if method not in known_methods:
        raise ConfigError(f"unknown method {method!r}; available: {sorted(known_methods)}")
    covs = obj.get("covariates", [])
    if not isinstance(covs, list) or not all(isinstance(c, str) for c in covs):
        raise ConfigError("covariates must be a list of column names")
    eb = obj.get("combat_eb", True)
    if not isinstance(eb, bool):
        raise ConfigError("combat_eb must be true or false")
    return RunConfig(
        method=method,
        covariate_names=tuple(covs),
        categorical=tuple(obj.get("categorical", [])),
        alpha=obj.get("alpha", 0.05),
        combat_eb=eb,
        combat_tol=float(obj.get("combat_tol", 1e-4)),
        combat_max_iter=int(obj.get("combat_max_iter", 100)),
        output_dir=obj.get("output_dir"),
        options=dict(obj.get("options", {})),
    )


def read_run_config(path, known_methods: Sequence[str] | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror or exc}") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at byte {exc.pos}: {exc.msg}") from None
    return parse_run_config(obj, known_methods)
