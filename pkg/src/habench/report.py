"""Site-effect reports: voxel-wise ANOVA, pairwise site t-tests, effect sizes.

For every masked voxel a one-way ANOVA with site as the factor gives ``F``,
``p`` and eta-squared; a voxel shows a site effect when ``p < alpha / V``.
At those voxels only, every pair of sites is compared with a pooled-variance
t-test (significant when ``p < alpha / (V * P)`` with ``P`` site pairs) and
Hedges' g. The summary counts ``n_F`` significant voxels (fraction ``f_F``)
and ``n_t`` significant pairwise tests. ``n_t`` is ``None`` (rendered
``N/A``) when no voxel is significant, since no t-test is run. ``f_t``,
``n_t / (n_F * P)``, is an extra normalized count not part of the classic
three-number summary.

Reports depend only on the values in a :class:`VoxelDataset`, never on the
method that produced them.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import HabenchError, Mask, VoxelDataset
from .nifti_io import Volume, write_volume
from .parallel import map_blocks
from .stats import anova_columns, bonferroni_threshold, pairwise_columns

MAP_FILES = {"significance": "sig_F.nii.gz", "eta2": "eta2.nii.gz", "t_fraction": "t_fraction.nii.gz"}
SUMMARY_KEYS = ("V", "S", "P", "alpha", "f_threshold", "t_threshold", "n_F", "f_F", "n_t", "f_t")


class ReportError(HabenchError):
    pass


@dataclass(frozen=True)
class PairwiseResults:
    """One entry per (ANOVA-significant voxel, site pair), voxel-major."""

    column: np.ndarray
    site_a: np.ndarray
    site_b: np.ndarray
    t: np.ndarray
    p: np.ndarray
    significant: np.ndarray
    hedges_g: np.ndarray


@dataclass(frozen=True)
class SiteEffectReport:
    sites: tuple[str, ...]
    voxel_index: np.ndarray
    F: np.ndarray
    p_F: np.ndarray
    significant_F: np.ndarray
    eta_squared: np.ndarray
    t_fraction: np.ndarray
    pairwise: PairwiseResults
    summary: dict

    @property
    def n_voxels(self) -> int:
        return int(self.F.size)


def _site_pairs(S: int) -> list[tuple[int, int]]:
    return [(a, b) for a in range(S) for b in range(a + 1, S)]


def generate_report(dataset: VoxelDataset, alpha: float = 0.05, threads: int | None = None) -> SiteEffectReport:
    layout = dataset.layout
    S = layout.n_sites
    if S < 2:
        raise ReportError("a site-effect report needs at least 2 sites")
    small = [s for s, n in zip(layout.sites, layout.counts) if n < 2]
    if small:
        raise ReportError(f"site(s) {small} have fewer than 2 images")
    Y = dataset.values
    V = Y.shape[1]
    pairs = _site_pairs(S)
    P = len(pairs)
    f_threshold = bonferroni_threshold(alpha, V)
    t_threshold = bonferroni_threshold(alpha, V * P)

    blocks = map_blocks(lambda b: anova_columns(Y[:, b], layout.membership, S), V, threads)
    F = np.concatenate([r.F for r in blocks])
    p_F = np.concatenate([r.p for r in blocks])
    eta = np.concatenate([r.eta_squared for r in blocks])
    sig_F = p_F < f_threshold

    sig_cols = np.flatnonzero(sig_F)
    rows = [layout.rows_of(i) for i in range(S)]
    n_sig = sig_cols.size
    t = np.empty((n_sig, P))
    p_t = np.empty((n_sig, P))
    g = np.empty((n_sig, P))
    for k, (a, b) in enumerate(pairs):
        if n_sig == 0:
            break
        ya, yb = Y[rows[a]][:, sig_cols], Y[rows[b]][:, sig_cols]
        parts = map_blocks(lambda blk: pairwise_columns(ya[:, blk], yb[:, blk]), n_sig, threads)
        t[:, k] = np.concatenate([r.t for r in parts])
        p_t[:, k] = np.concatenate([r.p for r in parts])
        g[:, k] = np.concatenate([r.g for r in parts])
    sig_t = p_t < t_threshold

    t_fraction = np.zeros(V)
    t_fraction[sig_cols] = sig_t.sum(axis=1) / P
    n_F = int(n_sig)
    n_t = int(sig_t.sum()) if n_F > 0 else None
    summary = {
        "V": V,
        "S": S,
        "P": P,
        "alpha": float(alpha),
        "f_threshold": f_threshold,
        "t_threshold": t_threshold,
        "n_F": n_F,
        "f_F": n_F / V,
        "n_t": n_t,
        "f_t": (n_t / (n_F * P)) if n_F > 0 else 0.0,
    }
    pa = np.array([a for a, _ in pairs], dtype=np.intp)
    pb = np.array([b for _, b in pairs], dtype=np.intp)
    pairwise = PairwiseResults(
        column=np.repeat(sig_cols, P),
        site_a=np.tile(pa, n_sig),
        site_b=np.tile(pb, n_sig),
        t=t.ravel(),
        p=p_t.ravel(),
        significant=sig_t.ravel(),
        hedges_g=g.ravel(),
    )
    return SiteEffectReport(layout.sites, np.asarray(dataset.mask.voxel_index), F, p_F, sig_F, eta,
                            t_fraction, pairwise, summary)


def _fmt(x) -> str:
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def emit_maps(report: SiteEffectReport, mask: Mask, output_dir) -> None:
    """Write significance, eta-squared and t-fraction volumes (0 outside the mask)."""
    if mask.n_voxels != report.n_voxels or not np.array_equal(mask.voxel_index, report.voxel_index):
        raise ReportError("mask does not match the report's voxels")
    out = Path(output_dir)
    maps = {
        "significance": report.significant_F.astype(float),
        "eta2": report.eta_squared,
        "t_fraction": report.t_fraction,
    }
    try:
        out.mkdir(parents=True, exist_ok=True)
        for key, values in maps.items():
            vol = Volume(mask.geometry, mask.embed(values, 0.0), key)
            write_volume(vol, out / MAP_FILES[key], "float32")
    except OSError as exc:
        raise ReportError(f"cannot write maps to {out}: {exc}") from None


def emit_tables(report: SiteEffectReport, output_dir) -> None:
    """Write ``anova.csv``, ``pairwise.csv`` and ``summary.json``."""
    out = Path(output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with (out / "anova.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["voxel_index", "F", "p", "significant", "eta2"])
            for k in range(report.n_voxels):
                w.writerow([int(report.voxel_index[k]), _fmt(report.F[k]), _fmt(report.p_F[k]),
                            int(report.significant_F[k]), _fmt(report.eta_squared[k])])
        pw = report.pairwise
        with (out / "pairwise.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["voxel_index", "site_a", "site_b", "t", "p", "significant", "hedges_g"])
            for r in range(pw.column.size):
                w.writerow([int(report.voxel_index[pw.column[r]]), report.sites[pw.site_a[r]],
                            report.sites[pw.site_b[r]], _fmt(pw.t[r]), _fmt(pw.p[r]),
                            int(pw.significant[r]), _fmt(pw.hedges_g[r])])
        (out / "summary.json").write_text(json.dumps(report.summary, indent=1) + "\n")
    except OSError as exc:
        raise ReportError(f"cannot write tables to {out}: {exc}") from None


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    counts: np.ndarray


def eta2_distribution(report: SiteEffectReport, n_bins: int = 50) -> Histogram:
    """Equal-width histogram of eta-squared over all voxels on [0, 1]."""
    if int(n_bins) != n_bins or n_bins < 1:
        raise ReportError("n_bins must be a positive integer")
    counts, edges = np.histogram(report.eta_squared, bins=int(n_bins), range=(0.0, 1.0))
    return Histogram(edges, counts)


def emit_histogram(hist: Histogram, output_dir) -> None:
    out = Path(output_dir)
    total = int(hist.counts.sum())
    with (out / "eta2_hist.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count", "fraction"])
        for lo, hi, c in zip(hist.edges[:-1], hist.edges[1:], hist.counts):
            w.writerow([_fmt(lo), _fmt(hi), int(c), _fmt(c / total if total else 0.0)])


def write_report(report: SiteEffectReport, mask: Mask, output_dir, n_bins: int = 50) -> None:
    emit_tables(report, output_dir)
    emit_maps(report, mask, output_dir)
    emit_histogram(eta2_distribution(report, n_bins), output_dir)


@dataclass(frozen=True)
class ComparisonRow:
    label: str
    n_F: int
    f_F: float
    n_t: int | None

    @property
    def n_t_text(self) -> str:
        return "N/A" if self.n_t is None else str(self.n_t)


def compare_summaries(summaries: Sequence[tuple[str, dict]]) -> list[ComparisonRow]:
    if not summaries:
        raise ReportError("nothing to compare")
    V0, S0 = summaries[0][1].get("V"), summaries[0][1].get("S")
    rows = []
    for label, s in summaries:
        missing = [k for k in ("V", "S", "n_F", "f_F", "n_t") if k not in s]
        if missing:
            raise ReportError(f"summary for {label!r} lacks {missing}")
        if s["V"] != V0 or s["S"] != S0:
            raise ReportError(f"report {label!r} has V={s['V']}, S={s['S']}; expected V={V0}, S={S0}")
        n_t = None if s["n_F"] == 0 else s["n_t"]
        rows.append(ComparisonRow(label, int(s["n_F"]), float(s["f_F"]), n_t))
    return rows


def compare_reports(reports: Sequence[tuple[str, SiteEffectReport]]) -> list[ComparisonRow]:
    return compare_summaries([(label, r.summary) for label, r in reports])


def write_comparison(rows: Sequence[ComparisonRow], output_dir) -> Path:
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "comparison.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "n_F", "f_F", "n_t"])
        for r in rows:
            w.writerow([r.label, r.n_F, _fmt(r.f_F), r.n_t_text])
    return path


def format_comparison(rows: Sequence[ComparisonRow]) -> str:
    width = max(len("Harmonization method"), *(len(r.label) for r in rows))
    lines = [f"{'Harmonization method':<{width}}  {'n_F':>8}  {'f_F':>5}  {'n_t':>8}"]
    for r in rows:
        lines.append(f"{r.label:<{width}}  {r.n_F:>8d}  {r.f_F:>5.2f}  {r.n_t_text:>8}")
    return "\n".join(lines)
