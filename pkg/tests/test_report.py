import csv
import json

import numpy as np
import pytest

from habench.core import HabenchError, Mask, VolumeGeometry
from habench.nifti_io import read_volume
from habench.report import (ReportError, compare_reports, compare_summaries, emit_maps, emit_tables,
                            eta2_distribution, format_comparison, generate_report, write_comparison, write_report)
from habench.special import f_sf
from conftest import make_dataset, random_dataset


def test_single_voxel_example():
    ds = make_dataset([[1.0], [2.0], [3.0], [4.0], [5.0], [6.0]], ["A"] * 3 + ["B"] * 3)
    r = generate_report(ds, 0.05)
    assert r.p_F[0] == pytest.approx(f_sf(13.5, 1, 4), rel=1e-14)
    assert r.significant_F[0]
    assert r.t_fraction[0] == 1.0
    assert r.summary["n_F"] == 1 and r.summary["n_t"] == 1 and r.summary["P"] == 1


def test_invariants(rng):
    ds = random_dataset(rng, n_sites=4, V=200, site_shift=0.5)
    r = generate_report(ds, 0.05)
    s = r.summary
    assert s["P"] == 6 and s["V"] == 200
    assert s["n_F"] == int(r.significant_F.sum())
    assert 0 < s["n_F"] < 200
    assert np.all(r.significant_F[r.t_fraction > 0])
    assert s["n_t"] == int(r.pairwise.significant.sum()) <= s["n_F"] * s["P"]
    counts = np.bincount(r.pairwise.column, weights=r.pairwise.significant, minlength=200)
    assert np.allclose(r.t_fraction, counts / 6)
    assert s["f_threshold"] == 0.05 / 200 and s["t_threshold"] == 0.05 / 1200


def test_null_report_outputs(tmp_path, rng):
    ds = make_dataset(rng.normal(size=(12, 50)), np.repeat(["A", "B", "C"], 4))
    ds = ds.with_values(ds.values * 0 + np.arange(50.0))  # no site effect at all
    r = generate_report(ds, 0.05)
    assert r.summary["n_F"] == 0 and r.summary["n_t"] is None and r.summary["f_t"] == 0.0
    write_report(r, ds.mask, tmp_path)
    assert (tmp_path / "pairwise.csv").read_text().strip().count("\n") == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["n_t"] is None
    assert set(summary) == {"V", "S", "P", "alpha", "f_threshold", "t_threshold", "n_F", "f_F", "n_t", "f_t"}
    assert np.all(read_volume(tmp_path / "sig_F.nii.gz").data == 0)
    hist = list(csv.DictReader((tmp_path / "eta2_hist.csv").open()))
    assert int(hist[0]["count"]) == 50 and sum(int(h["count"]) for h in hist) == 50


def test_maps_round_trip_and_background(tmp_path, rng):
    g = VolumeGeometry((6, 5, 2), (1, 1, 1))
    flags = np.zeros((6, 5, 2), bool)
    flags[1:5, 1:4, :] = True
    mask = Mask(g, flags)
    from habench.core import VoxelDataset
    base = make_dataset(rng.normal(size=(9, mask.n_voxels)), np.repeat(["A", "B", "C"], 3))
    ds = VoxelDataset(base.values + np.repeat([0, 2, 4], 3)[:, None] * (np.arange(mask.n_voxels) % 2),
                      mask, base.table)
    r = generate_report(ds, 0.05)
    emit_maps(r, mask, tmp_path)
    eta = read_volume(tmp_path / "eta2.nii.gz").data
    assert np.allclose(mask.extract(eta), r.eta_squared, rtol=1e-6, atol=1e-7)
    for name in ("sig_F", "eta2", "t_fraction"):
        assert np.all(read_volume(tmp_path / f"{name}.nii.gz").data[~flags] == 0)
    other = Mask(g, np.ones((6, 5, 2), bool))
    with pytest.raises(ReportError):
        emit_maps(r, other, tmp_path)


def test_tables_and_determinism(tmp_path, rng):
    ds = random_dataset(rng, n_sites=3, V=300, site_shift=0.8)
    r1 = generate_report(ds, 0.05, threads=1)
    r4 = generate_report(ds, 0.05, threads=4)
    emit_tables(r1, tmp_path / "a")
    emit_tables(r4, tmp_path / "b")
    for name in ("anova.csv", "pairwise.csv", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = list(csv.reader((tmp_path / "a" / "anova.csv").open()))
    assert len(rows) == 301 and rows[0] == ["voxel_index", "F", "p", "significant", "eta2"]
    pw = list(csv.reader((tmp_path / "a" / "pairwise.csv").open()))
    assert pw[0] == ["voxel_index", "site_a", "site_b", "t", "p", "significant", "hedges_g"]
    assert len(pw) - 1 == 3 * r1.summary["n_F"]


def test_eta2_histogram(rng):
    ds = random_dataset(rng, V=120)
    h = eta2_distribution(generate_report(ds), 20)
    assert h.counts.sum() == 120 and h.edges[0] == 0 and h.edges[-1] == 1
    with pytest.raises(ReportError):
        eta2_distribution(generate_report(ds), 0)


def test_strong_shift_eta2_mass_above_006(rng):
    n, V = 20, 100
    shift = np.repeat([0.0, 1.0, 2.0], n)[:, None] * np.ones(V)
    ds = make_dataset(shift + rng.normal(size=(3 * n, V)), np.repeat(["A", "B", "C"], n))
    r = generate_report(ds)
    assert (r.eta_squared > 0.06).sum() > (r.eta_squared <= 0.06).sum()


def test_report_preconditions():
    with pytest.raises(ReportError, match="at least 2 sites"):
        generate_report(make_dataset(np.eye(3), ["A"] * 3))
    with pytest.raises(ReportError, match="fewer than 2"):
        generate_report(make_dataset(np.eye(3), ["A", "A", "B"]))


def test_comparison(tmp_path, rng):
    ds = random_dataset(rng, V=100, site_shift=0.8)
    flat = ds.with_values(np.tile(np.arange(100.0), (ds.shape[0], 1)))
    rows = compare_reports([("none", generate_report(ds)), ("combat", generate_report(flat))])
    assert rows[1].n_t_text == "N/A"
    path = write_comparison(rows, tmp_path)
    lines = path.read_text().splitlines()
    assert lines[0] == "method,n_F,f_F,n_t" and lines[2] == "combat,0,0.0,N/A"
    text = format_comparison(rows)
    assert "N/A" in text and "none" in text
    assert len(compare_reports([("only", generate_report(ds))])) == 1
    with pytest.raises(ReportError, match="expected V"):
        compare_summaries([("a", {"V": 1, "S": 2, "n_F": 0, "f_F": 0, "n_t": None}),
                           ("b", {"V": 2, "S": 2, "n_F": 0, "f_F": 0, "n_t": None})])
