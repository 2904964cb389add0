import numpy as np
import pytest

from habench.core import Mask, SampleRow, SampleTable, VolumeGeometry, VoxelDataset


def make_dataset(values, sites, covariates=None, kinds=None):
    """Wrap an ``N x V`` array in a dataset with a flat ``V x 1 x 1`` mask."""
    values = np.asarray(values, dtype=float)
    n, v = values.shape
    geometry = VolumeGeometry((v, 1, 1), (1.0, 1.0, 1.0))
    mask = Mask(geometry, np.ones(v, dtype=bool))
    covariates = covariates or [{} for _ in range(n)]
    rows = tuple(SampleRow(f"img{k:03d}", str(s), c) for k, (s, c) in enumerate(zip(sites, covariates)))
    return VoxelDataset(values, mask, SampleTable(rows, kinds or {}))


def random_dataset(rng, n_sites=3, n_per_site=None, V=50, site_shift=1.0, site_scale=True):
    if n_per_site is None:
        n_per_site = rng.integers(3, 12, size=n_sites)
    sites = np.repeat([f"s{i}" for i in range(n_sites)], n_per_site)
    base = rng.normal(size=V)
    shift = site_shift * rng.normal(size=(n_sites, V))
    scale = rng.uniform(0.5, 2.0, size=(n_sites, V)) if site_scale else np.ones((n_sites, V))
    idx = np.repeat(np.arange(n_sites), n_per_site)
    values = base + shift[idx] + scale[idx] * rng.normal(size=(idx.size, V))
    return make_dataset(values, sites)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance reporting ---------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not marker.args:
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    if report.when == "call" or (report.when == "setup" and report.failed):
        _ACCEPTANCE[number] = ("PASS" if report.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, title, detail = _ACCEPTANCE[number]
        line = f"criterion {number}: {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
