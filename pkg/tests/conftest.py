import json
from pathlib import Path

import numpy as np
import pytest

from pavglm import Curve, Dataset, ResponseFamily, VarianceParams

ORACLES = Path(__file__).parent / "oracles"


def load_oracle(name):
    return json.loads((ORACLES / name).read_text())


@pytest.fixture
def nb_family():
    return ResponseFamily("negative_binomial", r=18.632)


@pytest.fixture
def small_params():
    return VarianceParams(amp_scale=0.1, amp_smoothness=1.5, amp_range=0.2, warp_scale=0.02, warp_range=0.1)


def toy_dataset(family, n_per_group=3, groups=("a", "b"), seed=3, m=12):
    """Small NB dataset with smooth group means; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, 1.0, m)
    curves = []
    for gi, g in enumerate(groups):
        mean = 2.5 + np.sin(np.pi * t * (1 + 0.5 * gi))
        for k in range(n_per_group):
            eta = mean + 0.1 * rng.standard_normal()
            y = family.sample(eta, seed=rng)
            curves.append(Curve(f"{g}{k}", g, t, y))
    return Dataset(curves, family, list(groups))


# -- acceptance criteria summary ---------------------------------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion the test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "tests": []})
    xfail = hasattr(rep, "wasxfail")
    ok = rep.passed and not xfail
    entry["tests"].append((item.name, ok, xfail, getattr(item, "detail", "")))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        entry = _CRITERIA[n]
        failed = [name for name, ok, _, _ in entry["tests"] if not ok]
        status = "PASS" if not failed else "FAIL"
        details = "; ".join(d for *_, d in entry["tests"] if d)
        line = f"criterion {n:>2} {status}  {entry['title']}"
        if failed:
            line += f"  [failing: {', '.join(failed)}]"
        if details:
            line += f"  ({details})"
        terminalreporter.write_line(line)


@pytest.fixture
def measured(request):
    """Attach a short measured-value note to the acceptance summary line."""

    def note(text):
        request.node.detail = text

    return note
