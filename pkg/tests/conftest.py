import numpy as np
import pytest
import torch

from relcollab.data import DomainTag, PhantomConfig, generate_phantom_dataset


@pytest.fixture(scope="session")
def phantom_small():
    cfg = PhantomConfig(shape=(64, 64), n_target_labeled=6, n_target_unlabeled=4, n_auxiliary=6, seed=3)
    ds = generate_phantom_dataset(cfg)
    return {
        "labeled": [s for s in ds if s.domain_tag is DomainTag.TARGET_LABELED],
        "unlabeled": [s for s in ds if s.domain_tag is DomainTag.TARGET_UNLABELED],
        "auxiliary": [s for s in ds if s.domain_tag is DomainTag.AUXILIARY],
    }


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


# ---------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per criterion-marked test

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    n, title = mark.args
    prev = _CRITERIA.get(n, (title, "PASS", ""))
    status = "FAIL" if rep.failed or prev[1] == "FAIL" else "PASS"
    detail = prev[2] or dict(item.user_properties).get("detail", "")
    _CRITERIA[n] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[n]
        line = f"criterion {n} [{title}]: {status}"
        terminalreporter.write_line(line + (f" -- {detail}" if detail else ""))
