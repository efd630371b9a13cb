from __future__ import annotations

import os
import random

import pytest

from phasenas.arch_dsl import ArchitectureSpec, Mode
from phasenas.generators import DEFAULT_SAMPLER, GenerationContext, Phase

_ACCEPTANCE: dict[str, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(label): acceptance criterion, reported in the terminal summary")
    config.addinivalue_line("markers", "slow: long-running sweep, enabled with PHASENAS_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("PHASENAS_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="slow sweep; set PHASENAS_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marker = _markers.get(report.nodeid)
    if marker is None:
        return
    status = "PASS" if report.outcome == "passed" else "FAIL"
    _ACCEPTANCE[marker] = (status, f"{report.duration:.1f}s")


_markers: dict[str, str] = {}


def pytest_itemcollected(item):
    m = item.get_closest_marker("acceptance")
    if m is not None:
        _markers[item.nodeid] = m.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_ACCEPTANCE):
        status, duration = _ACCEPTANCE[label]
        terminalreporter.write_line(f"{status}  {label}  ({duration})")


def sample_arch(seed: int, mode: Mode = Mode.CLASSIFICATION, resolution: int = 32) -> ArchitectureSpec:
    """Random valid architecture from the catalog sampler."""
    ctx = GenerationContext(Phase.EXPLORATION, mode, resolution=resolution)
    return DEFAULT_SAMPLER.random(random.Random(seed), ctx)


@pytest.fixture(scope="session")
def oracle_table():
    """Full micro-space table at the pinned benchmark config (tabulated once per session)."""
    from phasenas.bench_oracle import BENCH_SCORE_CONFIG, tabulate

    return tabulate(BENCH_SCORE_CONFIG)
