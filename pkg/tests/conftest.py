import time

import pytest
from hypothesis import settings

from macrogrid.config import REFERENCE_SCENARIO, load_config
from macrogrid.mtdc import sequential_acdc_powerflow

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

# acceptance outcomes, filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def reference_config():
    return load_config(REFERENCE_SCENARIO)


@pytest.fixture(scope="session")
def reference_acdc(reference_config):
    c = reference_config
    return sequential_acdc_powerflow(c.ei, c.wi, c.mtdc)


@pytest.fixture(scope="session")
def reference_pipeline(tmp_path_factory):
    """simulate -> analyze -> freqscan -> design -> validate on the shipped
    scenario through the command-line entry point."""
    from macrogrid.cli import main
    out = tmp_path_factory.mktemp("pipeline")
    codes = {}
    t0 = time.perf_counter()
    for verb in ("simulate", "analyze", "freqscan", "design", "validate"):
        codes[verb] = main([verb, "--out-dir", str(out)])
    elapsed = time.perf_counter() - t0
    return {"out": out, "codes": codes, "elapsed": elapsed}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, msg = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {msg}")
