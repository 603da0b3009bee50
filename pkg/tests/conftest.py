import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from diffcap import denoiser as dn
from diffcap.scenegen import generate_dataset
from diffcap.schedule import build_schedule
from diffcap.sampler import Denoiser

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def tiny_config():
    return dn.DenoiserConfig(vocab_size=12, layers=2, d_model=16, heads=2, d_ff=32, l_max=8)


@pytest.fixture
def tiny_params(tiny_config):
    return dn.init_params(tiny_config, seed=3)


@pytest.fixture
def tiny_model(tiny_config, tiny_params):
    sched = build_schedule(tiny_config.T, tiny_config.vocab_size - 2, 0.1)
    return Denoiser(tiny_params, tiny_config, sched)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "scenes.jsonl"
    generate_dataset(200, 11, path)
    return path


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria (trains cached models)")


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        ok, detail = mod.RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
