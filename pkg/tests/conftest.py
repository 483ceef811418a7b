import pytest
import torch
from hypothesis import HealthCheck, settings

from imbssl.dataset import synthetic_split
from imbssl.nn_core import BackboneConfig, HeadConfig, init_bundle

from .helpers import ACCEPTANCE

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def _artifact_root(tmp_path, monkeypatch):
    monkeypatch.setenv("IMBSSL_ARTIFACT_ROOT", str(tmp_path))


@pytest.fixture
def tiny_bundle():
    return init_bundle(BackboneConfig("tiny-conv", 16), HeadConfig(), seed=0)


@pytest.fixture
def toy_images():
    return synthetic_split(4, 16, seed=3, pattern="grating")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
