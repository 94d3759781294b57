"""Shared fixtures, the sensitivity-matrix recorder and the acceptance summary."""
from __future__ import annotations

import threading

import numpy as np
import pytest

from robustlens import infogeom as ig
from robustlens.adversarial import AttackSpec, TrainConfig, train
from robustlens.data import load_named
from robustlens.models import ModelConfig, init_model

# --------------------------------------------------------------------------
# every SensitivityEstimate built during the run is checked against the GNR
# bound on creation; only the scalar outcome is kept to bound memory.

GNR_LOG: list = []
_guard = threading.local()
_orig_post_init = ig.SensitivityEstimate.__post_init__


def _compressed(S: ig.SensitivityEstimate) -> ig.SensitivityEstimate:
    # tall factors are replaced by their R factor: R^T R = B^T B exactly
    b = S.factor
    if b.shape[0] <= b.shape[1]:
        return S
    return ig.SensitivityEstimate(np.linalg.qr(b, mode="r"), S.decoder)


def _recording_post_init(self):
    _orig_post_init(self)
    if getattr(_guard, "busy", False):
        return
    _guard.busy = True
    try:
        chk = ig.gnr_bound_check(_compressed(self), slack=1e-8)
        GNR_LOG.append((self.decoder, self.n, chk.mean_curvature, chk.top_curvature, chk.holds))
    finally:
        _guard.busy = False


ig.SensitivityEstimate.__post_init__ = _recording_post_init


@pytest.fixture(scope="session")
def gnr_log():
    return GNR_LOG


# --------------------------------------------------------------------------
# acceptance summary lines

RESULTS: dict = {}


@pytest.fixture(scope="session")
def verdict():
    def record(tag: str, ok: bool, detail: str = "") -> bool:
        line = f"{tag} {'PASS' if ok else 'FAIL'} {detail}".rstrip()
        RESULTS[tag] = line
        print(line)
        return ok
    return record


def pytest_collection_modifyitems(config, items):
    # acceptance runs last so the GNR log has seen every other sensitivity
    items.sort(key=lambda it: it.nodeid.startswith("tests/test_acceptance.py")
               or "test_acceptance.py" in it.nodeid)


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for tag in sorted(RESULTS, key=lambda t: int(t[1:])):
        terminalreporter.write_line(RESULTS[tag])


# --------------------------------------------------------------------------
# small trained models shared by unit tests


@pytest.fixture(scope="session")
def toy_data():
    return load_named("shapes4", "train", 400, 0), load_named("shapes4", "test", 100, 0)


@pytest.fixture(scope="session")
def toy_model(toy_data):
    tr, _ = toy_data
    cfg = ModelConfig(widths=(32, 16), num_classes=4, seed=0)
    m, _ = train(init_model(cfg), tr, AttackSpec(0.0), TrainConfig(epochs=3, eval_size=16))
    return m


@pytest.fixture(scope="session")
def toy_robust(toy_data):
    tr, _ = toy_data
    cfg = ModelConfig(widths=(32, 16), num_classes=4, seed=0)
    m, _ = train(init_model(cfg), tr, AttackSpec(1.0), TrainConfig(epochs=3, mode="at", eval_size=16))
    return m
