"""Shared fixtures.

The pretrained base takes about two minutes to build the first time and is
cached on disk afterwards. Training runs used by more than one test are
memoised per session.
"""

import pytest

from splitlora.base_model import load_base
from splitlora.denoiser import DenoiserConfig, DenoiserWeights
from splitlora.train import TrainConfig, run_training


@pytest.fixture(scope="session")
def base():
    return load_base()


class RunCache:
    def __init__(self, base):
        self.base = base
        self.runs = {}

    def get(self, variant: str, seed: int, **overrides):
        key = (variant, seed, tuple(sorted(overrides.items())))
        if key not in self.runs:
            cfg = TrainConfig(variant=variant, seed=seed, **overrides)
            self.runs[key] = run_training(self.base, cfg)
        return self.runs[key]


@pytest.fixture(scope="session")
def runs(base):
    return RunCache(base)


@pytest.fixture
def tiny_config():
    return DenoiserConfig(height=2, width=2, channels=2, d_model=4, d_txt=12, d_mlp=6, blocks=("b0",), T=10)


@pytest.fixture
def tiny_weights(tiny_config):
    return DenoiserWeights.init(tiny_config, seed=3)


# --------------------------------------------------------------------------- acceptance summary

_criteria: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "detail": []})
    if call.excinfo is not None and not call.excinfo.errisinstance(pytest.skip.Exception):
        entry["ok"] = False
    pending = getattr(item, "criterion_detail", [])
    entry["detail"] += pending
    pending.clear()


@pytest.fixture
def detail(request):
    """Attach a measured value to the acceptance summary line."""
    request.node.criterion_detail = []
    return request.node.criterion_detail.append


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        extra = f"  ({'; '.join(e['detail'])})" if e["detail"] else ""
        terminalreporter.write_line(f"[{'PASS' if e['ok'] else 'FAIL'}] {number:2d}. {e['title']}{extra}")
