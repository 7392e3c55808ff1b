import numpy as np
import pytest

from kroute import worldgen as wg
from kroute.backbone import ModelConfig, init_backbone, vocab_for_world


@pytest.fixture(scope="session")
def small_world():
    cfg = wg.WorldConfig(n_items=40, n_categories=4, n_intents=8, n_sessions=60, seed=5)
    world = wg.generate_world(cfg)
    sessions = wg.generate_sessions(world)
    return world, sessions, wg.oracle_knowledge(world, sessions), vocab_for_world(world)


@pytest.fixture(scope="session")
def tiny_config(small_world):
    vocab = small_world[3]
    return ModelConfig(layers=2, d_model=16, heads=2, d_ff=24, max_len=96, vocab_size=len(vocab))


@pytest.fixture
def tiny_backbone(tiny_config):
    w = init_backbone(tiny_config, seed=0)
    # untrained weights are nearly uniform; widen them so mixtures actually differ
    rng = np.random.default_rng(9)
    for t in w.params.values():
        if t.data.ndim == 2:
            t.data[...] = rng.normal(0, 0.3, size=t.shape).astype(t.dtype)
    w.freeze()
    return w


_ACCEPTANCE: dict[str, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    label, text = mark.kwargs["label"], mark.kwargs["text"]
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _ACCEPTANCE[label] = ("PASS" if rep.passed else "FAIL", text)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_ACCEPTANCE, key=lambda s: (int(s.rstrip("abcd")), s)):
        status, text = _ACCEPTANCE[label]
        terminalreporter.write_line(f"[{status}] criterion {label}: {text}")
