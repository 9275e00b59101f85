import os

# the determinism contract is stated for single-threaded runs
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np
import pytest


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


_REPORT = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_REPORT] = []
    config.addinivalue_line("markers", "acceptance(n): one numbered acceptance criterion")


@pytest.fixture(scope="session")
def acceptance_report(request):
    """Collects one ``PASS``/``FAIL`` line per acceptance criterion."""
    return request.config.stash[_REPORT]


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_REPORT, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines):
        terminalreporter.write_line(line[1])


# Matched PreLN / PostLN training used by the lesioning comparison and the
# post-training trend checks. Both runs share seed, data and step budget.
PAIR_STEPS = 1500


@pytest.fixture(scope="session")
def trained_pair(tmp_path_factory):
    import time

    from pld.training import TrainConfig, train

    out = tmp_path_factory.mktemp("pair")
    runs, t0 = {}, time.perf_counter()
    for variant in ("preln", "postln"):
        cfg = TrainConfig.from_dict({"model": {"variant": variant}, "schedule": None,
                                     "total_steps": PAIR_STEPS, "eval_interval": PAIR_STEPS})
        runs[variant] = train(cfg, out / variant)
    runs["train_seconds"] = time.perf_counter() - t0
    runs["config"] = cfg
    return runs


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    """Default-config PLD run, its full-depth PreLN baseline, and a PLD rerun."""
    import time

    from pld.training import TrainConfig, train

    out = tmp_path_factory.mktemp("desk")
    runs, t0 = {}, time.perf_counter()
    runs["pld"] = train(TrainConfig(), out / "pld")
    base = TrainConfig()
    base.model.variant = "preln"
    base.schedule = None
    runs["base"] = train(base, out / "base")
    runs["pld_rerun"] = train(TrainConfig(), out / "pld_rerun")
    runs["seconds"] = time.perf_counter() - t0
    return runs
