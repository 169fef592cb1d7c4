import time

import numpy as np
import pytest

from pipeline import default_split, run_cli_pipeline
from rlens.model import ModelConfig, TrainHyper, predict_proba, train

_criteria: dict[int, dict] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            number, text = m.args
            entry = _criteria.setdefault(number, {"text": text, "items": set(), "failed": set(),
                                                  "passed": set()})
            entry["items"].add(item.nodeid)


def pytest_runtest_logreport(report):
    for entry in _criteria.values():
        if report.nodeid in entry["items"]:
            if report.failed:
                entry["failed"].add(report.nodeid)
            elif report.when == "call" and report.passed:
                entry["passed"].add(report.nodeid)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        ok = not e["failed"] and e["passed"] == e["items"]
        status = "PASS" if ok else ("FAIL" if e["failed"] else "NOT RUN")
        tr.write_line(f"criterion {number:2d} {status}: {e['text']}")


@pytest.fixture(scope="session")
def trained():
    """Default model trained on the default training split: (params, log, seconds)."""
    utts = default_split("train")
    t0 = time.perf_counter()
    params, log = train(utts, ModelConfig(), TrainHyper(), seed=0)
    return params, log, time.perf_counter() - t0


@pytest.fixture(scope="session")
def eval_split():
    return sorted(default_split("eval"), key=lambda u: u.id)


@pytest.fixture(scope="session")
def partial_split():
    return sorted(default_split("partial"), key=lambda u: u.id)


@pytest.fixture(scope="session")
def eval_scores(trained, eval_split):
    X = np.stack([u.samples for u in eval_split])
    return predict_proba(trained[0], X)[:, 1]


@pytest.fixture(scope="session")
def cli_run(tmp_path_factory):
    return run_cli_pipeline(tmp_path_factory.mktemp("cli") / "run")
