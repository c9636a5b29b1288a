import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

from linkboost.kg import TripleStore  # noqa: E402


def make_store(train, valid=(), test=(), entities=None, relations=None):
    train = np.array(train, dtype=np.int64).reshape(-1, 3)
    valid = np.array(valid, dtype=np.int64).reshape(-1, 3)
    test = np.array(test, dtype=np.int64).reshape(-1, 3)
    allt = np.concatenate([train, valid, test])
    if entities is None:
        E = int(allt[:, [0, 2]].max()) + 1 if len(allt) else 1
        entities = [f"e{i}" for i in range(E)]
    if relations is None:
        R = int(allt[:, 1].max()) + 1 if len(allt) else 1
        relations = [f"r{i}" for i in range(R)]
    return TripleStore(entities, relations, train, valid, test)


@pytest.fixture
def store_factory():
    return make_store


def write_split_files(directory, rows_by_split):
    paths = []
    for name in ("train", "valid", "test"):
        p = os.path.join(directory, f"{name}.txt")
        with open(p, "w") as f:
            for row in rows_by_split.get(name, []):
                f.write("\t".join(row) + "\n")
        paths.append(p)
    return paths


# one pass/fail line per acceptance criterion at the end of the run
_criteria = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    key = name[len("test_criterion_"):]
    if report.when == "setup" and report.skipped:
        _criteria[key] = ("NOT RUN", str(report.longrepr[2]) if isinstance(report.longrepr, tuple)
                          else "")
    elif report.when == "call":
        if report.skipped:
            reason = report.longrepr[2] if isinstance(report.longrepr, tuple) else ""
            _criteria[key] = ("NOT RUN", reason)
        else:
            _criteria[key] = ("PASS" if report.passed else "FAIL", "")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_criteria, key=lambda k: (int(k.split("_")[0]), k)):
        status, reason = _criteria[key]
        line = f"criterion {key}: {status}"
        if reason:
            line += f" ({reason.replace('Skipped: ', '')})"
        terminalreporter.write_line(line)
