import numpy as np
import pytest

from stratcox.core import BatchLayout, Dataset, ExpressionMatrix, SurvivalRecord, validate_dataset


def make_dataset(values, time, event, batch, slide=None) -> Dataset:
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    n, p = values.shape
    ids = [f"s{i}" for i in range(n)]
    expr = ExpressionMatrix(values, ids, [f"g{j}" for j in range(p)])
    surv = {s: SurvivalRecord(float(t), int(e)) for s, t, e in zip(ids, time, event)}
    layout = BatchLayout(
        dict(zip(ids, map(str, batch))),
        None if slide is None else dict(zip(ids, map(str, slide))),
    )
    return validate_dataset(expr, surv, layout)


def random_dataset(rng, n=40, p=5, n_batches=3, censor=0.3, ties=False, beta=None) -> Dataset:
    X = rng.normal(size=(n, p))
    eta = X @ beta if beta is not None else np.zeros(n)
    time = rng.exponential(np.exp(-eta))
    if ties:
        time = np.ceil(time * 4) / 4
    time = time + 1e-3
    event = (rng.random(n) > censor).astype(int)
    event[0] = 1
    batch = np.arange(n) % n_batches
    return make_dataset(X, time, event, batch)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


# --------------------------------------------------------------------------
# acceptance reporting: tests marked ``criterion(n, title)`` are grouped and
# one pass/fail line per criterion is printed at the end of the run

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion the test belongs to")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "passed": 0, "failed": [], "notes": []})
    if call.when == "call":
        if call.excinfo is None:
            entry["passed"] += 1
        else:
            entry["failed"].append(item.name)
    elif call.excinfo is not None and call.when == "setup":
        entry["failed"].append(f"{item.name} (setup)")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "FAIL" if e["failed"] or not e["passed"] else "PASS"
        line = f"criterion {n} [{status}] {e['title']}"
        if e["failed"]:
            line += f" (failed: {', '.join(e['failed'])})"
        terminalreporter.write_line(line)
        for note in e["notes"]:
            terminalreporter.write_line(f"    {note}")


@pytest.fixture
def note(request):
    """Attach a measured value to the criterion's summary line."""
    mark = request.node.get_closest_marker("criterion")

    def add(text):
        n, title = mark.args
        _CRITERIA.setdefault(n, {"title": title, "passed": 0, "failed": [], "notes": []})["notes"].append(text)

    return add
