import pytest

TINY = """\
[experiment]
name = tiny
repeats = 2
output_dir = {out}

[shape]
num_layers = 2
hidden = 16
heads = 2
ffn_dim = 32
vocab = 48
max_len = 16

[method]
method = {method}
{extra}
[train]
max_epochs = 2
batch_size = 16

[task]
train = 64
val = 32
test = 32

[pretrain]
epochs = 1
corpus_size = 64
"""


@pytest.fixture
def tiny_config(tmp_path):
    """Writer for small experiment files whose results land under ``tmp_path/results``."""

    def write(method="ln", extra="", name=None):
        path = tmp_path / f"{name or method.replace('+', '_')}.ini"
        path.write_text(TINY.format(out=tmp_path / "results", method=method, extra=extra))
        return path

    return write


# -- acceptance summary -------------------------------------------------------------

_criteria: dict[int, str] = {}
_node_criterion: dict[str, int] = {}
_outcomes: dict[int, list[bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion a test belongs to")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            number, title = mark.args
            _criteria[number] = title
            _node_criterion[item.nodeid] = number


def pytest_runtest_logreport(report):
    number = _node_criterion.get(report.nodeid)
    if number is None:
        return
    if report.when == "call" or report.failed:
        _outcomes.setdefault(number, []).append(report.passed and not report.skipped)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        results = _outcomes.get(number)
        status = "NOT RUN" if not results else ("PASS" if all(results) else "FAIL")
        terminalreporter.write_line(f"criterion {number:>2} {_criteria[number]}: {status}")
