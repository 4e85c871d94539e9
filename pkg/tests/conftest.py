import re

import numpy as np
import pytest
from PIL import Image

_CRITERION = re.compile(r"test_criterion_(\d+)_")
_results: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    name = report.nodeid.split("::")[-1]
    if report.skipped:
        _results[n] = ("SKIP", name)
    elif report.failed:
        _results[n] = ("FAIL", name)
    elif report.when == "call":
        _results[n] = ("PASS", name)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        status, name = _results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {name}")


def write_pair_tree(root, counts, size=(8, 8), patients=None):
    """Create ``root/{split}/{hne,mihc}/<id>.png`` with tiny images."""
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size + (3,), dtype=np.uint8)
    ids = {}
    for split, n in zip(("train", "val", "test"), counts):
        for kind in ("hne", "mihc"):
            (root / split / kind).mkdir(parents=True, exist_ok=True)
        ids[split] = []
        for i in range(n):
            sid = f"{split}_{i:05d}"
            for kind in ("hne", "mihc"):
                Image.fromarray(img).save(root / split / kind / f"{sid}.png")
            ids[split].append(sid)
    return ids


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
