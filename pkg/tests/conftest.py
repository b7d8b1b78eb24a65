import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from fmpn.dataset import load_manifest  # noqa: E402
from fmpn.synthdata import SynthSpec, generate  # noqa: E402

torch.set_num_threads(1)

TINY = dict(n_classes=3, subjects=4, samples_per_subject_per_class=2, image_size=32, seed=5)


@pytest.fixture
def tiny_corpus(tmp_path_factory):
    """Fresh 3-class, 4-subject corpus at 32 px (function scoped: tests may mutate it)."""
    spec = SynthSpec(**TINY)
    out = tmp_path_factory.mktemp("tiny")
    generate(spec, out)
    return load_manifest(out / "manifest.csv"), spec


@pytest.fixture
def tiny_identical(tmp_path_factory):
    spec = SynthSpec(**dict(TINY, noise_sigma=0.0, amplitude=0.0))
    out = tmp_path_factory.mktemp("tiny_identical")
    generate(spec, out)
    return load_manifest(out / "manifest.csv"), spec


# acceptance summary: one line per criterion at the end of the run
_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    _CRITERIA[number] = (title, call.excinfo is None, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[number]
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
