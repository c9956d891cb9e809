import numpy as np
import pytest

from hetseg.labelspace import build_label_space, declare_datasets


@pytest.fixture
def wmh_space():
    """bg=0, CSF=1, GM=2, WM=3, WMH=4 with modalities T1/IR/FLAIR and T1/FLAIR."""
    return build_label_space(
        declare_datasets(
            [
                {"name": "anatomy", "role": "anatomy", "labels": ["CSF", "GM", "WM"], "modalities": ["T1", "IR", "FLAIR"]},
                {"name": "wmh", "role": "lesion", "labels": ["WMH"], "modalities": ["T1", "FLAIR"]},
            ]
        )
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
