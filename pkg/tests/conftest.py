import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from siamface.synthetic import write_orl_like_tree  # noqa: E402


@pytest.fixture(scope="session")
def small_tree(tmp_path_factory):
    """Five subjects x ten images in the ORL on-disk layout."""
    root = tmp_path_factory.mktemp("orl_small")
    write_orl_like_tree(root, subjects=5, images=10, seed=1)
    return root


@pytest.fixture(scope="session")
def surrogate_tree(tmp_path_factory):
    """Full-size (40 x 10) procedural corpus in the ORL layout."""
    root = tmp_path_factory.mktemp("orl_surrogate")
    write_orl_like_tree(root, subjects=40, images=10, seed=0)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import report

    if report.LINES:
        terminalreporter.section("acceptance criteria")
        for line in report.LINES:
            terminalreporter.write_line(line)
