import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from slicescope.dataset_io import DatasetBundle
from slicescope.knn_graph import GraphBuildConfig, build_knn_graph

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# acceptance lines collected during the run, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def toy_bundle():
    """1-D points in two tight pairs: k=1 graph is 0<->1, 2<->3."""
    return DatasetBundle(
        embeddings=np.array([[0.0], [0.1], [1.0], [1.1]]),
        losses=np.array([1.0, 0.9, 0.8, 0.7]),
        correct=np.array([False, False, True, True]),
        slice_label=np.array([True, True, False, False]),
    )


@pytest.fixture
def toy_graph(toy_bundle):
    return build_knn_graph(toy_bundle.embeddings, GraphBuildConfig(k=1))
