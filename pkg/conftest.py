import numpy as np
import pytest

from app.schemas.experiment import BundleSpec, GeometrySpec

WARPED_Q2 = {
    "name": "warped-q2", "p": 1, "q": 2,
    "g_F": [{"mode": [0, 0], "cos": [[1.0]]}, {"mode": [1, 0], "cos": [[0.2]]}],
}

WARPED_KK_Q2 = {
    "name": "warped-kk-q2", "p": 1, "q": 2,
    "g_F": [{"mode": [0, 0], "cos": [[1.0]]}, {"mode": [1, 0], "cos": [[0.2]]}],
    "g_B": [{"mode": [0, 0], "cos": [[1.0, 0.0], [0.0, 1.0]]}, {"mode": [0, 1], "cos": [[0.1, 0.0], [0.0, 0.1]]}],
    "A": [{"mode": [0, 1], "sin": [[0.3, 0.0]]}],
}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def flat_q1():
    return GeometrySpec(name="flat-q1", p=1, q=1).build()


@pytest.fixture
def kk_q1():
    """Constant connection form: Kaluza-Klein metric with totally geodesic fibres."""
    return GeometrySpec.model_validate({"name": "kk-q1", "p": 1, "q": 1,
                                        "A": [{"mode": [0], "cos": [[0.5]]}]}).build()


@pytest.fixture
def flat_q2():
    return GeometrySpec(name="flat-q2", p=1, q=2).build()


@pytest.fixture
def warped_q2():
    return GeometrySpec.model_validate(WARPED_Q2).build()


@pytest.fixture
def warped_kk_q2():
    return GeometrySpec.model_validate(WARPED_KK_Q2).build()


@pytest.fixture
def line_bundle_q2():
    return BundleSpec.model_validate({"rank": 1, "connection": [
        [{"mode": [0, 0], "cos": [[0.5]]}],
        [{"mode": [1, 0], "cos": [[0.3]]}],
    ]}).build()
