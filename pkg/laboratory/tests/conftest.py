"""
Shared fixtures for laboratory tests.
The mollified curve is tabulated once per params and cached, so evaluator fixtures are session scoped.
"""
import pytest

from laboratory.tests.factories import (
    ConeSpecFactory,
    MechanicalSystemFactory,
    ModelParamsFactory,
    ProfileEvaluatorFactory,
)


@pytest.fixture(scope="session")
def arnold_cone():
    return ConeSpecFactory()


@pytest.fixture(scope="session")
def identity_cone():
    return ConeSpecFactory(identity=True)


@pytest.fixture(scope="session")
def params():
    return ModelParamsFactory()


@pytest.fixture(scope="session")
def evaluator(arnold_cone, params):
    return ProfileEvaluatorFactory(cone=arnold_cone, params=params)


@pytest.fixture(scope="session")
def arnold_system():
    return MechanicalSystemFactory()


@pytest.fixture
def lab_output(tmp_path):
    """Fresh output directory for one command run."""
    return tmp_path / "lab_output"
