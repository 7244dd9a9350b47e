import hypothesis
import numpy as np
import pytest

from bidplan.market import Mechanism, make_contract, ramp_curve

hypothesis.settings.register_profile(
    "ci", max_examples=60, deadline=None,
    suppress_health_check=[hypothesis.HealthCheck.too_slow])
hypothesis.settings.load_profile("ci")


@pytest.fixture(scope="session")
def ramp():
    """Identity-like curve: win probability equals the bid on [0, 1]."""
    return ramp_curve()


@pytest.fixture(scope="session")
def single_contract():
    return make_contract(0, {0}, 5.0, 10.0)


@pytest.fixture(params=[Mechanism.FIRST_PRICE, Mechanism.SECOND_PRICE],
                ids=["first", "second"])
def mechanism(request):
    return request.param
