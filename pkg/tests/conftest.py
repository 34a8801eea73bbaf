import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fissureseg.synthdata import PhantomSpec, generate_phantom
from fissureseg.trainer import TrainConfig, build_model, train

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TOY_STEPS = 2000


@pytest.fixture(scope="session")
def toy_run():
    """Direct-logit model, ace+reg arm, default 32^3 phantom, full schedule.

    Shared by the trainer convergence tests and the acceptance module; the
    run takes a few minutes on one core.
    """
    case = generate_phantom(PhantomSpec())
    cfg = TrainConfig(total_steps=TOY_STEPS, model="direct-logit", seed=0)
    model = build_model(cfg, case.image.shape, 6, 1)
    report = train(model, [case], cfg, "ace+reg")
    return case, cfg, report


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
