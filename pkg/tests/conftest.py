import numpy as np
import pytest

from nlmefit.data import IndividualData, PopulationData
from nlmefit.model import parse_model, validate

EXAMPLE1_MODEL = """\
# one-compartment oral PK, inline eta on clearance
state A1, A2
covariate DOSE
theta ka=1.0 CL=3.0 V=20.0
eta eta1
ode A1' = -ka*A1
ode A2' = ka*A1 - CL*exp(eta1)/V*A2
init A1 = DOSE
obs y1 = A2/V
sigma prop(y1: sigma_prop=0.1)
positive ka, CL, V
omega diagonal
"""

EXAMPLE2_MODEL = """\
# PKPD with indirect response, phi-parametrized clearance and baseline
state A1, A2, R
covariate DOSE
theta ka=1.0 CL=3.0 V=20.0 kout=0.5 E0=100.0 EC50=5.0
eta eta1, eta2
phi CLind = CL*exp(eta1)
phi E0ind = E0*exp(eta2)
ode A1' = -ka*A1
ode A2' = ka*A1 - CLind/V*A2
ode R' = kout*(E0ind*(1 - (A2/V)/(EC50 + A2/V)) - R)
init A1 = DOSE
init R = E0ind
obs y1 = A2/V
obs y2 = R
sigma user(y1: sadd1^2 + (sprop*(A2/V))^2, y2: sadd2^2)
sigmaparam sadd1=0.1 sprop=0.1 sadd2=2.0
positive ka, CL, V, kout, E0, EC50, sadd1, sprop, sadd2
omega full
"""

EXAMPLE3_MODEL = """\
# PKPD with stochastic drug response
state A1, A2, R
covariate DOSE
theta ka=1.0 CL=3.0 V=20.0 kout=0.5 E0=100.0 EC50=5.0 g=10.0
eta eta1, eta2
phi CLind = CL*exp(eta1)
phi E0ind = E0*exp(eta2)
ode A1' = -ka*A1
ode A2' = ka*A1 - CLind/V*A2
sde R' = kout*(E0ind*(1 - (A2/V)/(EC50 + A2/V)) - R) + g*w1
noise w1
init A1 = DOSE
init R = E0ind
obs y1 = A2/V
obs y2 = R
sigma user(y1: sadd1^2 + (sprop*(A2/V))^2, y2: sadd2^2)
sigmaparam sadd1=0.1 sprop=0.1 sadd2=2.0
positive ka, CL, V, kout, E0, EC50, g, sadd1, sprop, sadd2
omega diagonal
"""

SAMPLING_TIMES = [0.25, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0, 18.0, 24.0]


@pytest.fixture(scope="session")
def example1_model():
    return validate(parse_model(EXAMPLE1_MODEL))


@pytest.fixture(scope="session")
def example2_model():
    return validate(parse_model(EXAMPLE2_MODEL))


@pytest.fixture(scope="session")
def example3_model():
    return validate(parse_model(EXAMPLE3_MODEL))


def make_design(n_per_group, doses, times=SAMPLING_TIMES, n_obs=1):
    """Design-only population (observations NaN-masked as fully observed)."""
    individuals = []
    counter = 1
    for dose in doses:
        for _ in range(n_per_group):
            individuals.append(IndividualData(
                id=str(counter), times=np.asarray(times, dtype=float),
                obs=np.zeros((len(times), n_obs)), rules={"DOSE": float(dose)}))
            counter += 1
    return PopulationData(individuals=tuple(individuals))
