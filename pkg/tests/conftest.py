import numpy as np
import pytest

from dimfuse.models import SensorModel, SystemModel


@pytest.fixture(scope="session")
def example1_model() -> SystemModel:
    # Unstable two-state benchmark; the sensor must read the second component:
    # reading the first leaves the unstable second mode unobservable.
    return SystemModel(
        A=[[1.25, 0.0], [1.0, 1.1]],
        Qw=[[20.0, 0.0], [0.0, 20.0]],
        sensors=(SensorModel(C=[[0.0, 1.0]], Qv=[[2.5]], id=0),),
    )


@pytest.fixture(scope="session")
def example2_model() -> SystemModel:
    A = [[1.0156, 0.0139, 0.0457, 0.0971],
         [-0.0353, 0.9997, -0.0008, -0.0017],
         [-0.0526, -0.0448, 0.9625, -0.0797],
         [-0.008, -0.0505, -0.0903, 0.9011]]
    Qw = [[0.04, 0.1, 0.06, 0.08],
          [0.1, 0.25, 0.15, 0.2],
          [0.06, 0.15, 0.09, 0.12],
          [0.08, 0.2, 0.12, 0.16]]
    C1 = [[1, 0, 1, 0], [0, 1, 0, 0], [0, 1, 1, 0], [1, 0, 1, 0]]
    C2 = [[1, 0, 0, 1], [1, 0, 1, 0], [0, 0, 0, 1], [1, 0, 1, 0]]
    return SystemModel(A=A, Qw=Qw, sensors=(
        SensorModel(C=C1, Qv=np.diag([0.9, 0.6, 0.9, 0.4]), id=0),
        SensorModel(C=C2, Qv=np.diag([0.3, 0.4, 0.5, 0.2]), id=1),
    ))


EX2_PROBS_1 = [0.3, 0.2, 0.1, 0.1, 0.1, 0.2]
EX2_PROBS_2 = [0.2, 0.1, 0.2, 0.1, 0.3, 0.1]


@pytest.fixture(scope="session")
def example2_schemes():
    from dimfuse.channel import build_scheme
    return [build_scheme(4, 2, EX2_PROBS_1, node=0),
            build_scheme(4, 2, EX2_PROBS_2, node=1)]


def random_toy_model(rng: np.random.Generator, n: int = 2, L: int = 2,
                     stable: bool = True) -> SystemModel:
    """A small random model with invertible measurement-noise covariances."""
    A = rng.normal(scale=0.6, size=(n, n))
    if stable:
        rho = max(abs(np.linalg.eigvals(A)))
        A = A / (rho / 0.9) if rho > 0.9 else A
    B = rng.normal(size=(n, n)) * 0.4
    Qw = B @ B.T + 0.05 * np.eye(n)
    sensors = []
    for i in range(L):
        C = rng.normal(size=(1, n))
        Qv = np.array([[0.2 + rng.random()]])
        sensors.append(SensorModel(C=C, Qv=Qv, id=i))
    return SystemModel(A=A, Qw=Qw, sensors=tuple(sensors))
