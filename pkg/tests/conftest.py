import os

import numpy as np
import pytest

from modules.core_model import GammaMap, Model, ParamPoint, Payoff, Penalty, SpaceGrid, TimeGrid, load_model_file
from modules.pde_engine import max_admissible_dt

MODELS_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "resources", "models")


def model_path(name: str) -> str:
    return os.path.join(MODELS_DIR, f"{name}.toml")


@pytest.fixture
def heat_model() -> Model:
    return load_model_file(model_path("heat"))


@pytest.fixture
def gheat_model() -> Model:
    return load_model_file(model_path("gheat"))


@pytest.fixture
def levy_model() -> Model:
    return load_model_file(model_path("levy"))


@pytest.fixture
def heat2d_model() -> Model:
    return load_model_file(model_path("heat2d"))


@pytest.fixture
def penalized_model() -> Model:
    return load_model_file(model_path("penalized"))


def small_model(candidates, payoff=None, penalty=None, lower=-3.0, upper=3.0, M=61, T=0.2, N=None,
                mode="constant", breaks=None, sets=None) -> Model:
    """1D model on a coarse grid with N chosen at the CFL limit unless given."""
    model = Model(
        time=TimeGrid(r=0.0, T=T, N=N or 1),
        space=SpaceGrid(n=1, lower=[lower], upper=[upper], M=[M]),
        gamma=GammaMap(mode=mode, breaks=breaks or [], sets=sets or [candidates]),
        penalty=penalty or Penalty(family="zero"),
        payoff=payoff or Payoff(family="quadratic"),
    )
    if N is None:
        model = model.with_time(N=int(np.ceil(T / (0.95 * max_admissible_dt(model)))))
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def make_model():
    return small_model


def random_small_model(rng, M=61, T=0.2) -> Model:
    """Random 1D model: up to three candidates per set, any selection mode, table penalty, random payoff."""
    mode = str(rng.choice(["constant", "time-dependent", "state-dependent"]))
    n_sets = 1 if mode == "constant" else 2
    sets = []
    for _ in range(n_sets):
        candidates = []
        for _ in range(int(rng.integers(1, 4))):
            jumps = [(float(rng.uniform(0.2, 0.8) * rng.choice([-1.0, 1.0])), float(rng.uniform(0.1, 1.0)))] \
                if rng.random() < 0.4 else None
            candidates.append(ParamPoint.diffusion([[float(rng.uniform(0.2, 1.0))]], b=[float(rng.uniform(-0.5, 0.5))],
                                                   jumps=jumps))
        sets.append(candidates)
    breaks = {"constant": None, "time-dependent": [0.5 * T], "state-dependent": [float(rng.uniform(-1.0, 1.0))]}[mode]
    family = str(rng.choice(["quadratic", "absolute", "smoothed_call", "indicator_smoothed"]))
    return small_model(
        None, M=M, T=T, mode=mode, breaks=breaks, sets=sets,
        penalty=Penalty(family="table", values=[rng.uniform(0.0, 1.0, size=len(s)).tolist() for s in sets]),
        payoff=Payoff(family=family, strike=float(rng.uniform(-0.5, 0.5)), width=0.3),
    )
