import logging

import numpy as np
import pytest

from modules import core_model
from modules.core_model import (
    JUMP_WARNING_FRACTION,
    Bounds,
    Control,
    ControlError,
    GammaMap,
    GridError,
    JumpAtom,
    ModelParseError,
    ModelValidationError,
    ParamPoint,
    Payoff,
    Penalty,
    SpaceGrid,
    TimeGrid,
    check_penalty_bounded,
    levy_moment,
    load_control,
    load_model,
    save_control,
    serialize_model,
    validate_param,
)
from tests.conftest import model_path

HEAT_TEXT = """
[time]
r = 0.0
T = 0.5
N = {N}

[space]
n = 1
lower = [-6.0]
upper = [6.0]
M = [241]

[gamma]
mode = "constant"

[[gamma.candidates]]
a = [{a}]
b = [0.0]

[payoff]
family = "quadratic"
"""


def test_validate_param_accepts_identity_diffusion():
    assert validate_param(ParamPoint.diffusion([[1.0]])) == []


def test_validate_param_flags_degenerate_matrix():
    report = validate_param(ParamPoint.diffusion([[0.0]]))
    assert any("a not strictly positive definite" in line for line in report)


def test_validate_param_flags_levy_moment():
    theta = ParamPoint.diffusion([[1.0]], jumps=[(2.0, 10.0)])
    report = validate_param(theta, Bounds(C_bound=1.0))
    assert "levy moment 20 > 1" in report


def test_validate_param_flags_asymmetry_and_bounds():
    theta = ParamPoint(a=[[20.0, 1.0], [0.0, 20.0]], b=[30.0, 0.0])
    report = validate_param(theta)
    assert "a not symmetric" in report
    assert any(line.startswith("|a|") for line in report)
    assert any(line.startswith("|b|") for line in report)


@pytest.mark.parametrize("atoms, expected", [
    ([], 0.0),
    ([(0.5, 4.0)], 1.0),
    ([(0.5, 4.0), (3.0, 1.0)], 4.0),
])
def test_levy_moment_examples(atoms, expected):
    jumps = [JumpAtom(y=[y], lam=lam) for y, lam in atoms]
    assert levy_moment(jumps) == pytest.approx(expected)


def test_levy_moment_additive_and_homogeneous():
    first = [JumpAtom(y=[0.3, 0.4], lam=2.0)]
    second = [JumpAtom(y=[-2.0, 0.0], lam=0.5)]
    assert levy_moment(first + second) == pytest.approx(levy_moment(first) + levy_moment(second))
    scaled = [JumpAtom(y=atom.y, lam=3.0 * atom.lam) for atom in first]
    assert levy_moment(scaled) == pytest.approx(3.0 * levy_moment(first))


def test_jump_atom_rejects_zero_vector():
    with pytest.raises(ValueError):
        JumpAtom(y=[0.0], lam=1.0)


def test_load_model_singleton(heat_model):
    time_grid, space, gamma, penalty, payoff = heat_model.parts()
    assert len(gamma.all_candidates()) == 1
    assert time_grid.N == 200 and space.shape == (241,)
    assert penalty.family == "zero"
    assert payoff.family == "smoothed_call"


def test_load_model_gheat_has_two_candidates(gheat_model):
    assert gheat_model.gamma.max_candidates == 2
    assert [theta.a[0][0] for theta in gheat_model.gamma.sets[0]] == [0.25, 1.0]


def test_load_model_rejects_zero_steps():
    with pytest.raises(ModelValidationError) as exc:
        load_model(HEAT_TEXT.format(N=0, a=1.0))
    assert "N must be ≥ 1" in str(exc.value)


def test_load_model_reports_invalid_candidate():
    with pytest.raises(ModelValidationError) as exc:
        load_model(HEAT_TEXT.format(N=200, a=0.0))
    assert any("not strictly positive definite" in line for line in exc.value.report)


def test_load_model_reports_toml_line():
    with pytest.raises(ModelParseError) as exc:
        load_model("[time]\nr = 0.0\nT = = 1\n")
    assert exc.value.line == 3


def test_load_model_reports_missing_field():
    text = HEAT_TEXT.format(N=10, a=1.0).replace("b = [0.0]\n", "")
    with pytest.raises(ModelParseError) as exc:
        load_model(text)
    assert exc.value.field == "gamma.candidates[0]"


def test_load_model_rejects_gap_in_set_numbers():
    text = HEAT_TEXT.format(N=10, a=1.0).replace('mode = "constant"', 'mode = "time-dependent"\nbreaks = [0.2]')
    text = text.replace("[[gamma.candidates]]\n", "[[gamma.candidates]]\nset = 1\n")
    with pytest.raises(ModelParseError):
        load_model(text)


@pytest.mark.parametrize("name", ["heat", "gheat", "levy", "heat2d", "penalized"])
def test_serialize_round_trip(name, request):
    model = request.getfixturevalue(f"{name}_model")
    again = load_model(serialize_model(model))
    assert again.model_dump(exclude={"name"}) == model.model_dump(exclude={"name"})


def test_time_grid_nodes():
    grid = TimeGrid(r=0.0, T=1.0, N=4)
    assert grid.dt == 0.25
    assert grid.node_index(0.75) == 3
    with pytest.raises(GridError):
        grid.node_index(0.3)
    with pytest.raises(ValueError):
        TimeGrid(r=1.0, T=1.0, N=2)


def test_space_grid_nearest_cell_is_clamped():
    grid = SpaceGrid(n=2, lower=[-1.0, 0.0], upper=[1.0, 2.0], M=[5, 3])
    assert grid.points().shape == (5, 3, 2)
    cells = grid.nearest_cell(np.array([[0.1, 0.9], [5.0, -3.0]]))
    assert cells[0].tolist() == [2, 4]
    assert cells[1].tolist() == [1, 0]
    with pytest.raises(ValueError):
        SpaceGrid(n=1, lower=[0.0], upper=[1.0], M=[2])


def test_gamma_set_selection():
    low, high = ParamPoint.diffusion([[0.25]]), ParamPoint.diffusion([[1.0]])
    grid = SpaceGrid(n=1, lower=[-1.0], upper=[1.0], M=[5])

    by_state = GammaMap(mode="state-dependent", breaks=[0.0], sets=[[low], [high, low]])
    assert by_state.set_index_field(0.0, grid).tolist() == [0, 0, 1, 1, 1]
    assert by_state.candidates_at(0.0, [-0.5]) == [low]

    by_time = GammaMap(mode="time-dependent", breaks=[0.5], sets=[[low], [high]])
    assert by_time.set_index_field(0.25, grid).tolist() == [0] * 5
    assert by_time.set_index_field(0.5, grid).tolist() == [1] * 5

    with pytest.raises(ValueError):
        GammaMap(mode="constant", sets=[[]])


def test_penalty_families():
    x = np.array([[1.0], [2.0]])
    theta = ParamPoint.diffusion([[1.0]], b=[2.0])
    assert Penalty(family="constant", c=5.0).evaluate(0.0, x, theta.b_vec).tolist() == [5.0, 5.0]
    assert Penalty(family="quadratic_drift", eta=1.0).evaluate(0.0, x, theta.b_vec).tolist() == [2.0, 2.0]
    assert Penalty(family="state_quadratic", kappa=0.5).evaluate(0.0, x, theta.b_vec).tolist() == [0.5, 2.0]
    table = Penalty(family="table", values=[[1.0, 2.0], [3.0]])
    assert table.scalar(0.0, [0.0], theta, set_idx=0, cand_idx=1) == 2.0
    assert table.scalar(0.0, [0.0], theta, set_idx=1, cand_idx=0) == 3.0


def test_payoff_families_and_convexity():
    x = np.array([[-1.0], [0.0], [2.0]])
    assert Payoff(family="quadratic").evaluate(x).tolist() == [1.0, 0.0, 4.0]
    assert Payoff(family="absolute").evaluate(x).tolist() == [1.0, 0.0, 2.0]
    assert Payoff(family="call", strike=0.5).evaluate(x).tolist() == [0.0, 0.0, 1.5]
    smooth = Payoff(family="smoothed_call", strike=0.0, width=0.01).evaluate(x)
    np.testing.assert_allclose(smooth, [0.0, 0.01 * np.log(2.0), 2.0], atol=1e-12)
    table = Payoff(family="tabulated", x=[-1.0, 1.0], values=[0.0, 2.0])
    assert table.evaluate(np.array([[0.0]])).tolist() == [1.0]

    assert Payoff(family="quadratic").convexity == "convex"
    assert Payoff(family="quadratic", coef=-1.0).convexity == "concave"
    assert Payoff(family="quadratic").negated().convexity == "concave"
    assert Payoff(family="affine").convexity == "affine"
    assert Payoff(family="indicator_smoothed").convexity is None


def test_check_penalty_bounded(make_model):
    model = make_model([ParamPoint.diffusion([[1.0]])], penalty=Penalty(family="constant", c=2.5))
    sup, report = check_penalty_bounded(model)
    assert sup == 2.5 and report == []


def test_control_validation(make_model):
    model = make_model([ParamPoint.diffusion([[0.25]]), ParamPoint.diffusion([[1.0]])])
    Control.constant(model, 1).validate(model)
    with pytest.raises(ControlError):
        Control.constant(model, 2).validate(model)
    bad_end = Control(subdivision=(0, model.time.N - 1), selectors=(np.zeros(model.space.shape, dtype=np.int64),))
    with pytest.raises(ControlError):
        bad_end.validate(model)


def test_control_file_round_trip(make_model, tmp_path):
    model = make_model([ParamPoint.diffusion([[0.25]]), ParamPoint.diffusion([[1.0]])])
    selectors = (np.zeros(model.space.shape, dtype=np.int64), np.ones(model.space.shape, dtype=np.int64))
    control = Control(subdivision=(0, 2, model.time.N), selectors=selectors)
    path = str(tmp_path / "control.npz")
    save_control(control, path)
    loaded = load_control(path)
    assert loaded.subdivision == control.subdivision
    for first, second in zip(loaded.selectors, control.selectors):
        np.testing.assert_array_equal(first, second)


def test_load_model_warns_on_long_jumps(caplog):
    with open(model_path("levy"), encoding="utf-8") as f:
        text = f.read()
    core_model.logger.addHandler(caplog.handler)
    try:
        with caplog.at_level(logging.WARNING, logger=core_model.logger.name):
            load_model(text)
            assert not caplog.records
            # box width 12: jumps longer than 1.2 are flagged
            load_model(text.replace("jumps = [[1.0, 2.0]]", "jumps = [[1.5, 2.0]]"))
    finally:
        core_model.logger.removeHandler(caplog.handler)
    assert any(f"{JUMP_WARNING_FRACTION:.0%} of the box width" in r.getMessage() for r in caplog.records)
