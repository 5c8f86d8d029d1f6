import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from loadshift.flexibility import (
    DimensionGuardError,
    FlexibilitySet,
    build_box_with_balance,
    contains,
    from_config,
    grid_points,
    vertices,
)

D_FLEX = np.array([200.0, 200.0, 400.0])


def test_box_bounds():
    fs = build_box_with_balance(0.5, D_FLEX)
    lo, hi = fs.bounds()
    assert hi.tolist() == [100.0, 100.0, 200.0]
    assert lo.tolist() == [-100.0, -100.0, -200.0]


@pytest.mark.parametrize("alpha", [-0.1, 1.5])
def test_alpha_range(alpha):
    with pytest.raises(ValueError):
        build_box_with_balance(alpha, D_FLEX)


def test_alpha_zero_only_origin():
    fs = build_box_with_balance(0.0, D_FLEX)
    assert list(map(list, grid_points(fs, 1.0))) == [[0.0, 0.0, 0.0]]
    assert not contains(fs, [1e-3, -1e-3, 0.0])


def test_zero_flex_coordinate_pinned():
    fs = build_box_with_balance(1.0, np.array([0.0, 50.0, 50.0]))
    assert not contains(fs, [10.0, -10.0, 0.0])
    assert contains(fs, [0.0, 10.0, -10.0])
    assert fs.free_dimension() == 1


def test_membership_examples():
    fs = build_box_with_balance(0.5, D_FLEX)
    assert contains(fs, [54.0, 96.0, -150.0])
    assert not contains(fs, [120.0, 0.0, -120.0])
    assert contains(fs, [0.0, 0.0, 0.0])
    assert not contains(fs, [10.0, 0.0, 0.0])


def test_grid_contains_table_shifts():
    pts = {tuple(p) for p in grid_points(build_box_with_balance(0.5, D_FLEX), 6.0)}
    assert (-96.0, -96.0, 192.0) in pts
    assert (54.0, 96.0, -150.0) in pts
    pts25 = {tuple(p) for p in grid_points(build_box_with_balance(0.25, D_FLEX), 6.0)}
    assert (-48.0, -48.0, 96.0) in pts25


def test_coarse_step_gives_origin():
    pts = list(grid_points(build_box_with_balance(0.5, D_FLEX), 300.0))
    assert len(pts) == 1 and not np.any(pts[0])


def test_grid_deterministic_and_inside():
    fs = build_box_with_balance(0.5, D_FLEX)
    a = [p.tolist() for p in grid_points(fs, 6.0)]
    b = [p.tolist() for p in grid_points(fs, 6.0)]
    assert a == b
    assert a == sorted(a)
    assert all(contains(fs, p, 1e-9) for p in a)
    assert [0.0, 0.0, 0.0] in [[abs(x) for x in p] for p in a]


def test_step_must_be_positive():
    with pytest.raises(ValueError):
        list(grid_points(build_box_with_balance(0.5, D_FLEX), 0.0))


def test_dimension_guard():
    fs = build_box_with_balance(0.5, np.full(6, 10.0))
    with pytest.raises(DimensionGuardError):
        next(grid_points(fs, 1.0))
    # the guard counts movable coordinates only
    fs = build_box_with_balance(0.5, np.array([10.0, 10.0, 10.0, 0.0, 0.0, 0.0]))
    assert sum(1 for _ in grid_points(fs, 5.0)) > 1


def test_q_must_be_nonnegative():
    with pytest.raises(ValueError):
        FlexibilitySet(np.eye(2), np.array([1.0, -1.0]))


def test_general_polytope_config():
    # |delta_0| <= 5 only, delta_1 free apart from balance
    fs = from_config({"T": [[1, 0], [-1, 0]], "q": [5, 5]}, np.array([1.0, 1.0]))
    lo, hi = fs.bounds()
    assert lo.tolist() == [-5.0, -5.0] and hi.tolist() == [5.0, 5.0]
    assert contains(fs, [5.0, -5.0])
    assert fs.to_dict() == {"T": [[1.0, 0.0], [-1.0, 0.0]], "q": [5.0, 5.0]}


def test_config_errors():
    with pytest.raises(ValueError):
        from_config({}, D_FLEX)
    with pytest.raises(ValueError):
        from_config({"T": [[1, 0]], "q": [1]}, D_FLEX)
    assert from_config({"alpha": 0.25}, D_FLEX).to_dict() == {"alpha": 0.25}


def test_vertices_of_three_zone_box():
    vs = {tuple(v) for v in vertices(build_box_with_balance(0.5, D_FLEX))}
    assert (-100.0, -100.0, 200.0) in vs and (100.0, 100.0, -200.0) in vs
    assert (100.0, -100.0, 0.0) in vs
    assert all(abs(sum(v)) < 1e-9 for v in vs)


shift = st.lists(st.floats(-1.0, 1.0), min_size=3, max_size=3)


@given(shift, st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_symmetry_and_nesting(w, a1, a2):
    a1, a2 = sorted((a1, a2))
    w = np.array(w)
    w = w - w.mean()
    f1, f2 = build_box_with_balance(a1, D_FLEX), build_box_with_balance(a2, D_FLEX)
    delta = w * a1 * 100.0
    if contains(f1, delta):
        assert contains(f1, -delta)
        assert contains(f2, delta)
