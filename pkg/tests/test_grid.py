import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointinst3d.grid import build_grid_index, radius_neighbors
from pointinst3d.oracles import linear_scan_neighbors


def test_empty_index():
    index = build_grid_index(np.empty((0, 3)), 0.1)
    assert index.cells == {}
    assert radius_neighbors(index, np.zeros(3), 0.5).size == 0


def test_single_point_origin_cell():
    index = build_grid_index(np.zeros((1, 3)), 0.1)
    assert set(index.cells) == {(0, 0, 0)}
    assert radius_neighbors(index, np.zeros(3), 1e-9).tolist() == [0]


def test_every_point_retrievable_from_its_cell():
    rng = np.random.default_rng(0)
    coords = rng.uniform(-5, 5, size=(10_000, 3))
    cell = 0.37
    index = build_grid_index(coords, cell)
    total = 0
    for key, members in index.cells.items():
        expected = np.floor(coords[members] / cell).astype(np.int64)
        assert np.all(expected == np.asarray(key))
        total += len(members)
    assert total == 10_000


def test_strict_boundary_exclusive():
    coords = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    index = build_grid_index(coords, 0.5)
    assert radius_neighbors(index, coords[0], 1.0).tolist() == [0]
    assert radius_neighbors(index, coords[0], 1.0 + 1e-12).tolist() == [0, 1]


def test_non_finite_coordinate_names_index():
    coords = np.zeros((3, 3))
    coords[2, 1] = np.inf
    with pytest.raises(ValueError, match="index 2"):
        build_grid_index(coords, 0.1)


def test_matches_linear_scan_500_points():
    rng = np.random.default_rng(1)
    coords = rng.uniform(0, 2, size=(500, 3))
    index = build_grid_index(coords, 0.25)
    for _ in range(50):
        q = rng.uniform(0, 2, size=3)
        r = rng.uniform(0.05, 0.8)
        fast = radius_neighbors(index, q, r)
        slow = linear_scan_neighbors(coords, q, r)
        assert set(fast.tolist()) == set(slow.tolist())


def test_matches_linear_scan_100_seeds():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 120))
        coords = rng.uniform(-1, 1, size=(n, 3))
        index = build_grid_index(coords, float(rng.uniform(0.05, 0.5)))
        for _ in range(3):
            q = rng.uniform(-1.2, 1.2, size=3)
            r = float(rng.uniform(0.05, 0.9))
            fast = set(radius_neighbors(index, q, r).tolist())
            slow = set(linear_scan_neighbors(coords, q, r).tolist())
            assert fast == slow, f"seed {seed}"


def test_result_independent_of_cell_size():
    rng = np.random.default_rng(2)
    coords = rng.uniform(0, 1, size=(200, 3))
    q = rng.uniform(0, 1, size=3)
    r = 0.3
    reference = None
    for cell in (0.05, 0.11, 0.3, 0.77, 2.0):
        hits = set(radius_neighbors(build_grid_index(coords, cell), q, r).tolist())
        if reference is None:
            reference = hits
        assert hits == reference


@given(st.integers(min_value=0, max_value=2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_property_equivalence_with_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(0, 60))
    coords = rng.uniform(-1, 1, size=(n, 3))
    cell = float(rng.uniform(0.05, 0.6))
    index = build_grid_index(coords, cell)
    q = rng.uniform(-1, 1, size=3)
    r = float(rng.uniform(0.05, 1.0))
    fast = set(radius_neighbors(index, q, r).tolist())
    slow = {i for i in range(n) if np.linalg.norm(coords[i] - q) < r}
    assert fast == slow


def test_invalid_parameters():
    with pytest.raises(ValueError):
        build_grid_index(np.zeros((1, 3)), 0.0)
    index = build_grid_index(np.zeros((1, 3)), 0.5)
    with pytest.raises(ValueError):
        radius_neighbors(index, np.zeros(3), 0.0)
