import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dkmpp.domain import (
    CovariateGrid,
    EventSequence,
    SequenceSet,
    Window,
    build_representative_set,
    load_covariate_grid,
    load_sequences,
    make_sequence_set,
    normalize_to_canonical,
    representative_points,
    split_by_time,
    write_covariate_grid,
    write_sequences,
)
from dkmpp.errors import DataFormatError, GridError, WindowError


@pytest.fixture
def window():
    return Window()


def write_events_csv(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("seq_id,t,x1,x2\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")


class TestWindow:
    def test_default_volume_is_ten(self, window):
        assert window.volume() == pytest.approx(10.0)

    def test_degenerate_axis_rejected(self):
        with pytest.raises(WindowError):
            Window(t_min=1.0, t_max=1.0)

    def test_contains_boundary(self, window):
        assert window.contains((0.0, 0.0, 0.0))
        assert window.contains((10.0, 1.0, 1.0))
        assert not window.contains((10.1, 0.5, 0.5))


class TestLoadSequences:
    def test_events_sorted_within_sequence(self, tmp_path, window):
        path = tmp_path / "events.csv"
        write_events_csv(path, [("a", 1.0, 0.5, 0.5), ("a", 0.5, 0.2, 0.2)])
        data = load_sequences(path, window)
        assert data.n_sequences == 1
        assert data.n_events == 2
        assert list(data.sequences[0].events[:, 0]) == [0.5, 1.0]

    def test_header_only_file_gives_empty_set(self, tmp_path, window):
        path = tmp_path / "events.csv"
        write_events_csv(path, [])
        data = load_sequences(path, window)
        assert data.n_sequences == 0
        assert data.n_events == 0

    def test_out_of_window_row_reported(self, tmp_path, window):
        path = tmp_path / "events.csv"
        write_events_csv(path, [("a", 1.0, 0.5, 0.5), ("a", 12.0, 0.5, 0.5)])
        with pytest.raises(WindowError, match="row 3"):
            load_sequences(path, window)

    def test_malformed_row_reports_row_number(self, tmp_path, window):
        path = tmp_path / "events.csv"
        write_events_csv(path, [("a", 1.0, 0.5, 0.5), ("a", "oops", 0.5, 0.5)])
        with pytest.raises(DataFormatError, match="row 3"):
            load_sequences(path, window)

    def test_duplicate_timestamp_rejected(self, tmp_path, window):
        path = tmp_path / "events.csv"
        write_events_csv(path, [("a", 1.0, 0.5, 0.5), ("a", 1.0, 0.2, 0.2)])
        with pytest.raises(DataFormatError, match="duplicate"):
            load_sequences(path, window)

    def test_bad_header_rejected(self, tmp_path, window):
        path = tmp_path / "events.csv"
        with open(path, "w") as fh:
            fh.write("id,time,x,y\n")
        with pytest.raises(DataFormatError, match="header"):
            load_sequences(path, window)


@settings(max_examples=25, deadline=None)
@given(
    st.lists(
        st.tuples(
            st.integers(0, 3),
            st.floats(0.0, 10.0, allow_nan=False, width=32),
            st.floats(0.0, 1.0, allow_nan=False, width=32),
            st.floats(0.0, 1.0, allow_nan=False, width=32),
        ),
        max_size=40,
    )
)
def test_write_load_round_trip(tmp_path_factory, rows):
    # dedupe (seq, t) pairs; the loader forbids duplicates
    seen = set()
    groups = {}
    for sid, t, x1, x2 in rows:
        if (sid, t) in seen:
            continue
        seen.add((sid, t))
        groups.setdefault(f"s{sid}", []).append((t, x1, x2))
    window = Window()
    data = make_sequence_set(groups, window)
    path = tmp_path_factory.mktemp("rt") / "events.csv"
    write_sequences(data, path)
    back = load_sequences(path, window)
    assert back.n_sequences == data.n_sequences
    by_id = {s.seq_id: s for s in back}
    for seq in data:
        other = by_id[seq.seq_id]
        # 12 significant digits round-trips float32-precision inputs exactly
        np.testing.assert_allclose(other.events, seq.events, rtol=1e-11, atol=1e-14)


class TestCovariateGrid:
    def make_grid_csv(self, path, knots, K=1, values=None):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("t,x1,x2," + ",".join(f"z{k}" for k in range(K)) + "\n")
            i = 0
            for t in knots[0]:
                for x1 in knots[1]:
                    for x2 in knots[2]:
                        zs = values[i] if values is not None else [i * 0.1] * K
                        fh.write(f"{t},{x1},{x2}," + ",".join(str(z) for z in zs) + "\n")
                        i += 1

    def test_2x2x2_grid_shape(self, tmp_path):
        path = tmp_path / "cov.csv"
        self.make_grid_csv(path, ([0.0, 10.0], [0.0, 1.0], [0.0, 1.0]))
        grid = load_covariate_grid(path)
        assert grid.K == 1
        assert grid.t_knots.size == grid.x1_knots.size == grid.x2_knots.size == 2
        assert grid.values.shape == (2, 2, 2, 1)

    def test_missing_row_is_incomplete_grid(self, tmp_path):
        path = tmp_path / "cov.csv"
        self.make_grid_csv(path, ([0.0, 10.0], [0.0, 1.0], [0.0, 1.0]))
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(GridError, match="incomplete"):
            load_covariate_grid(path)

    def test_wide_covariate_header_inferred(self, tmp_path):
        path = tmp_path / "cov.csv"
        self.make_grid_csv(path, ([0.0], [0.0], [0.0]), K=768)
        grid = load_covariate_grid(path)
        assert grid.K == 768

    def test_non_finite_value_rejected(self, tmp_path):
        path = tmp_path / "cov.csv"
        with open(path, "w") as fh:
            fh.write("t,x1,x2,z0\n0,0,0,nan\n")
        with pytest.raises(GridError, match="non-finite"):
            load_covariate_grid(path)

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        grid = CovariateGrid(
            np.array([0.0, 5.0, 10.0]),
            np.array([0.0, 1.0]),
            np.array([0.0, 0.5, 1.0]),
            rng.normal(size=(3, 2, 3, 4)),
        )
        path = tmp_path / "cov.csv"
        write_covariate_grid(grid, path)
        back = load_covariate_grid(path)
        np.testing.assert_allclose(back.values, grid.values, rtol=1e-11)

    def test_nearest_knot_exact_on_knot(self):
        grid = CovariateGrid(
            np.array([0.0, 5.0, 10.0]),
            np.array([0.0, 1.0]),
            np.array([0.0, 1.0]),
            np.arange(12, dtype=float).reshape(3, 2, 2, 1),
        )
        looked = grid.lookup(np.array([[5.0, 1.0, 0.0]]))
        assert looked[0, 0] == grid.values[1, 1, 0, 0]

    def test_nearest_knot_tie_goes_low(self):
        grid = CovariateGrid(
            np.array([0.0, 2.0]),
            np.array([0.0, 1.0]),
            np.array([0.0, 1.0]),
            np.arange(8, dtype=float).reshape(2, 2, 2, 1),
        )
        # t=1.0 is equidistant from knots 0 and 2 -> lower index wins
        looked = grid.lookup(np.array([[1.0, 0.0, 0.0]]))
        assert looked[0, 0] == grid.values[0, 0, 0, 0]


class TestRepresentativeSet:
    def test_5x5x5_gives_125_points(self, window):
        pts = representative_points(window, (5, 5, 5))
        assert pts.shape == (125, 3)
        ts = np.unique(pts[:, 0])
        np.testing.assert_allclose(ts, [0.0, 2.5, 5.0, 7.5, 10.0])

    def test_single_count_places_midpoint(self, window):
        pts = representative_points(window, (1, 1, 1))
        np.testing.assert_allclose(pts, [[5.0, 0.5, 0.5]])

    def test_4x4x4_gives_64_points(self, window):
        assert representative_points(window, (4, 4, 4)).shape == (64, 3)

    def test_axis_swap_invariance(self):
        w1 = Window(0, 10, 0.0, 1.0, 0.2, 0.8)
        w2 = Window(0, 10, 0.2, 0.8, 0.0, 1.0)
        p1 = representative_points(w1, (3, 3, 3))
        p2 = representative_points(w2, (3, 3, 3))
        swapped = p2[:, [0, 2, 1]]
        assert {tuple(p) for p in p1} == {tuple(p) for p in swapped}

    def test_covariates_aligned(self, window):
        grid = CovariateGrid(
            np.linspace(0, 10, 5),
            np.linspace(0, 1, 5),
            np.linspace(0, 1, 5),
            np.arange(125, dtype=float).reshape(5, 5, 5, 1),
        )
        rep = build_representative_set(window, (5, 5, 5), grid)
        assert rep.J == 125
        assert rep.covariates.shape == (125, 1)
        # representative points coincide with knots -> exact lookup
        np.testing.assert_array_equal(rep.covariates.ravel(), np.arange(125.0))


class TestSplitByTime:
    def make_set(self, n, window):
        groups = {f"s{i:03d}": [(0.01 + 9.9 * i / max(n, 2), 0.5, 0.5)] for i in range(n)}
        return make_sequence_set(groups, window)

    def test_ten_sequences(self, window):
        parts = split_by_time(self.make_set(10, window), (0.5, 0.4, 0.1))
        assert [p.n_sequences for p in parts] == [5, 4, 1]

    def test_three_sequences_floor_plus_remainder(self, window):
        # floor(3*0.5)=1, floor(3*0.4)=1, remainder 1
        parts = split_by_time(self.make_set(3, window), (0.5, 0.4, 0.1))
        assert [p.n_sequences for p in parts] == [1, 1, 1]

    def test_5000_sequences(self, window):
        parts = split_by_time(self.make_set(5000, window), (0.5, 0.4, 0.1))
        assert [p.n_sequences for p in parts] == [2500, 2000, 500]

    def test_partition_disjoint_and_complete(self, window):
        data = self.make_set(23, window)
        parts = split_by_time(data, (0.5, 0.4, 0.1))
        ids = [s.seq_id for p in parts for s in p]
        assert len(ids) == 23
        assert len(set(ids)) == 23

    def test_blocks_ordered_by_first_event(self, window):
        data = self.make_set(20, window)
        tr, va, te = split_by_time(data, (0.5, 0.4, 0.1))
        assert max(s.first_time for s in tr) <= min(s.first_time for s in va)
        assert max(s.first_time for s in va) <= min(s.first_time for s in te)

    def test_too_few_sequences(self, window):
        with pytest.raises(ValueError):
            split_by_time(self.make_set(2, window), (0.5, 0.4, 0.1))

    def test_empty_sequences_retained(self, window):
        groups = {"a": [(1.0, 0.5, 0.5)], "b": [], "c": [(2.0, 0.5, 0.5)], "d": [(3.0, 0.1, 0.1)]}
        data = make_sequence_set(groups, window)
        parts = split_by_time(data, (0.5, 0.4, 0.1))
        assert sum(p.n_sequences for p in parts) == 4
        # empty sequence sorts last (first_time = +inf)
        assert parts[-1].sequences[-1].seq_id == "b"


def test_normalize_to_canonical_round_trip():
    src = Window(100.0, 200.0, -5.0, 5.0, 2.0, 4.0)
    groups = {"a": [(150.0, 0.0, 3.0), (101.0, -5.0, 2.0)]}
    data = make_sequence_set(groups, src)
    norm, amap = normalize_to_canonical(data)
    assert norm.window.volume() == pytest.approx(10.0)
    ev = norm.sequences[0].events
    assert norm.window.contains(ev[0]) and norm.window.contains(ev[1])
    np.testing.assert_allclose(amap.invert(ev), data.sequences[0].events, rtol=1e-12)
    np.testing.assert_allclose(ev[1], [5.0, 0.5, 0.5])
