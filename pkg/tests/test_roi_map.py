import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stare.roi_map import (
    OFF,
    ROI,
    ROIMap,
    ROIValidationError,
    UnsupportedLayoutError,
    columns_of,
    grid_map,
    load_roi_map,
    map_point_to_roi,
    map_x_to_column_token,
    map_y_to_row_token,
    monte_carlo_coverage,
    roi_map_from_dict,
    rois_of,
    rows_of,
    save_roi_map,
    validate,
)


def _doc(rois, w=100, h=100, grid=False, n_rows=0, n_cols=0):
    return {"image_width": w, "image_height": h, "grid": grid, "n_rows": n_rows,
            "n_cols": n_cols, "rois": rois}


def _box(i, x0, y0, x1, y1, row=0, col=0):
    return {"id": i, "label": f"p{i}", "x_min": x0, "y_min": y0, "x_max": x1, "y_max": y1,
            "row": row, "col": col}


def test_two_by_two_grid_is_valid(tmp_path, grid2):
    path = tmp_path / "roi.json"
    save_roi_map(grid2, path)
    m = load_roi_map(path)
    assert m.n_rois == 4
    assert m == grid2


def test_overlap_names_both_ids_and_box():
    doc = _doc([_box(0, 0, 0, 60, 100), _box(1, 50, 0, 100, 100)])
    with pytest.raises(ROIValidationError) as err:
        roi_map_from_dict(doc)
    overlaps = [p for p in err.value.problems if p.kind == "overlap"]
    assert overlaps and overlaps[0].roi_ids == (0, 1)
    assert overlaps[0].box == (50, 0, 60, 100)


def test_margin_gap_reports_uncovered_point():
    doc = _doc([_box(0, 0, 0, 90, 90)])
    with pytest.raises(ROIValidationError) as err:
        roi_map_from_dict(doc)
    gaps = [p for p in err.value.problems if p.kind == "gap"]
    assert gaps
    for p in gaps:
        x, y = p.point
        assert not (x < 90 and y < 90)
        assert 0 <= x < 100 and 0 <= y < 100


def test_duplicate_id_rejected():
    doc = _doc([_box(0, 0, 0, 50, 100), _box(0, 50, 0, 100, 100)])
    with pytest.raises(ROIValidationError) as err:
        roi_map_from_dict(doc)
    assert "duplicate_id" in err.value.kinds()


def test_all_problems_enumerated_not_just_first():
    # two separate overlaps plus a gap
    doc = _doc([_box(0, 0, 0, 60, 50), _box(1, 40, 0, 100, 50), _box(2, 0, 40, 60, 90),
                _box(3, 50, 50, 100, 100)])
    with pytest.raises(ROIValidationError) as err:
        roi_map_from_dict(doc)
    kinds = [p.kind for p in err.value.problems]
    assert kinds.count("overlap") >= 2
    assert "gap" in kinds


def test_point_mapping_examples(grid2):
    assert map_point_to_roi(grid2, 25, 25) == 0
    assert map_point_to_roi(grid2, 50, 50) == 3
    assert map_point_to_roi(grid2, 120, 50) == OFF


def test_axis_mapping_examples(grid2):
    assert map_x_to_column_token(grid2, 25) == 0
    assert map_x_to_column_token(grid2, 99.9) == 1
    assert map_y_to_row_token(grid2, 25) == 0
    assert map_y_to_row_token(grid2, 75) == 1
    assert map_y_to_row_token(grid2, -1) == OFF


def test_axis_mapping_needs_grid():
    m = roi_map_from_dict(_doc([_box(0, 0, 0, 50, 100), _box(1, 50, 0, 100, 100)]))
    assert map_point_to_roi(m, 75, 10) == 1
    with pytest.raises(UnsupportedLayoutError):
        map_x_to_column_token(m, 10)
    with pytest.raises(UnsupportedLayoutError):
        rows_of(m, [10])


def _brute_force(m, x, y):
    hits = [r.roi_id for r in m.rois if r.x_min <= x < r.x_max and r.y_min <= y < r.y_max]
    assert len(hits) <= 1
    return hits[0] if hits else OFF


def test_lattice_consistency_irregular_grid():
    # uneven column widths and row heights
    xs, ys = [0, 13, 50, 51, 120], [0, 30, 77, 80]
    rois = []
    for r in range(len(ys) - 1):
        for c in range(len(xs) - 1):
            rois.append(_box(r * 4 + c, xs[c], ys[r], xs[c + 1], ys[r + 1], r, c))
    m = roi_map_from_dict(_doc(rois, w=120, h=80, grid=True, n_rows=3, n_cols=4))
    for x in range(-2, 123):
        for y in range(-2, 83):
            expect = _brute_force(m, x, y)
            assert map_point_to_roi(m, x, y) == expect
            composed = m.roi_at(map_y_to_row_token(m, y), map_x_to_column_token(m, x))
            assert composed == expect


def test_vectorised_mapping_matches_scalar(grid2, rng):
    xs = rng.uniform(-20, 120, 500)
    ys = rng.uniform(-20, 120, 500)
    assert columns_of(grid2, xs).tolist() == [map_x_to_column_token(grid2, x) for x in xs]
    assert rows_of(grid2, ys).tolist() == [map_y_to_row_token(grid2, y) for y in ys]
    assert rois_of(grid2, xs, ys).tolist() == [map_point_to_roi(grid2, x, y) for x, y in zip(xs, ys)]


def test_grid_flag_with_inconsistent_rows_rejected():
    rois = [_box(0, 0, 0, 50, 100, 0, 0), _box(1, 50, 0, 100, 100, 0, 0)]
    with pytest.raises(ROIValidationError) as err:
        roi_map_from_dict(_doc(rois, grid=True, n_rows=1, n_cols=2))
    assert "grid" in err.value.kinds()


def test_bad_box_and_sparse_ids():
    with pytest.raises(ROIValidationError) as err:
        roi_map_from_dict(_doc([_box(0, 0, 0, 100, 100), _box(2, 10, 10, 10, 20)]))
    assert {"bad_box", "ids"} <= err.value.kinds()


def test_round_trip_json(tmp_path):
    m = grid_map(3, 5, 640, 480)
    path = tmp_path / "m.json"
    save_roi_map(m, path)
    doc = json.loads(path.read_text())
    assert doc["grid"] is True and len(doc["rois"]) == 15
    assert load_roi_map(path) == m


finite = st.floats(allow_nan=True, allow_infinity=True, width=64)


@given(x=finite, y=finite)
@settings(max_examples=300)
def test_totality(x, y):
    m = grid_map(3, 4, 400.0, 300.0)
    token = map_point_to_roi(m, x, y)
    assert token == OFF or 0 <= token < m.n_rois
    inside = 0 <= x < 400 and 0 <= y < 300
    assert (token != OFF) == inside


@st.composite
def random_partitions(draw):
    """Random guillotine partitions of a 100 x 60 image, occasionally broken."""
    boxes = [(0.0, 0.0, 100.0, 60.0)]
    for _ in range(draw(st.integers(0, 6))):
        i = draw(st.integers(0, len(boxes) - 1))
        x0, y0, x1, y1 = boxes.pop(i)
        if draw(st.booleans()) and x1 - x0 > 2:
            cut = draw(st.integers(int(x0) + 1, int(x1) - 1))
            boxes += [(x0, y0, cut, y1), (cut, y0, x1, y1)]
        elif y1 - y0 > 2:
            cut = draw(st.integers(int(y0) + 1, int(y1) - 1))
            boxes += [(x0, y0, x1, cut), (x0, cut, x1, y1)]
        else:
            boxes.append((x0, y0, x1, y1))
    damage = draw(st.sampled_from(["none", "shrink", "grow"]))
    if damage != "none":
        i = draw(st.integers(0, len(boxes) - 1))
        x0, y0, x1, y1 = boxes[i]
        d = draw(st.sampled_from([1.0, 5.0, 20.0]))
        if damage == "shrink" and x1 - x0 > d:
            boxes[i] = (x0, y0, x1 - d, y1)
        elif damage == "grow" and x1 + d <= 100 and len(boxes) > 1:
            boxes[i] = (x0, y0, x1 + d, y1)
    return boxes


@given(random_partitions())
@settings(max_examples=60, deadline=None)
def test_validation_agrees_with_monte_carlo(boxes):
    rois = tuple(ROI(i, "", *b) for i, b in enumerate(boxes))
    m = ROIMap(100.0, 60.0, rois)
    try:
        validate(m)
        valid = True
    except ROIValidationError:
        valid = False
    assert valid == monte_carlo_coverage(m, 100_000, seed=0)
