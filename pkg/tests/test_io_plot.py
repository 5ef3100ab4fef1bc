import re
from pathlib import Path

import numpy as np
import pytest

from surroseg.errors import FormatError, InvalidData, InvalidParameter, UnsupportedDimension
from surroseg.graph import SpatialDataset
from surroseg.io import read_points_csv, write_points_csv
from surroseg.plot import plot_svg, render_svg

DATA = Path(__file__).parent / "data"
SQUARE = SpatialDataset([[0, 0], [1, 0], [0, 1], [1, 1]])


# point tables

def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    data = SpatialDataset(rng.random((7, 3)), rng.standard_normal(7))
    write_points_csv(data, tmp_path / "p.csv")
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "id,x1,x2,x3,y"
    back = read_points_csv(tmp_path / "p.csv")
    assert np.array_equal(back.points, data.points) and np.array_equal(back.responses, data.responses)


def test_csv_rows_in_any_order(tmp_path):
    p = tmp_path / "p.csv"
    p.write_text("id,x1,x2\n1,3.0,4.0\n0,1.0,2.0\n")
    data = read_points_csv(p)
    assert data.points.tolist() == [[1.0, 2.0], [3.0, 4.0]] and data.responses is None


@pytest.mark.parametrize("text,exc", [
    ("", FormatError),
    ("x1,x2\n0,1\n", FormatError),
    ("id,x2\n0,1\n", FormatError),
    ("id,y\n0,1\n", FormatError),
    ("id,x1\n0,1,2\n", FormatError),
    ("id,x1\n0,abc\n", FormatError),
    ("id,x1\n", InvalidData),
    ("id,x1\n0,1\n0,2\n", InvalidData),
    ("id,x1\n0,1\n2,2\n", InvalidData),
    ("id,x1\n0,nan\n", InvalidData),
])
def test_csv_schema_errors(tmp_path, text, exc):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(exc):
        read_points_csv(p)


# SVG maps

def test_svg_structure_counts():
    svg = render_svg(SQUARE, labels=[0, 0, 1, 1])
    assert svg.count("<circle") == 4
    assert svg.count('class="legend-entry"') == 2
    assert "segment 0 (2)" in svg and "segment 1 (2)" in svg


def test_svg_matches_golden_file(tmp_path):
    plot_svg(SQUARE, tmp_path / "s.svg", labels=[0, 0, 1, 1], title="square")
    assert (tmp_path / "s.svg").read_bytes() == (DATA / "square_2labels.svg").read_bytes()


def test_svg_continuous_ramp():
    svg = render_svg(SQUARE, eta=[0.0, 1.0, 2.0, 3.0])
    fills = re.findall(r'<circle [^>]*fill="(#[0-9a-f]{6})"', svg)
    assert fills[0] == "#440154" and fills[-1] == "#fde725"
    assert svg.count('class="legend-entry"') == 5


def test_svg_constant_eta_and_escaping():
    svg = render_svg(SQUARE, eta=[1.0] * 4, title="<a & b>")
    assert "<title>&lt;a &amp; b&gt;</title>" in svg
    assert svg.count("<circle") == 4


def test_svg_is_deterministic():
    rng = np.random.default_rng(2)
    data = SpatialDataset(rng.random((50, 2)))
    lab = rng.integers(0, 3, 50)
    assert render_svg(data, labels=lab) == render_svg(data, labels=lab.copy())


def test_svg_errors():
    with pytest.raises(UnsupportedDimension):
        render_svg(SpatialDataset(np.zeros((3, 3))), labels=[0, 1, 2])
    with pytest.raises(InvalidParameter):
        render_svg(SQUARE)
    with pytest.raises(InvalidParameter):
        render_svg(SQUARE, labels=[0, 0, 1, 1], eta=[0, 0, 0, 0])
    with pytest.raises(InvalidParameter):
        render_svg(SQUARE, labels=[0, 1])
