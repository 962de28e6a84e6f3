import math

import numpy as np
import pytest

from flow4dvar.config import AssimilationConfig, format_value, parse_config_text, resolve
from flow4dvar.fem import ConfigurationError
from flow4dvar.mesh import unit_square
from flow4dvar.vtk import format_vtk, read_vtk_points, write_vtk


@pytest.mark.parametrize("in_file,on_cli,expect", [
    (False, False, 1e-5),
    (True, False, 1e-3),
    (False, True, 1e-2),
    (True, True, 1e-2),
])
def test_precedence(in_file, on_cli, expect):
    file_values = parse_config_text("alpha = 1e-3\n") if in_file else {}
    cli = {"alpha": 1e-2 if on_cli else None}
    assert resolve(file_values, cli).alpha == expect


def test_sections_are_ignored_and_values_coerced():
    v = parse_config_text("[model]\nnu = 2.0\nswap_outlets = yes\n[observations]\nN = 4  # comment\nsnr = inf\n")
    cfg = resolve(v)
    assert cfg.nu == 2.0 and cfg.swap_outlets is True and cfg.N == 4 and math.isinf(cfg.snr)
    assert cfg.model().outlet == "out2" and cfg.truth().outlet == "out1"


def test_text_roundtrip():
    cfg = AssimilationConfig(alpha=0.25, operator="avg", snr=2.0, swap_outlets=True)
    assert resolve(parse_config_text(cfg.to_text())) == cfg
    assert format_value(math.inf) == "inf" and format_value(False) == "false"


@pytest.mark.parametrize("text", ["bogus = 1\n", "N = many\n", "alpha = 1\n[x]\nalpha = 2\n", "N = 0\n",
                                  "operator = mean\n", "snr = 0\n", "no equals sign\n"])
def test_invalid_configs(text):
    with pytest.raises(ConfigurationError):
        resolve(parse_config_text(text))


def test_vtk_two_cells(tmp_path):
    m = unit_square(1)
    rng = np.random.default_rng(0)
    u, p = rng.standard_normal(8), rng.standard_normal(4)
    text = format_vtk(m, u, p)
    lines = text.splitlines()
    assert lines[0] == "# vtk DataFile Version 4.2" and lines[2] == "ASCII"
    assert "POINTS 4 double" in lines and "CELLS 2 8" in lines and "CELL_TYPES 2" in lines
    assert lines[lines.index("CELL_TYPES 2") + 1:][:2] == ["5", "5"]
    write_vtk(tmp_path / "a.vtk", m, u, p)
    pts, cells = read_vtk_points(tmp_path / "a.vtk")
    assert np.abs(pts - m.vertices).max() <= 1e-12 and np.array_equal(cells, m.cells)
    i = lines.index("VECTORS velocity double")
    vel = np.array([r.split() for r in lines[i + 1:i + 5]], dtype=float)
    assert np.array_equal(vel[:, 0], u[:4]) and np.array_equal(vel[:, 1], u[4:]) and not np.any(vel[:, 2])
    assert np.array_equal(np.array(lines[-4:], dtype=float), p)
    assert (tmp_path / "a.vtk").read_text() == text
