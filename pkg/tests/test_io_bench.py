import io
import os
import warnings
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blocklm import io_bench as iob, lie, optim, problems as pb, trace as tr
from blocklm.errors import ParseError

MINIMAL_BAL = """1 1 1
0 0 0.0 0.0
0 0 0 0 0 0 1 0 0
0 0 -1
"""

DATA_DIR = Path(os.environ.get("BLOCKLM_DATA", "/root/data"))


def parse(text, fn=iob.parse_bal):
    return fn(io.StringIO(text))


def random_bal(rng, c, p, n):
    cidx = rng.integers(0, c, n)
    pidx = rng.integers(0, p, n)
    return iob.BalProblem(rng.normal(size=(c, 3)), rng.normal(size=(c, 3)), rng.uniform(100, 900, c),
                          rng.normal(size=c) * 1e-3, rng.normal(size=c) * 1e-6,
                          rng.normal(size=(p, 3)), cidx, pidx, rng.normal(size=(n, 2)) * 300)


# -- BAL ----------------------------------------------------------------------------


def test_minimal_bal_file():
    bal = parse(MINIMAL_BAL)
    assert (bal.num_cameras, bal.num_points, bal.num_observations) == (1, 1, 1)
    assert np.array_equal(bal.poses, [[0, 0, 0, 0, 0, 0, 1]])
    assert bal.focal[0] == 1 and bal.k1[0] == 0 and bal.k2[0] == 0
    prob = pb.build_ba_from_bal(bal)
    r = tr.evaluate(prob.model, prob.params()).residuals
    assert np.array_equal(r, [[0.0, 0.0]])
    assert list(bal.observations())[0].pixel == (0.0, 0.0)


def test_bal_whitespace_tolerance():
    squeezed = "1\t1   1\n\n0 0\n0.0\r\n0.0 0 0 0 0 0 0 1 0 0 0 0 -1"
    ref, got = parse(MINIMAL_BAL), parse(squeezed)
    for name in ("rotations", "translations", "focal", "points", "pixels", "camera_index"):
        assert np.array_equal(getattr(ref, name), getattr(got, name))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_bal_round_trip_is_token_exact(seed):
    rng = np.random.default_rng(seed)
    bal = random_bal(rng, int(rng.integers(1, 5)), int(rng.integers(1, 9)), int(rng.integers(0, 20)))
    out = io.StringIO()
    iob.serialize_bal(bal, out)
    back = parse(out.getvalue())
    for name in ("rotations", "translations", "focal", "k1", "k2", "points", "camera_index",
                 "point_index", "pixels"):
        assert np.array_equal(getattr(bal, name), getattr(back, name))
    again = io.StringIO()
    iob.serialize_bal(back, again)
    assert again.getvalue().split() == out.getvalue().split()


@pytest.mark.parametrize("text,line", [
    ("1 1 1\n0 0 zero 0.0\n" + "0 " * 9 + "\n0 0 -1\n", 2),        # malformed float
    ("1 1 2\n0 0 0.0 0.0\n" + "0 " * 9 + "\n0 0 -1\n", 4),         # count mismatch hits EOF
    ("1 1 1\n0 3 0.0 0.0\n" + "0 " * 9 + "\n0 0 -1\n", 2),         # point index out of range
    ("1 1 1\n1 0 0.0 0.0\n" + "0 " * 9 + "\n0 0 -1\n", 2),         # camera index out of range
    ("1 1 1\n0 0 0.0 0.0\n" + "0 " * 9 + "\n0 0 -1\n7\n", 5),      # trailing token
    ("1 x 1\n", 1),
])
def test_bal_parse_errors_carry_line(text, line):
    with pytest.raises(ParseError) as info:
        parse(text)
    assert info.value.line == line


def test_bal_model_validation():
    rng = np.random.default_rng(0)
    bal = random_bal(rng, 2, 2, 3)
    with pytest.raises(ValueError):
        iob.BalProblem(bal.rotations, bal.translations, bal.focal, bal.k1, bal.k2, bal.points,
                       bal.camera_index + 5, bal.point_index, bal.pixels)


# -- g2o ----------------------------------------------------------------------------

IDENT = "0 0 0 0 0 0 1"
INFO = " ".join("1" if i == j else "0" for i in range(6) for j in range(i, 6))


def test_g2o_single_vertex():
    g = parse(f"VERTEX_SE3:QUAT 0 {IDENT}\n", iob.parse_g2o)
    assert g.num_vertices == 1 and g.num_edges == 0
    vid, pose = g.vertices()[0]
    assert vid == 0 and np.array_equal(pose.as_array(), [0, 0, 0, 0, 0, 0, 1])


def test_g2o_identity_edge_has_zero_residual():
    text = f"VERTEX_SE3:QUAT 0 {IDENT}\nVERTEX_SE3:QUAT 1 {IDENT}\nEDGE_SE3:QUAT 0 1 {IDENT} {INFO}\n"
    g = parse(text, iob.parse_g2o)
    assert np.array_equal(g.information[0], np.eye(6))
    prob = pb.build_pgo_from_graph(g)
    assert np.array_equal(tr.evaluate(prob.model, prob.params()).residuals, np.zeros((1, 6)))


def test_g2o_information_upper_triangle_fill():
    vals = np.arange(1, 22, dtype=float)
    text = (f"VERTEX_SE3:QUAT 0 {IDENT}\nVERTEX_SE3:QUAT 1 {IDENT}\n"
            f"EDGE_SE3:QUAT 0 1 {IDENT} " + " ".join(map(str, vals)) + "\n")
    info = parse(text, iob.parse_g2o).information[0]
    assert np.array_equal(info, info.T)
    assert info[0, 0] == 1 and info[0, 5] == 6 and info[1, 1] == 7 and info[5, 5] == 21
    assert info[3, 4] == info[4, 3] == 17


def test_g2o_ids_are_remapped():
    text = (f"VERTEX_SE3:QUAT 10 {IDENT}\nVERTEX_SE3:QUAT 4 {IDENT}\n"
            f"EDGE_SE3:QUAT 4 10 {IDENT} {INFO}\n")
    g = parse(text, iob.parse_g2o)
    assert list(g.ids) == [10, 4] and (g.edge_i[0], g.edge_j[0]) == (1, 0)
    out = io.StringIO()
    iob.serialize_g2o(g, out)
    back = parse(out.getvalue(), iob.parse_g2o)
    assert np.array_equal(back.ids, g.ids) and np.array_equal(back.information, g.information)


def test_g2o_unknown_tag_warns_once():
    text = f"VERTEX_SE3:QUAT 0 {IDENT}\nFIX 0\nFIX 0\nVERTEX_XY 1 0 0\n"
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        g = parse(text, iob.parse_g2o)
    assert g.num_vertices == 1
    assert sorted(str(w.message).split("'")[1] for w in caught) == ["FIX", "VERTEX_XY"]


@pytest.mark.parametrize("text,line", [
    (f"VERTEX_SE3:QUAT 0 {IDENT}\nVERTEX_SE3:QUAT 0 {IDENT}\n", 2),                      # duplicate id
    (f"VERTEX_SE3:QUAT 0 0 0 0 0 0 1\n", 1),                                              # short pose
    (f"VERTEX_SE3:QUAT 0 {IDENT}\nEDGE_SE3:QUAT 0 7 {IDENT} {INFO}\n", 2),                 # undeclared
    (f"VERTEX_SE3:QUAT 0 {IDENT}\nEDGE_SE3:QUAT 0 0 {IDENT} {INFO}\n", 2),                 # self edge
    (f"VERTEX_SE3:QUAT a {IDENT}\n", 1),
    (f"VERTEX_SE3:QUAT 0 0 0 0 0 0 x 1\n", 1),
    (f"VERTEX_SE3:QUAT 0 0 0 0 0 0 0 0\n", 1),                                            # zero quaternion
    (f"VERTEX_SE3:QUAT 0 {IDENT}\nVERTEX_SE3:QUAT 1 {IDENT}\nEDGE_SE3:QUAT 0 1 {IDENT}\n", 3),
])
def test_g2o_parse_errors_carry_line(text, line):
    with pytest.raises(ParseError) as info:
        parse(text, iob.parse_g2o)
    assert info.value.line == line


# -- synthetic scenes -----------------------------------------------------------------


def test_synthetic_generators_are_deterministic():
    a, b = iob.synth_ba(5, 40, 1.0, 0.05, seed=9), iob.synth_ba(5, 40, 1.0, 0.05, seed=9)
    assert np.array_equal(a.problem.pixels, b.problem.pixels)
    assert np.array_equal(a.problem.rotations, b.problem.rotations)
    assert not np.array_equal(a.problem.pixels, iob.synth_ba(5, 40, 1.0, 0.05, seed=10).problem.pixels)
    s, t = iob.synth_sphere(4, 8, seed=3), iob.synth_sphere(4, 8, seed=3)
    assert np.array_equal(s.graph.poses, t.graph.poses)
    assert np.array_equal(s.graph.measurements, t.graph.measurements)


def test_synthetic_ba_geometry():
    s = iob.synth_ba(6, 30)
    assert np.allclose(lie.to_matrix(s.problem.poses), lie.to_matrix(s.true_poses), atol=1e-12)
    pc = lie.act(s.true_poses[s.problem.camera_index], s.true_points[s.problem.point_index])
    assert np.all(pc[:, 2] < -1)    # every point in front of every camera
    prob = pb.build_ba_from_bal(s.problem)
    assert np.abs(tr.evaluate(prob.model, prob.params()).residuals).max() < 1e-9


def test_synthetic_ba_zero_noise_recovers():
    s = iob.synth_ba(4, 60, 0.0, 0.05, seed=1)
    rep = optim.optimize(pb.build_ba_from_bal(s.problem), config=optim.LmConfig(max_iterations=30))
    assert rep.final_mse < 1e-10


def test_synthetic_sphere_structure():
    s = iob.synth_sphere(3, 6, seed=0)
    g = s.graph
    assert g.num_vertices == 18 and g.num_edges == 17 + 12
    assert np.array_equal(g.poses[0], s.true_poses[0])
    noiseless = iob.synth_sphere(3, 6, translation_sigma=1e-12, rotation_sigma=1e-12)
    assert np.allclose(lie.to_matrix(noiseless.graph.poses), lie.to_matrix(noiseless.true_poses),
                       atol=1e-9)


# -- real datasets (skipped when absent) ----------------------------------------------


def _dataset(name):
    path = DATA_DIR / name
    if not path.exists():
        pytest.skip(f"{path} not available")
    return path


@pytest.mark.dataset
def test_ladybug_header():
    bal = iob.read_bal(_dataset("problem-1723-156502-pre.txt"))
    assert (bal.num_cameras, bal.num_points, bal.num_observations) == (1723, 156502, 678718)


@pytest.mark.dataset
def test_parking_garage_counts():
    g = iob.read_g2o(_dataset("parking-garage.g2o"))
    assert (g.num_vertices, g.num_edges) == (1661, 6275)
