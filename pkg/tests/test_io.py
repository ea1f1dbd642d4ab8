import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lsckf import io
from lsckf.filter import FilterConfig
from lsckf.imu import ImuSample, NoiseParams
from lsckf.lines import CameraModel
from lsckf.simulate import ScenarioSpec, synthesize_imu, synthesize_tracks

from conftest import FIXTURES, MALFORMED, TABLE_I, parse_fixture, random_rotation


def test_imu_round_trip(tmp_path):
    spec = ScenarioSpec(family="sinusoid-3d", duration=2.0, seed=3)
    imu = synthesize_imu(spec)
    io.write_imu_csv(tmp_path / "imu.csv", imu)
    back = io.parse_imu_csv(tmp_path / "imu.csv")
    assert len(back) == len(imu)
    for a, b in zip(imu, back):
        assert a.t_ns == b.t_ns
        assert np.array_equal(a.gyro, b.gyro) and np.array_equal(a.accel, b.accel)


def test_imu_span_at_200hz(tmp_path):
    spec = ScenarioSpec(family="hover", duration=1.5)
    io.write_imu_csv(tmp_path / "imu.csv", synthesize_imu(spec))
    imu = io.parse_imu_csv(tmp_path / "imu.csv")
    span = imu[-1].t_ns - imu[0].t_ns
    assert span == (len(imu) - 1) * 5_000_000
    assert np.all(np.diff([s.t_ns for s in imu]) == 5_000_000)


def test_imu_header_lines_skipped(tmp_path):
    p = tmp_path / "imu.csv"
    p.write_text("#a comment\n# another\n\n0,1,2,3,4,5,6\n")
    (s,) = io.parse_imu_csv(p)
    assert s.t_ns == 0 and np.array_equal(s.accel, [4, 5, 6])


def test_tracks_round_trip(tmp_path):
    spec = ScenarioSpec(duration=1.0, seed=4)
    tracks = synthesize_tracks(spec)
    io.write_line_tracks(tmp_path / "t.csv", tracks)
    back = io.parse_line_tracks(tmp_path / "t.csv", 752, 480)
    assert [(a.t_ns, a.track_id) for a in tracks] == [(b.t_ns, b.track_id) for b in back]
    for a, b in zip(tracks, back):
        assert np.array_equal(a.start, b.start) and np.array_equal(a.end, b.end)


@pytest.mark.parametrize("name", sorted(MALFORMED))
def test_malformed_fixture_has_located_diagnostic(name):
    path = FIXTURES / "malformed" / name
    with pytest.raises((io.ParseError, io.SchemaError)) as e:
        parse_fixture(path)
    msg = str(e.value)
    assert MALFORMED[name] in msg
    if isinstance(e.value, io.ParseError):
        assert name in msg


def test_malformed_fixture_list_is_complete():
    assert sorted(p.name for p in (FIXTURES / "malformed").iterdir()) == sorted(MALFORMED)


def test_missing_file_is_a_parse_error(tmp_path):
    with pytest.raises(io.ParseError, match="cannot open"):
        io.parse_imu_csv(tmp_path / "nope.csv")


def test_table_i_config():
    cam, noise, fc = io.parse_config(FIXTURES / "config_table1.json")
    assert (cam.fu, cam.fv, cam.cu, cam.cv) == (TABLE_I["fu"], TABLE_I["fv"], TABLE_I["cu"], TABLE_I["cv"])
    assert (cam.width, cam.height) == (752, 480)
    assert isinstance(fc, FilterConfig) and fc.max_lines == 20


def test_gravity_defaults(tmp_path):
    raw = json.loads((FIXTURES / "config_table1.json").read_text())
    raw.pop("gravity")
    (tmp_path / "c.json").write_text(json.dumps(raw))
    _, noise, _ = io.parse_config(tmp_path / "c.json")
    assert np.array_equal(noise.gravity, [0.0, 0.0, -9.81])


def test_nested_config_is_accepted(tmp_path):
    raw = {
        "camera": {k: TABLE_I[k] for k in ("fu", "fv", "cu", "cv", "width", "height")},
        "T_IC": np.eye(4).ravel().tolist(),
        "noise": {"sigma_g": 1e-4, "sigma_a": 1e-3, "sigma_bg": 1e-5, "sigma_ba": 1e-3, "sigma_px": 2.0},
        "filter": {"max_lines": 8, "init_cross_covariance": False},
    }
    (tmp_path / "c.json").write_text(json.dumps(raw))
    cam, noise, fc = io.parse_config(tmp_path / "c.json")
    assert fc.max_lines == 8 and fc.sigma_px == 2.0 and fc.init_cross_covariance is False


@pytest.mark.parametrize(
    "key,value",
    [("filter.max_lines", 2.5), ("filter.init_cross_covariance", 1), ("noise.sigma_g", -1.0), ("camera.fu", 0), ("T_IC", [1, 2, 3])],
)
def test_config_schema_errors_name_the_key(tmp_path, key, value):
    raw = json.loads((FIXTURES / "config_table1.json").read_text())
    raw[key] = value
    (tmp_path / "c.json").write_text(json.dumps(raw))
    with pytest.raises(io.SchemaError) as e:
        io.parse_config(tmp_path / "c.json")
    assert e.value.key == key


def test_config_round_trip(tmp_path):
    cam = CameraModel(**TABLE_I, R_ic=random_rotation(np.random.default_rng(1)), p_ic=np.array([0.1, -0.2, 0.3]))
    fc = FilterConfig(max_lines=7, sigma_px=0.8, init_cross_covariance=False)
    noise = NoiseParams(1e-3, 2e-3, 3e-5, 4e-4, np.array([0.0, 0.1, -9.8]))
    io.write_config(tmp_path / "c.json", cam, noise, fc)
    cam2, noise2, fc2 = io.parse_config(tmp_path / "c.json")
    np.testing.assert_allclose(cam2.R_ic, cam.R_ic, atol=1e-15)
    np.testing.assert_array_equal(cam2.p_ic, cam.p_ic)
    assert fc2 == fc
    assert (noise2.sigma_g, noise2.sigma_ba) == (noise.sigma_g, noise.sigma_ba)
    np.testing.assert_array_equal(noise2.gravity, noise.gravity)


def test_identity_quaternion():
    np.testing.assert_array_equal(io.rot_to_quat(np.eye(3)), [1.0, 0.0, 0.0, 0.0])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_quaternion_round_trip(seed):
    R = random_rotation(np.random.default_rng(seed), np.pi)
    q = io.rot_to_quat(R)
    assert q[0] >= 0
    np.testing.assert_allclose(io.quat_to_rot(q), R, atol=1e-10)


def test_trajectory_round_trip(tmp_path, rng):
    recs = [io.TrajectoryRecord(1000 * k, rng.normal(size=3), random_rotation(rng), rng.normal(size=3)) for k in range(50)]
    io.write_trajectory(tmp_path / "t.csv", recs)
    back = io.parse_trajectory(tmp_path / "t.csv")
    for a, b in zip(recs, back):
        assert a.t_ns == b.t_ns
        np.testing.assert_allclose(b.p, a.p, atol=1e-12)
        np.testing.assert_allclose(b.v, a.v, atol=1e-12)
        np.testing.assert_allclose(b.R, a.R, atol=1e-12)


def test_metrics_round_trip(tmp_path):
    m = {"rmse_pos_m": 0.1, "rmse_att_rad": 0.01, "nees_mean": None, "runtime_s": 1.5}
    io.write_metrics(tmp_path / "m.json", m)
    assert io.read_metrics(tmp_path / "m.json") == m


def test_unwritable_path_names_the_path(tmp_path):
    with pytest.raises(OSError, match="cannot write"):
        io.write_metrics(tmp_path / "missing" / "m.json", {})


def test_bundle_rejects_frames_outside_imu_span(tmp_path):
    cam = CameraModel(**TABLE_I)
    io.write_config(tmp_path / io.CONFIG_FILE, cam, NoiseParams(), FilterConfig())
    io.write_imu_csv(tmp_path / io.IMU_FILE, [ImuSample(k * 5_000_000, np.zeros(3), np.zeros(3)) for k in range(3)])
    (tmp_path / io.TRACKS_FILE).write_text(io.TRACK_HEADER + "\n20000000,1,1,1,5,5\n")
    with pytest.raises(io.ParseError, match="outside the IMU span"):
        io.load_bundle(tmp_path)
