from pathlib import Path

import numpy as np
import pytest

from lsckf.lines import CameraModel

# Table I: left camera intrinsics used during initialization
TABLE_I = dict(fu=458.654, fv=457.296, cu=367.215, cv=248.375, width=752, height=480)
TABLE_I_LEFT_R = np.array([[0.9901, -0.1382, 0.0265], [-0.0240, -0.3514, -0.9359], [0.1386, 0.9260, -0.3512]])
TABLE_I_LEFT_P = np.array([4.6091, 0.3022, 1.2372])
TABLE_I_RIGHT_R = np.array([[0.9904, -0.1359, 0.0249], [-0.0251, -0.3542, -0.9348], [0.1359, 0.9252, -0.3542]])
TABLE_I_RIGHT_P = np.array([4.5343, 0.4017, 1.2587])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def table_camera():
    return CameraModel(**TABLE_I)


def random_rotation(rng, max_angle=np.pi - 0.1):
    from lsckf.liegroup import so3_exp

    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    return so3_exp(axis * rng.uniform(0, max_angle))


FIXTURES = Path(__file__).parent / "fixtures"

# malformed fixture -> the location its diagnostic must name (line number or config key)
MALFORMED = {
    "config_bad_json.json": ":2:",
    "config_missing_key.json": "'camera.fu'",
    "config_wrong_type.json": "'noise.sigma_a'",
    "config_reflection.json": "'T_IC'",
    "config_unknown_key.json": "'filter.nonsense'",
    "imu_six_fields.csv": ":4:",
    "imu_non_numeric.csv": ":4:",
    "imu_non_monotone.csv": ":4:",
    "imu_nan.csv": ":4:",
    "imu_bad_timestamp.csv": ":4:",
    "tracks_duplicate.csv": ":4:",
    "tracks_zero_length.csv": ":4:",
    "tracks_out_of_bounds.csv": ":4:",
    "tracks_five_fields.csv": ":4:",
    "tracks_backwards_time.csv": ":4:",
    "traj_bad_quaternion.csv": ":3:",
    "traj_ten_fields.csv": ":2:",
}


def parse_fixture(path):
    """Dispatch a fixture to the parser for its kind."""
    from lsckf import io

    kind = path.name.split("_")[0]
    if kind == "config":
        return io.parse_config(path)
    if kind == "imu":
        return io.parse_imu_csv(path)
    if kind == "tracks":
        return io.parse_line_tracks(path, 752, 480)
    return io.parse_trajectory(path)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def report_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
