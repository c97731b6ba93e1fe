import numpy as np
import pytest

from surfel_lio.io import (
    IMU_HEADER, SCAN_HEADER, ParseError, ScanLog, Trajectory, parse_imu_log, parse_scan_log, read_kv,
    read_tum, write_imu_log, write_scan_log, write_tum,
)

from helpers import random_rotation_matrix


def test_scan_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    n = 100
    log = ScanLog(np.sort(rng.uniform(0, 1, n)).round(9), rng.integers(0, 2, n), rng.normal(size=(n, 3)).round(9),
                  np.zeros(n))
    write_scan_log(tmp_path / "s.csv", log)
    back = parse_scan_log(tmp_path / "s.csv")
    np.testing.assert_array_equal(back.t, log.t)
    np.testing.assert_array_equal(back.lidar_id, log.lidar_id)
    np.testing.assert_array_equal(back.xyz, log.xyz)


def test_imu_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    t = np.arange(50) / 400
    g, a = rng.normal(size=(50, 3)).round(9), rng.normal(size=(50, 3)).round(9)
    write_imu_log(tmp_path / "i.csv", t, g, a)
    s = parse_imu_log(tmp_path / "i.csv")
    np.testing.assert_array_equal(s.gyro, g)
    np.testing.assert_array_equal(s.acc, a)


def test_header_only_files(tmp_path):
    (tmp_path / "s.csv").write_text(SCAN_HEADER + "\n")
    (tmp_path / "i.csv").write_text(IMU_HEADER + "\n")
    assert len(parse_scan_log(tmp_path / "s.csv")) == 0
    assert len(parse_imu_log(tmp_path / "i.csv")) == 0


def test_shuffled_rows_name_first_bad_line(tmp_path):
    rows = [SCAN_HEADER] + [f"{0.1 * k:.9f},0,1,2,3,0" for k in range(6)]
    rows[4], rows[5] = rows[5], rows[4]
    (tmp_path / "s.csv").write_text("\n".join(rows) + "\n")
    with pytest.raises(ParseError, match=r"s\.csv:6:"):
        parse_scan_log(tmp_path / "s.csv")


def test_streams_checked_independently(tmp_path):
    rows = [SCAN_HEADER, "0.2,0,1,1,1,0", "0.1,1,1,1,1,0", "0.3,0,1,1,1,0"]
    (tmp_path / "s.csv").write_text("\n".join(rows) + "\n")
    assert len(parse_scan_log(tmp_path / "s.csv")) == 3


@pytest.mark.parametrize("bad", ["0.1,0,1,2", "0.1,0,a,2,3,0", "0.1,0,nan,2,3,0"])
def test_malformed_row(tmp_path, bad):
    (tmp_path / "s.csv").write_text(f"{SCAN_HEADER}\n0.0,0,1,2,3,0\n{bad}\n")
    with pytest.raises(ParseError, match=":3:"):
        parse_scan_log(tmp_path / "s.csv")


def test_tum_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    tr = Trajectory(np.arange(10) * 0.1, rng.normal(size=(10, 3)),
                    np.stack([random_rotation_matrix(rng) for _ in range(10)]))
    write_tum(tmp_path / "t.txt", tr)
    back = read_tum(tmp_path / "t.txt")
    np.testing.assert_allclose(back.p, tr.p, atol=1e-9)
    np.testing.assert_allclose(back.R, tr.R, atol=1e-8)
    assert len((tmp_path / "t.txt").read_text().splitlines()[0].split()) == 8


def test_tum_rejects_bad_quaternion(tmp_path):
    (tmp_path / "t.txt").write_text("0.0 0 0 0 0 0 0 0.9\n")
    with pytest.raises(ParseError):
        read_tum(tmp_path / "t.txt")


def test_kv_duplicate(tmp_path):
    (tmp_path / "k.txt").write_text("a = 1\na = 2\n")
    with pytest.raises(ParseError, match=":2:"):
        read_kv(tmp_path / "k.txt")
