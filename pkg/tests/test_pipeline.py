import numpy as np
import pytest

from surfel_lio.cli import main
from surfel_lio.config import load_run_config
from surfel_lio.io import read_tum
from surfel_lio.pipeline import run_odometry
from surfel_lio.sim import default_sim_config, generate_dataset, preset


@pytest.fixture(scope="module")
def static_ds(tmp_path_factory):
    d = tmp_path_factory.mktemp("static")
    w, spec = preset("static-room", 4.0)
    generate_dataset(w, spec, default_sim_config(noisy=False, seed=2), d)
    return d


@pytest.fixture(scope="module")
def room_ds(tmp_path_factory):
    d = tmp_path_factory.mktemp("room")
    w, spec = preset("room", 4.0)
    generate_dataset(w, spec, default_sim_config(noisy=True, seed=3), d)
    return d


def test_stationary_dataset_stays_constant(static_ds, tmp_path):
    res = run_odometry(load_run_config(static_ds, output=str(tmp_path)))
    tr = read_tum(tmp_path / "trajectory.txt")
    assert len(tr) == len(read_tum(static_ds / "groundtruth.txt"))
    assert np.abs(tr.p - tr.p[0]).max() <= 1e-3
    assert len(res.keyframes) == 1


def test_runs_are_deterministic(room_ds, tmp_path):
    for name in ("a", "b"):
        run_odometry(load_run_config(room_ds, output=str(tmp_path / name)))
    assert (tmp_path / "a" / "trajectory.txt").read_bytes() == (tmp_path / "b" / "trajectory.txt").read_bytes()


@pytest.mark.parametrize("flag", ["on", "off"])
def test_cli_run_covers_ground_truth(room_ds, tmp_path, flag, capsys):
    out = tmp_path / flag
    assert main(["run", "--dataset", str(room_ds), "--output", str(out), f"--loop-closure={flag}"]) == 0
    gt = read_tum(room_ds / "groundtruth.txt")
    est = read_tum(out / "trajectory.txt")
    np.testing.assert_allclose(est.t, gt.t, atol=1e-9)
    header = (out / "timing.csv").read_text().splitlines()[0]
    assert header == "window_index,t_k,dt_loop_ms,dt_solve_ms,num_factors"
    assert main(["eval", "--dataset", str(room_ds), "--output", str(out)]) == 0
    assert "ATE rmse=" in capsys.readouterr().out


def test_cli_reports_parse_errors(tmp_path, capsys):
    (tmp_path / "scans.csv").write_text("t,lidar_id,x,y,z,intensity\n0.0,0,1,2\n")
    (tmp_path / "imu.csv").write_text("t,wx,wy,wz,ax,ay,az\n")
    assert main(["run", "--dataset", str(tmp_path)]) == 2
    assert "scans.csv:2:" in capsys.readouterr().err


def test_cli_sim_and_config_errors(tmp_path, capsys):
    assert main(["sim", "--world", "static-room", "--duration", "1", "--output", str(tmp_path / "d")]) == 0
    assert (tmp_path / "d" / "scans.csv").exists()
    (tmp_path / "bad.txt").write_text("nonsense_key = 3\n")
    assert main(["run", "--dataset", str(tmp_path / "d"), "--config", str(tmp_path / "bad.txt")]) == 2
    assert "nonsense_key" in capsys.readouterr().err
