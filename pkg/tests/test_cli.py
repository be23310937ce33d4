import json
import subprocess
import sys
import time

import numpy as np
import pytest

from articfeed.cli import main
from articfeed.geometry import read_obj
from articfeed.models import generate_synthetic_palate, reconstruct_pca, save_model
from articfeed.stream import synthetic_sweep, write_sweep
from articfeed.stream import CoilFrame, CoilSample, SweepHeader


@pytest.fixture(scope="module")
def models_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("models")
    assert main(["make-models", "--out", str(d), "--seed", "3"]) == 0
    return d


@pytest.fixture(scope="module")
def sweep_path(tmp_path_factory):
    d = tmp_path_factory.mktemp("sweeps")
    header, frames, _ = synthetic_sweep(seed=3, duration=2.0, rate=100.0, still_until=1e9)
    path = d / "sweep.jsonl"
    write_sweep(path, header, frames)
    return path


class TestUsageErrors:
    def test_no_args_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

    def test_help_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        for cmd in ("simulate", "serve", "fit-palate", "export", "metrics"):
            assert cmd in out

    def test_subcommand_help_lists_flags(self, capsys):
        for cmd, flags in {
            "simulate": ["--synthetic", "--bind", "--rate"],
            "serve": ["--device", "--file", "--models", "--session", "--ws"],
            "fit-palate": ["--coil", "--out"],
            "export": ["--out", "--format"],
        }.items():
            with pytest.raises(SystemExit) as exc:
                main([cmd, "--help"])
            assert exc.value.code == 0
            out = capsys.readouterr().out
            for flag in flags:
                assert flag in out

    def test_negative_rate_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["simulate", "--synthetic", "1", "--rate", "-5"])
        assert exc.value.code == 2

    def test_device_and_file_conflict(self, models_dir):
        with pytest.raises(SystemExit) as exc:
            main(["serve", "--device", "x:1", "--file", "y.jsonl", "--models", str(models_dir)])
        assert exc.value.code == 2

    def test_unknown_export_format(self, models_dir, sweep_path, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main([
                "export", str(models_dir / "tongue.json"), str(sweep_path),
                "--out", str(tmp_path), "--format", "stl",
            ])
        assert exc.value.code == 2


class TestSimulate:
    def test_missing_sweep_file(self, capsys):
        assert main(["simulate", "/nonexistent/sweep.jsonl"]) == 1
        assert "simulate:" in capsys.readouterr().err

    def test_simulate_and_serve_loopback(self, models_dir, tmp_path):
        sim = subprocess.Popen(
            [sys.executable, "-m", "articfeed.cli", "simulate", "--synthetic", "5", "--rate", "100"],
            stdout=subprocess.PIPE,
            text=True,
        )
        srv = None
        try:
            line = sim.stdout.readline()
            assert line.startswith("listening on ")
            addr = line.split()[-1]

            srv = subprocess.Popen(
                [
                    sys.executable, "-m", "articfeed.cli", "serve",
                    "--device", addr, "--models", str(models_dir),
                    "--ws", "127.0.0.1:0", "--auto-setup", "--setup-seconds", "0.5",
                    "--report-dir", str(tmp_path / "report"),
                ],
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                text=True,
            )
            time.sleep(4.0)  # auto-setup (1 s) plus a stretch of live frames
            sim.terminate()  # serve ends cleanly on the disconnect
            out, _ = srv.communicate(timeout=30)
            status = srv.returncode
        finally:
            sim.terminate()
            sim.wait(timeout=10)
            if srv is not None and srv.poll() is None:
                srv.kill()

        assert status == 0
        report = json.loads(out[out.index("{"):])
        assert report["frames"] > 0
        assert (tmp_path / "report" / "session_report.json").exists()
        assert (tmp_path / "report" / "session_metrics.txt").exists()

    def test_serve_unreachable_device(self, models_dir, capsys):
        assert main([
            "serve", "--device", "127.0.0.1:9", "--models", str(models_dir),
            "--ws", "127.0.0.1:0",
        ]) == 1


class TestServeFile:
    def test_file_session_report(self, models_dir, sweep_path, capsys):
        status = main([
            "serve", "--file", str(sweep_path), "--models", str(models_dir),
            "--ws", "127.0.0.1:0", "--auto-setup", "--setup-seconds", "0.4",
        ])
        assert status == 0
        out = capsys.readouterr().out
        report = json.loads(out[out.index("{"):])
        assert report["frames"] > 0
        assert report["source_error"] is None

    def test_missing_models_dir(self, sweep_path, capsys):
        assert main([
            "serve", "--file", str(sweep_path), "--models", "/nonexistent",
            "--ws", "127.0.0.1:0",
        ]) == 1


class TestFitPalate:
    def make_trace_sweep(self, tmp_path, palate, x_true, n=60):
        mesh = reconstruct_pca(palate, x_true)
        rng = np.random.default_rng(17)
        frames = []
        for k in range(n):
            f = rng.integers(0, mesh.num_faces)
            w = rng.dirichlet(np.ones(3))
            p = w @ mesh.vertices[mesh.faces[f]]
            frames.append(CoilFrame(seq=k, t=k * 0.01, coils=(CoilSample(id="tt", pos=p),)))
        path = tmp_path / "trace.jsonl"
        write_sweep(path, SweepHeader(rate=100.0, coil_ids=("tt",)), frames)
        return path

    def test_synthetic_trace(self, tmp_path, capsys):
        palate = generate_synthetic_palate(seed=19, n=4, grid=10)
        model_path = tmp_path / "palate.json"
        save_model(palate, model_path)
        x_true = np.zeros(4)
        x_true[0] = 0.5
        trace = self.make_trace_sweep(tmp_path, palate, x_true)
        out_path = tmp_path / "weights.json"
        status = main([
            "fit-palate", str(model_path), str(trace),
            "--out", str(out_path), "--report-dir", str(tmp_path / "figs"),
        ])
        assert status == 0
        doc = json.loads(out_path.read_text())
        assert doc["mean_residual_mm"] <= 1e-3
        assert len(doc["weights"]) == 4
        assert (tmp_path / "figs" / "palate_residual.png").exists()

    def test_bad_model_file(self, tmp_path, sweep_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{}")
        assert main(["fit-palate", str(bad), str(sweep_path)]) == 1

    def test_missing_args_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["fit-palate"])
        assert exc.value.code == 2


class TestExport:
    def test_obj_per_frame_round_trip(self, models_dir, tmp_path):
        header, frames, _ = synthetic_sweep(seed=3, duration=0.1, rate=100.0, still_until=1e9)
        sweep = tmp_path / "ten.jsonl"
        write_sweep(sweep, header, frames)
        out = tmp_path / "export"
        status = main([
            "export", str(models_dir / "tongue.json"), str(sweep), "--out", str(out),
        ])
        assert status == 0
        objs = sorted(out.glob("frame_*.obj"))
        assert len(objs) == 10
        assert (out / "weights.csv").exists()

        # re-read one OBJ and compare against the weights it was written from
        import csv as csv_mod

        from articfeed.models import load_model, multilinear_vertices

        model = load_model(models_dir / "tongue.json")
        with open(out / "weights.csv") as fh:
            rows = list(csv_mod.DictReader(fh))
        k = 7
        x = np.array([float(rows[k][f"x{i}"]) for i in range(model.n)])
        y = np.array([float(rows[k][f"y{j}"]) for j in range(model.m)])
        mesh = read_obj(objs[k])
        verts = multilinear_vertices(model, x, y).reshape(-1, 3)
        assert np.allclose(mesh.vertices, verts, atol=1e-6)

    def test_export_writes_figures(self, models_dir, tmp_path, sweep_path):
        out = tmp_path / "export2"
        assert main([
            "export", str(models_dir / "tongue.json"), str(sweep_path), "--out", str(out),
        ]) == 0
        assert (out / "export_weights_trace.png").exists()
        assert (out / "export_residual_trace.png").exists()


class TestMetrics:
    def test_key_value_dump(self, models_dir, sweep_path, tmp_path, capsys):
        main([
            "serve", "--file", str(sweep_path), "--models", str(models_dir),
            "--ws", "127.0.0.1:0", "--auto-setup", "--setup-seconds", "0.4",
            "--report-dir", str(tmp_path),
        ])
        capsys.readouterr()
        assert main(["metrics", str(tmp_path / "session_report.json")]) == 0
        out = capsys.readouterr().out
        assert "frames=" in out
        assert "latency_p99_ms=" in out
        assert "dropouts=" in out
