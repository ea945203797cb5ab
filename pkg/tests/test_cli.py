import json

import numpy as np
import pytest

from trafficppt import cli
from trafficppt.cli import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, RunManifest, git_hash, main
from trafficppt.inference import write_volume_csv
from trafficppt.pipeline import data_path

TINY = str(data_path("tiny.cfg"))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """One small simulate -> pretrain -> finetune -> predict chain shared by the tests."""
    root = tmp_path_factory.mktemp("cli")
    with cli._cwd(root):
        assert main(["simulate", "--config", TINY, "--seed", "3", "--out", "sim"]) == EXIT_OK
        assert main(["pretrain", "--config", TINY, "--fleet", "sim/fleet.txt", "--out", "pre"]) == EXIT_OK
        assert main(["finetune", "--config", TINY, "--fleet", "sim/fleet.txt", "--init", "pre",
                     "--out", "ft"]) == EXIT_OK
        assert main(["predict", "--config", TINY, "--model", "ft", "--fleet", "sim/fleet.txt",
                     "--out", "pred"]) == EXIT_OK
    return root


class TestExitCodes:
    def test_unknown_command(self, capsys):
        assert main(["fly"]) == EXIT_INVALID
        assert "usage" in capsys.readouterr().err

    @pytest.mark.parametrize("argv,flag", [
        (["simulate"], "--out"),
        (["evaluate", "--pred", "x.csv"], "--truth"),
        (["finetune", "--out", "o"], "--fleet"),
    ])
    def test_missing_flag_is_named(self, argv, flag, capsys):
        assert main(argv) == EXIT_INVALID
        assert flag in capsys.readouterr().err

    def test_missing_input_file(self, tmp_path, capsys):
        code = main(["evaluate", "--pred", str(tmp_path / "nope.csv"), "--truth", str(tmp_path / "nope.csv")])
        assert code == EXIT_INVALID
        assert "--pred" in capsys.readouterr().err

    def test_unknown_ablation_axis(self, tmp_path):
        assert main(["ablate", "--axis", "colour", "--out", str(tmp_path)]) == EXIT_INVALID

    def test_bad_seed_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv("TPPT_SEED", "seven")
        assert main(["simulate", "--config", TINY, "--out", str(tmp_path)]) == EXIT_INVALID

    def test_gradcheck_failure_is_runtime_error(self, capsys):
        assert main(["gradcheck", "--tolerance", "0"]) == EXIT_RUNTIME
        assert "fail" in capsys.readouterr().out

    def test_help_lists_commands(self, capsys):
        with pytest.raises(SystemExit):
            main(["--help"])
        out = capsys.readouterr().out
        for name in ("simulate", "pretrain", "finetune", "predict", "evaluate", "export", "gradcheck"):
            assert name in out


class TestCommands:
    def test_outputs_and_manifests(self, workdir):
        for d, files in {"sim": ["fleet.txt", "weights.txt"],
                         "pre": ["model.ckpt", "model.cfg", "loss_curve.csv"],
                         "ft": ["model.ckpt", "checkpoints.txt", "loss_curve.csv"],
                         "pred": ["volume.csv", "oracle.csv", "baseline.csv"]}.items():
            manifest = RunManifest.read(workdir / d / "manifest.json")
            for f in files:
                assert manifest.outputs[f] == git_hash(workdir / d / f)
            assert manifest.seed == 3 or d != "sim"

    def test_manifest_records_input_hashes(self, workdir):
        manifest = RunManifest.read(workdir / "pre" / "manifest.json")
        assert manifest.input_hashes["fleet"] == git_hash(workdir / "sim" / "fleet.txt")
        assert manifest.command == "pretrain"

    def test_evaluate_identical_files_is_zero(self, workdir, capsys):
        vol = str(workdir / "pred" / "oracle.csv")
        assert main(["evaluate", "--pred", vol, "--truth", vol]) == EXIT_OK
        assert capsys.readouterr().out.strip() == "mae=0.000000"

    def test_evaluate_known_mae(self, chain, tmp_path, capsys):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        write_volume_csv(np.zeros((3, 2)), chain, a)
        write_volume_csv(np.full((3, 2), 0.5), chain, b)
        assert main(["evaluate", "--pred", str(a), "--truth", str(b), "--out", str(tmp_path / "m")]) == EXIT_OK
        assert json.loads((tmp_path / "m" / "metrics.json").read_text())["mae"] == 0.5

    def test_gradcheck_passes(self, capsys):
        assert main(["gradcheck"]) == EXIT_OK
        out = capsys.readouterr().out
        assert out.startswith("max_rel_err=") and "pass" in out

    def test_export_writes_three_files(self, workdir, tmp_path):
        out = tmp_path / "exp"
        code = main(["export", "--volume", str(workdir / "pred" / "volume.csv"),
                     "--coords", str(data_path("toy_grid_5x5.coords")), "--out", str(out)])
        assert code == EXIT_OK
        features = json.loads((out / "volume_heatmap.geojson").read_text())["features"]
        assert len(features) == 80

    def test_export_rejects_mismatched_network(self, workdir, tmp_path):
        net = tmp_path / "chain.net"
        net.write_text("V=2 E=1\n1 2 1.0\n")
        code = main(["export", "--network", str(net), "--volume", str(workdir / "pred" / "volume.csv"),
                     "--out", str(tmp_path / "x")])
        assert code == EXIT_INVALID


class TestSeeds:
    def test_env_seed_fallback(self, tmp_path, monkeypatch):
        monkeypatch.setenv("TPPT_SEED", "11")
        assert main(["simulate", "--config", TINY, "--out", str(tmp_path / "env")]) == EXIT_OK
        monkeypatch.delenv("TPPT_SEED")
        assert main(["simulate", "--config", TINY, "--seed", "11", "--out", str(tmp_path / "flag")]) == EXIT_OK
        assert RunManifest.read(tmp_path / "env" / "manifest.json").seed == 11
        assert (tmp_path / "env" / "fleet.txt").read_bytes() == (tmp_path / "flag" / "fleet.txt").read_bytes()

    def test_flag_beats_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("TPPT_SEED", "11")
        assert main(["simulate", "--config", TINY, "--seed", "2", "--out", str(tmp_path)]) == EXIT_OK
        assert RunManifest.read(tmp_path / "manifest.json").seed == 2

    def test_seeds_change_output(self, tmp_path):
        for s in ("1", "2"):
            assert main(["simulate", "--config", TINY, "--seed", s, "--out", str(tmp_path / s)]) == EXIT_OK
        assert (tmp_path / "1" / "fleet.txt").read_bytes() != (tmp_path / "2" / "fleet.txt").read_bytes()


class TestRerun:
    @pytest.mark.parametrize("run_dir", ["sim", "pre", "ft", "pred"])
    def test_rerun_reports_same(self, workdir, run_dir, capsys):
        assert main(["rerun", "--manifest", str(workdir / run_dir / "manifest.json")]) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        status = [ln.split()[0] for ln in lines if ln.split() and ln.split()[0] in ("same", "DIFF", "skip")]
        assert status and "DIFF" not in status

    def test_rerun_detects_tampering(self, workdir, tmp_path):
        src = tmp_path / "sim"
        assert main(["simulate", "--config", TINY, "--seed", "5", "--out", str(src)]) == EXIT_OK
        manifest = json.loads((src / "manifest.json").read_text())
        manifest["outputs"]["fleet.txt"] = "0" * 40
        (src / "manifest.json").write_text(json.dumps(manifest))
        assert main(["rerun", "--manifest", str(src / "manifest.json")]) == EXIT_RUNTIME

    def test_replace_flag(self):
        argv = ["x", "--seed", "1", "--out=a", "--workers", "3"]
        out = cli._replace_flag(cli._replace_flag(argv, "--out", "b"), "--seed", "9")
        assert out == ["x", "--workers", "3", "--out", "b", "--seed", "9"]


class TestRingNetwork:
    @pytest.mark.parametrize("V,L", [(8, 2), (5, 4), (3, 1)])
    def test_out_degree(self, V, L):
        net = cli.ring_network(V, L)
        assert net.edge_count == V * L
        succ = net.successors()
        for v in range(1, V + 1):
            assert sorted(d for d, _ in succ[v]) == sorted((v - 1 + k) % V + 1 for k in range(1, L + 1))
