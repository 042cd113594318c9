import os

import pytest

from prototree.cli import main

TINY_CONFIG = """
# desk-scale smoke configuration
height = 2
latent_depth = 8
input_side = 32
stages = 8:3:2,8:3:2
epochs = 2
batch_size = 8
lr_body = 0.003
lr_head = 0.003
lr_prototypes = 0.003
seed = 11
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = str(root / "data")
    assert main(["gen-data", "--k", "2", "--n", "12", "--side", "32",
                 "--seed", "5", "--out", data]) == 0
    config = root / "train.cfg"
    config.write_text(TINY_CONFIG)
    ckpt = str(root / "model.npt")
    assert main(["train", "--config", str(config), "--data", data,
                 "--out", ckpt, "--quiet"]) == 0
    return {"root": root, "data": data, "config": str(config), "ckpt": ckpt}


class TestGenData:
    def test_layout(self, workspace):
        data = workspace["data"]
        assert os.path.exists(os.path.join(data, "train", "labels.csv"))
        assert os.path.exists(os.path.join(data, "test", "class_1"))


class TestTrain:
    def test_checkpoint_and_metrics_exist(self, workspace):
        assert os.path.exists(workspace["ckpt"])
        csv = workspace["ckpt"] + ".metrics.csv"
        lines = open(csv).read().splitlines()
        assert lines[0] == "epoch,loss,train_acc,test_acc"
        assert len(lines) == 3

    def test_determinism_byte_identical(self, workspace, tmp_path):
        out1, out2 = str(tmp_path / "a.npt"), str(tmp_path / "b.npt")
        for out in (out1, out2):
            assert main(["train", "--config", workspace["config"],
                         "--data", workspace["data"], "--out", out,
                         "--quiet"]) == 0
        assert open(out1, "rb").read() == open(out2, "rb").read()
        assert open(out1 + ".metrics.csv").read() \
            == open(out2 + ".metrics.csv").read()

    def test_config_override_changes_result(self, workspace, tmp_path):
        out = str(tmp_path / "c.npt")
        assert main(["train", "--config", workspace["config"], "--data",
                     workspace["data"], "--out", out, "--quiet",
                     "--set", "seed=12"]) == 0
        assert open(out, "rb").read() != open(workspace["ckpt"], "rb").read()

    def test_unknown_config_key_exit_two(self, workspace, tmp_path):
        code = main(["train", "--config", workspace["config"], "--data",
                     workspace["data"], "--out", str(tmp_path / "x.npt"),
                     "--set", "nonsense=1"])
        assert code == 2


class TestEval:
    def test_soft_eval_runs(self, workspace, capsys):
        assert main(["eval", "--ckpt", workspace["ckpt"], "--data",
                     workspace["data"]]) == 0
        out = capsys.readouterr().out
        assert "accuracy " in out and "fidelity 1.0" in out

    @pytest.mark.parametrize("strategy", ["max_path", "greedy"])
    def test_hard_strategies_run(self, workspace, strategy, capsys):
        assert main(["eval", "--ckpt", workspace["ckpt"], "--data",
                     workspace["data"], "--strategy", strategy]) == 0
        out = capsys.readouterr().out
        fid = float([l for l in out.splitlines()
                     if l.startswith("fidelity")][0].split()[1])
        assert 0.0 <= fid <= 1.0


class TestLifecycle:
    def test_prune_project_visualize_explain(self, workspace, tmp_path,
                                             capsys):
        pruned = str(tmp_path / "pruned.npt")
        # max leaf probability is always >= 0.5 at K=2, so 0.4 never
        # empties the tree regardless of how little the smoke run learned
        assert main(["prune", "--ckpt", workspace["ckpt"], "--tau", "0.4",
                     "--out", pruned]) == 0
        projected = str(tmp_path / "projected.npt")
        assert main(["project", "--ckpt", pruned, "--data",
                     workspace["data"], "--out", projected]) == 0
        header = capsys.readouterr().out.splitlines()
        viz = str(tmp_path / "viz")
        assert main(["visualize", "--ckpt", projected, "--out-dir",
                     viz]) == 0
        assert os.path.exists(os.path.join(viz, "tree.dot"))
        image = os.path.join(workspace["data"], "test", "class_0",
                             "00000.ppm")
        out_dir = str(tmp_path / "local")
        assert main(["explain", "--ckpt", projected, "--image", image,
                     "--out-dir", out_dir]) == 0
        pages = [f for f in os.listdir(out_dir) if f.endswith(".html")]
        assert any(f.startswith("explain_") for f in pages)

    def test_project_unconstrained_flag(self, workspace, tmp_path):
        out = str(tmp_path / "unconstrained.npt")
        assert main(["project", "--ckpt", workspace["ckpt"], "--data",
                     workspace["data"], "--no-constrained", "--out",
                     out]) == 0

    def test_visualize_rejects_unprojected(self, workspace, tmp_path):
        code = main(["visualize", "--ckpt", workspace["ckpt"], "--out-dir",
                     str(tmp_path / "nope")])
        assert code == 1

    def test_png_flag(self, workspace, tmp_path):
        projected = str(tmp_path / "proj.npt")
        main(["project", "--ckpt", workspace["ckpt"], "--data",
              workspace["data"], "--out", projected])
        viz = str(tmp_path / "vizpng")
        assert main(["visualize", "--ckpt", projected, "--out-dir", viz,
                     "--png"]) == 0
        assert any(f.endswith(".png")
                   for f in os.listdir(os.path.join(viz, "prototypes")))


class TestEnsembleEval:
    def test_two_member_ensemble(self, workspace, tmp_path, capsys):
        other = str(tmp_path / "other.npt")
        main(["train", "--config", workspace["config"], "--data",
              workspace["data"], "--out", other, "--quiet",
              "--set", "seed=13"])
        assert main(["ensemble-eval", "--ckpt", workspace["ckpt"],
                     "--ckpt", other, "--data", workspace["data"]]) == 0
        out = capsys.readouterr().out
        assert "ensemble_acc" in out and "member_1_acc" in out


class TestExitCodes:
    def test_unknown_flag_is_two(self, workspace):
        assert main(["eval", "--ckpt", workspace["ckpt"], "--data",
                     workspace["data"], "--bogus"]) == 2

    def test_unknown_command_is_two(self):
        assert main(["frobnicate"]) == 2

    def test_missing_file_is_three(self, workspace, tmp_path):
        assert main(["eval", "--ckpt", str(tmp_path / "missing.npt"),
                     "--data", workspace["data"]]) == 3

    def test_version_mismatch_is_four(self, workspace, tmp_path):
        bogus = tmp_path / "bogus.npt"
        bogus.write_bytes(b"NPTT\x63\x00\x00\x00")
        assert main(["eval", "--ckpt", str(bogus), "--data",
                     workspace["data"]]) == 4


class TestSelftestCommand:
    def test_exit_zero_and_pass_lines(self, capsys):
        assert main(["selftest"]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") >= 5 and "FAIL" not in out
