import json

import pytest
from click.testing import CliRunner

from flowseg.cli import main


def make_config(tmp_path, **overrides):
    cfg = {
        "seed": 21,
        "out_root": str(tmp_path / "run"),
        "data": {
            "root": str(tmp_path / "data"),
            "synth": {"seed": 21, "num_clips": 3, "frames_per_clip": 10, "num_shapes": 2},
        },
        "networks": {"feature_channels": 16, "segnet_base": 8, "flownet_base": 8,
                     "dmnet_channels": 8, "cfnet_base": 8},
        "train": {
            "segnet": {"epochs_high": 1, "epochs_low": 1, "batch_size": 8},
            "flow_pretrain": {"epochs_high": 1, "epochs_low": 1, "batch_size": 8},
            "dmnet": {"epochs_high": 1, "epochs_low": 1, "batch_size": 4, "steps_per_epoch": 3},
            "joint": {"epochs_high": 1, "epochs_low": 1, "batch_size": 2, "steps_per_epoch": 3},
        },
        "evaluation": {"distance_min": 1, "distance_max": 2},
    }
    cfg.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One full CLI lifecycle on a miniature dataset."""
    tmp_path = tmp_path_factory.mktemp("cli")
    config = make_config(tmp_path)
    runner = CliRunner()

    def run(*args, expect=0):
        result = runner.invoke(main, [str(a) for a in args], catch_exceptions=False)
        assert result.exit_code == expect, f"{args} -> {result.exit_code}: {result.output}"
        return result

    run("synth", "--config", config)
    for stage in ("segnet", "flow-pretrain", "dmnet", "joint"):
        run("train", stage, "--config", config)
    return tmp_path, config, run


class TestConfigSurface:
    def test_unknown_key_is_config_error(self, tmp_path):
        cfg = make_config(tmp_path)
        data = json.loads(cfg.read_text())
        data["tarining"] = {}
        cfg.write_text(json.dumps(data))
        result = CliRunner().invoke(main, ["synth", "--config", str(cfg)])
        assert result.exit_code == 2
        assert "tarining" in result.output

    def test_nested_unknown_key(self, tmp_path):
        cfg = make_config(tmp_path)
        data = json.loads(cfg.read_text())
        data["data"]["synth"]["n_clips"] = 3
        cfg.write_text(json.dumps(data))
        result = CliRunner().invoke(main, ["synth", "--config", str(cfg)])
        assert result.exit_code == 2
        assert "data.synth.n_clips" in result.output

    def test_missing_config_file(self, tmp_path):
        result = CliRunner().invoke(main, ["synth", "--config", str(tmp_path / "nope.json")])
        assert result.exit_code == 2

    def test_invalid_value_rejected(self, tmp_path):
        cfg = make_config(tmp_path)
        data = json.loads(cfg.read_text())
        data["interval"] = 0
        cfg.write_text(json.dumps(data))
        result = CliRunner().invoke(main, ["train", "segnet", "--config", str(cfg)])
        assert result.exit_code == 2


class TestSynth:
    def test_refuses_rerun_without_force(self, workspace):
        tmp_path, config, run = workspace
        result = CliRunner().invoke(main, ["synth", "--config", str(config)])
        assert result.exit_code == 4
        run("synth", "--config", config, "--force")

    def test_same_seed_reproduces_manifest(self, workspace, tmp_path):
        ws_tmp, config, run = workspace
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        run("synth", "--config", config, "--out", out_a)
        run("synth", "--config", config, "--out", out_b)
        assert (out_a / "manifest.json").read_text() == (out_b / "manifest.json").read_text()

    def test_effective_config_written(self, workspace):
        tmp_path, config, run = workspace
        effective = json.loads((tmp_path / "data" / "effective_config.json").read_text())
        assert effective["seed"] == 21
        assert effective["train"]["segnet"]["batch_size"] == 8  # defaults merged


class TestTrainCommand:
    def test_out_of_order_stage_exits_3(self, tmp_path):
        config = make_config(tmp_path, out_root=str(tmp_path / "fresh"))
        CliRunner().invoke(main, ["synth", "--config", str(config)], catch_exceptions=False)
        result = CliRunner().invoke(main, ["train", "joint", "--config", str(config)])
        assert result.exit_code == 3

    def test_metrics_csv_emitted(self, workspace):
        tmp_path, config, run = workspace
        logs = tmp_path / "run" / "logs"
        assert (logs / "segnet.csv").is_file()
        header = (logs / "joint.csv").read_text().splitlines()[0]
        assert header == "step,L_P@F2,L_C@F2,L_DGFL@F2,L_P@F3,L_C@F3,L_DGFL@F3,L_total,lr"

    def test_bad_ablation_rejected_by_click(self, workspace):
        tmp_path, config, run = workspace
        result = CliRunner().invoke(main, ["train", "joint", "--config", str(config),
                                           "--ablate", "no-everything"])
        assert result.exit_code == 2


class TestInferCommand:
    def test_missing_checkpoints_exit_3(self, tmp_path):
        config = make_config(tmp_path, out_root=str(tmp_path / "fresh2"))
        CliRunner().invoke(main, ["synth", "--config", str(config)], catch_exceptions=False)
        result = CliRunner().invoke(main, ["infer", "--config", str(config)])
        assert result.exit_code == 3

    def test_predictions_written(self, workspace):
        tmp_path, config, run = workspace
        run("infer", "--config", config, "--clips", "val", "--interval", 3)
        val_clip = "clip_0002"
        preds = tmp_path / "run" / "pred" / "clips" / val_clip / "pred"
        assert len(list(preds.iterdir())) == 10

    def test_debug_dumps_gated(self, workspace):
        tmp_path, config, run = workspace
        debug = tmp_path / "run" / "pred" / "clips" / "clip_0002" / "debug"
        assert not debug.exists()
        run("infer", "--config", config, "--clips", "clip_0002", "--interval", 3,
            "--dump-intermediates")
        assert any("distortion" in p.name for p in debug.iterdir())

    def test_oracle_flag(self, workspace):
        tmp_path, config, run = workspace
        run("infer", "--config", config, "--clips", "clip_0002", "--oracle")

    def test_unknown_clip_rejected(self, workspace):
        tmp_path, config, run = workspace
        result = CliRunner().invoke(main, ["infer", "--config", str(config),
                                           "--clips", "clip_9999"])
        assert result.exit_code == 4


class TestEvalCommands:
    def test_flops_report(self, workspace):
        tmp_path, config, run = workspace
        result = run("eval", "flops", "--config", config)
        assert "c_seg" in result.output
        report = json.loads((tmp_path / "run" / "eval" / "flops.json").read_text())
        assert report["c_seg"] > 0 and report["c_warp"] > 0
        assert report["breakdown"]["key_path"]["total"] == report["c_seg"]

    def test_flops_with_default_widths_reproduces_fixture(self, tmp_path):
        """eval flops works without checkpoints and, at the documented default
        widths, reproduces the hand-summed cost split."""
        config = make_config(tmp_path, out_root=str(tmp_path / "flopsrun"))
        data = json.loads(config.read_text())
        data["networks"] = {}  # documented defaults
        config.write_text(json.dumps(data))
        runner = CliRunner()
        runner.invoke(main, ["synth", "--config", str(config)], catch_exceptions=False)
        result = runner.invoke(main, ["eval", "flops", "--config", str(config)],
                               catch_exceptions=False)
        assert result.exit_code == 0, result.output
        report = json.loads((tmp_path / "flopsrun" / "eval" / "flops.json").read_text())
        assert report["c_seg"] == 125_634_560
        assert report["c_warp"] == 61_462_080

    def test_cca_requires_pda(self, tmp_path):
        config = make_config(tmp_path, out_root=str(tmp_path / "fresh3"))
        CliRunner().invoke(main, ["synth", "--config", str(config)], catch_exceptions=False)
        result = CliRunner().invoke(main, ["eval", "cca", "--config", str(config)])
        assert result.exit_code == 3

    def test_pda_then_cca_then_plots(self, workspace):
        tmp_path, config, run = workspace
        run("eval", "pda", "--config", config)
        eval_dir = tmp_path / "run" / "eval"
        assert (eval_dir / "pda.csv").is_file()
        assert (eval_dir / "pda_prop_only.csv").is_file()

        result = run("eval", "cca", "--config", config)
        assert (eval_dir / "cca.csv").is_file()
        # the cca x-column must reproduce mean_cost of the flops report exactly
        flops = json.loads((eval_dir / "flops.json").read_text())
        import csv as csvmod

        with open(eval_dir / "cca.csv", newline="") as f:
            rows = list(csvmod.DictReader(f))
        for row in rows:
            d = int(row["distance"])
            want = (flops["c_seg"] + flops["c_warp"] * d) / (d + 1) / 1e9
            assert abs(float(row["mean_gflops"]) - want) < 1e-6

        run("eval", "false-correction", "--config", config)
        assert (eval_dir / "false_correction.csv").is_file()
        run("eval", "upper-bound", "--config", config)
        assert (eval_dir / "pda_oracle.csv").is_file()

        run("plot", "--config", config)
        assert (eval_dir / "pda.svg").is_file()
        assert (eval_dir / "cca.svg").is_file()
        assert (eval_dir / "false_correction.svg").is_file()

    def test_missing_distance_error_lists_them(self, workspace):
        tmp_path, config, run = workspace
        wider = json.loads(config.read_text())
        wider["evaluation"] = {"distance_min": 1, "distance_max": 4}
        wide_cfg = tmp_path / "wide.json"
        wide_cfg.write_text(json.dumps(wider))
        result = CliRunner().invoke(main, ["eval", "cca", "--config", str(wide_cfg)])
        assert result.exit_code == 4
        assert "[3, 4]" in result.output
