import csv
import json
import shutil

import numpy as np
import pytest
import yaml

from chipnet.cli import DEFAULTS, HIST_BINS, REQUIRED, describe_defaults, load_config, main, merge_config, \
    write_report
from chipnet.datakit import load_checkpoint, save_checkpoint
from chipnet.models import ConfigError

SMALL = {
    "data": {"source": "synthetic", "classes": 4, "samples_per_class": 20, "image_size": 8, "batch_size": 8,
             "val_fraction": 0.25},
    "model": {"widths": [8, 8, 8, 8]},
    "pretrain": {"epochs": 3},
    "prune": {"epochs": 6},
    "finetune": {"epochs": 3},
}


def write_config(path, out_dir, **sections):
    doc = {"run": {"output_dir": str(out_dir), "seed": 0}}
    for name, body in SMALL.items():
        doc[name] = {**body, **sections.get(name, {})}
    path.write_text(yaml.safe_dump(doc))
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "cfg.yaml", root / "run")
    for command in ("pretrain", "prune", "finetune"):
        assert run(command, "-c", cfg) == 0
    return root, cfg


class TestConfig:
    def test_required_keys_only_source_and_output(self):
        required = {f"{s}.{k}" for s, body in DEFAULTS.items() for k, v in body.items() if v == REQUIRED}
        assert required == {"run.output_dir", "data.source"}

    def test_help_lists_every_key_with_default(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["prune", "--help"])
        assert info.value.code == 0
        text = capsys.readouterr().out
        for section, body in DEFAULTS.items():
            for key, value in body.items():
                shown = value if value == REQUIRED else json.dumps(value)
                assert f"{section}.{key} = {shown}" in text

    def test_top_level_help_lists_keys(self, capsys):
        with pytest.raises(SystemExit):
            main(["--help"])
        assert describe_defaults() in capsys.readouterr().out

    def test_unknown_key_exit_2(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.yaml", tmp_path / "run")
        assert run("pretrain", "-c", cfg, "--set", "prune.alpha3=1") == 2
        assert "unknown config key prune.alpha3" in capsys.readouterr().err

    def test_unknown_key_in_file(self, tmp_path):
        (tmp_path / "c.yaml").write_text("data:\n  source: synthetic\n  colour: red\n")
        with pytest.raises(ConfigError, match="data.colour"):
            load_config(tmp_path / "c.yaml")

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown config section"):
            merge_config({"optimizer": {}})

    def test_missing_required(self, tmp_path, capsys):
        assert run("pretrain", "--set", f"run.output_dir={tmp_path}") == 2
        assert "data.source" in capsys.readouterr().err

    @pytest.mark.parametrize("override, message", [
        ("prune.epochs=two", "integer"),
        ("prune.crispness=1", "true or false"),
        ("prune.target=null", "may not be null"),
        ("model.widths=8", "list"),
    ])
    def test_type_checks(self, override, message):
        with pytest.raises(ConfigError, match=message):
            merge_config({}, [override])

    def test_overrides_parse_yaml_values(self):
        cfg = merge_config({}, ["prune.target=0.25", "model.widths=[4, 4, 4, 4]", "prune.psi_lr=null"])
        assert cfg["prune"]["target"] == 0.25
        assert cfg["model"]["widths"] == [4, 4, 4, 4]
        assert cfg["prune"]["psi_lr"] is None

    def test_exponent_without_dot(self):
        assert merge_config({}, ["prune.eps=1e-8"])["prune"]["eps"] == 1e-8

    def test_int_accepted_for_float(self):
        assert merge_config({}, ["prune.target=1"])["prune"]["target"] == 1.0

    def test_invalid_prune_value_exit_2(self, tmp_path, pipeline, capsys):
        _, cfg = pipeline
        assert run("prune", "-c", cfg, "--set", "prune.target=1.5",
                   "--set", f"run.output_dir={tmp_path}", "--from", pipeline[0] / "run/pretrain/checkpoint.ckpt") == 2
        assert "target" in capsys.readouterr().err


class TestStages:
    def test_artifacts(self, pipeline):
        root, _ = pipeline
        for stage, files in {"pretrain": ["checkpoint.ckpt", "train_records.csv"],
                             "prune": ["checkpoint.ckpt", "epochs.csv", "mask.json"],
                             "finetune": ["checkpoint.ckpt", "train_records.csv", "budgets.csv"]}.items():
            for name in files + ["manifest.json"]:
                assert (root / "run" / stage / name).is_file(), f"{stage}/{name}"
            manifest = json.loads((root / "run" / stage / "manifest.json").read_text())
            assert manifest["seed"] == 0 and manifest["command"] == stage
            assert set(manifest["versions"]) >= {"checkpoint", "mask", "csv_schema"}

    def test_prune_budget_within_granularity(self, pipeline):
        root, _ = pipeline
        doc = json.loads((root / "run/prune/mask.json").read_text())
        p = sum(layer["channels"] for layer in doc["layers"])
        assert 0.5 - 1 / p <= doc["budgets"]["channel"] <= 0.5

    def test_epoch_csv_schema(self, pipeline):
        rows = read_csv(pipeline[0] / "run/prune/epochs.csv")
        assert len(rows) == 6
        assert [int(r["epoch"]) for r in rows] == list(range(6))
        assert {"loss", "loss_ce", "loss_c", "loss_b", "val_acc", "budget", "beta", "gamma", "fatal"} <= set(rows[0])

    def test_prune_without_pretrain(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.yaml", tmp_path / "run")
        assert run("prune", "-c", cfg) == 1
        assert "run `pretrain` first" in capsys.readouterr().err

    def test_finetune_without_prune(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.yaml", tmp_path / "run")
        assert run("finetune", "-c", cfg) == 1
        assert "run `prune` first" in capsys.readouterr().err

    def test_finetune_rejects_pretrain_checkpoint(self, pipeline, tmp_path, capsys):
        root, cfg = pipeline
        assert run("finetune", "-c", cfg, "--set", f"run.output_dir={tmp_path}",
                   "--from", root / "run/pretrain/checkpoint.ckpt") == 1
        assert "needs a prune or transfer checkpoint" in capsys.readouterr().err

    def test_head_mismatch(self, pipeline, tmp_path, capsys):
        root, cfg = pipeline
        assert run("prune", "-c", cfg, "--set", "data.classes=3", "--set", f"run.output_dir={tmp_path}",
                   "--from", root / "run/pretrain/checkpoint.ckpt") == 1
        assert "4-class head" in capsys.readouterr().err

    def test_fatal_pruning_exit_3(self, pipeline, tmp_path, capsys):
        root, cfg = pipeline
        host = load_checkpoint(root / "run/prune/checkpoint.ckpt")
        host.arrays["mask"][:8] = 0
        save_checkpoint(host, tmp_path / "dead.ckpt")
        assert run("finetune", "-c", cfg, "--set", f"run.output_dir={tmp_path}", "--from", tmp_path / "dead.ckpt") == 3
        assert "fatal pruning" in capsys.readouterr().err


class TestEvaluate:
    def test_all_ones_equals_plain(self, pipeline, tmp_path):
        root, cfg = pipeline
        assert run("evaluate", "-c", cfg, "--set", f"run.output_dir={tmp_path}",
                   "--from", root / "run/pretrain/checkpoint.ckpt") == 0
        rows = read_csv(tmp_path / "evaluate/metrics.csv")
        acc = {(r["split"], r["mode"]): float(r["accuracy"]) for r in rows}
        assert acc[("train", "plain")] == acc[("train", "hard_mask")]
        assert acc[("val", "plain")] == acc[("val", "hard_mask")]

    def test_defaults_to_latest_stage(self, pipeline, capsys):
        _, cfg = pipeline
        assert run("evaluate", "-c", cfg) == 0
        out = capsys.readouterr().out
        assert "plain" in out and "hard_mask" not in out


class TestReport:
    def test_bundle(self, pipeline):
        root, _ = pipeline
        assert run("report", root / "run") == 0
        hist = read_csv(root / "run/report/z_histogram.csv")
        assert len(hist) == HIST_BINS and float(hist[0]["lo"]) == 0.0 and float(hist[-1]["hi"]) == 1.0
        assert sum(int(r["count"]) for r in hist) == 32
        kept = read_csv(root / "run/report/kept_per_layer.csv")
        doc = json.loads((root / "run/prune/mask.json").read_text())
        assert [int(r["kept"]) for r in kept] == [layer["kept"] for layer in doc["layers"]]
        loss = read_csv(root / "run/report/loss_curves.csv")
        np.testing.assert_allclose([float(r["crisp_term"]) for r in loss],
                                   [10.0 * float(r["loss_c"]) for r in loss])
        assert read_csv(root / "run/report/projection_curves.csv")

    def crafted(self, pipeline, tmp_path, z, mask):
        root, _ = pipeline
        shutil.copytree(root / "run/prune", tmp_path / "prune")
        ckpt = load_checkpoint(tmp_path / "prune/checkpoint.ckpt")
        ckpt.arrays["final.z"] = np.asarray(z, np.float32)
        ckpt.arrays["mask"] = np.asarray(mask, np.float32)
        save_checkpoint(ckpt, tmp_path / "prune/checkpoint.ckpt")
        return write_report(tmp_path)

    def test_crisp_masks_fill_end_bins(self, pipeline, tmp_path):
        z = np.random.default_rng(0).integers(0, 2, 32)
        counts = self.crafted(pipeline, tmp_path, z, z)["histogram"]
        assert counts[0] + counts[-1] == 32 and counts[0] == np.sum(z == 0)

    def test_all_ones_keeps_every_channel(self, pipeline, tmp_path):
        self.crafted(pipeline, tmp_path, np.ones(32), np.ones(32))
        kept = read_csv(tmp_path / "report/kept_per_layer.csv")
        assert all(r["kept"] == r["channels"] for r in kept)

    def test_missing_inputs(self, tmp_path, capsys):
        assert run("report", tmp_path) == 1
        err = capsys.readouterr().err
        assert "prune/checkpoint.ckpt" in err and "prune/epochs.csv" in err


class TestReproducibility:
    def test_manifest_rerun_identical_csv(self, pipeline, tmp_path):
        root, _ = pipeline
        again = tmp_path / "again"
        assert run("pretrain", "-c", root / "run/pretrain/manifest.json", "--set", f"run.output_dir={again}") == 0
        assert run("prune", "-c", root / "run/prune/manifest.json", "--set", f"run.output_dir={again}") == 0
        for name in ("pretrain/train_records.csv", "prune/epochs.csv"):
            assert (again / name).read_bytes() == (root / "run" / name).read_bytes()


class TestMaskTools:
    def test_export_matches_prune_output(self, pipeline, tmp_path):
        root, cfg = pipeline
        assert run("export-mask", "-c", cfg, "--out", tmp_path / "m.json") == 0
        assert json.loads((tmp_path / "m.json").read_text()) == json.loads((root / "run/prune/mask.json").read_text())

    def test_transfer_then_finetune(self, pipeline, tmp_path, capsys):
        root, _ = pipeline
        cfg = write_config(tmp_path / "c.yaml", tmp_path / "run", data={"classes": 3})
        assert run("transfer-mask", "-c", cfg, "--mask", root / "run/prune/mask.json") == 0
        assert "budget preserved: True" in capsys.readouterr().out
        host = json.loads((root / "run/prune/mask.json").read_text())["budgets"]
        target = {r["kind"]: float(r["target"]) for r in read_csv(tmp_path / "run/transfer/budgets.csv")}
        assert target == host
        assert run("finetune", "-c", cfg, "--from", tmp_path / "run/transfer/checkpoint.ckpt") == 0
        achieved = {r["kind"]: float(r["value"]) for r in read_csv(tmp_path / "run/finetune/budgets.csv")}
        assert achieved == host

    def test_transfer_rejects_other_widths(self, pipeline, tmp_path, capsys):
        root, _ = pipeline
        cfg = write_config(tmp_path / "c.yaml", tmp_path / "run", model={"widths": [8, 8, 8, 4]})
        assert run("transfer-mask", "-c", cfg, "--mask", root / "run/prune/mask.json") == 1
        assert "architectures differ" in capsys.readouterr().err


class TestAblationFlags:
    def test_flags_reach_prune_config(self, pipeline, tmp_path):
        root, cfg = pipeline
        assert run("prune", "-c", cfg, "--no-crispness", "--no-logistic-round", "--set", "prune.epochs=1",
                   "--set", f"run.output_dir={tmp_path}", "--from", root / "run/pretrain/checkpoint.ckpt") == 0
        manifest = json.loads((tmp_path / "prune/manifest.json").read_text())
        p = manifest["config"]["prune"]
        assert (p["crispness"], p["heaviside"], p["logistic_round"]) == (False, False, False)
        for r in read_csv(tmp_path / "prune/epochs.csv"):
            assert float(r["loss"]) == pytest.approx(float(r["loss_ce"]) + 30.0 * float(r["loss_b"]), rel=1e-6)


class TestGrid:
    def test_summary(self, pipeline, tmp_path):
        root, cfg = pipeline
        assert run("grid", "-c", cfg, "--set", f"run.output_dir={tmp_path}", "--set", "prune.epochs=2",
                   "--set", "grid.tuples=[[10, 30, 5, 2], [5, 15, 1, 1]]",
                   "--from", root / "run/pretrain/checkpoint.ckpt") == 0
        rows = read_csv(tmp_path / "grid/summary.csv")
        assert [(float(r["alpha1"]), int(r["beta_every"])) for r in rows] == [(10.0, 5), (5.0, 1)]
        assert (tmp_path / "grid/run_001/epochs.csv").is_file()

    def test_bad_tuple(self, pipeline, tmp_path):
        root, cfg = pipeline
        assert run("grid", "-c", cfg, "--set", f"run.output_dir={tmp_path}", "--set", "grid.tuples=[[1, 2]]",
                   "--from", root / "run/pretrain/checkpoint.ckpt") == 2
