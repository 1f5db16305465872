import json

import numpy as np
import pytest

from protomatch import cli
from protomatch import datamodel as dm


def write_config(path, text):
    path.write_text(text)
    return str(path)


BASE_CONFIG = """
[dataset]
source = synth

[synth]
n_subjects = 3
trials_per_subject = 6
segments_per_trial = 4
n_classes = 3
feature_dim = 5
seed = 1

[train]
max_epoch = 3
steps_per_epoch = 2
batch_s = 8
batch_u = 8
batch_t = 8
hidden_widths = 8,6
disc_hidden = 6
n_labeled_trials = 3
mmd_cap = 32
seed = 0
"""


class TestConfigParsing:
    def test_defaults_and_overrides(self, tmp_path):
        cfg = cli.parse_config(write_config(tmp_path / "c.cfg", BASE_CONFIG))
        assert cfg.train.max_epoch == 3
        assert cfg.train.hidden_widths == (8, 6)
        assert cfg.train.learning_rate == 1e-3  # untouched default
        assert cfg.synth.n_subjects == 3
        assert cfg.source == "synth"

    def test_unknown_key_lists_valid_ones(self, tmp_path):
        bad = BASE_CONFIG.replace("seed = 1", "alpha_beta = 1")
        with pytest.raises(cli.ConfigError, match="alpha_beta"):
            cli.parse_config(write_config(tmp_path / "c.cfg", bad))
        try:
            cli.parse_config(write_config(tmp_path / "c2.cfg", bad))
        except cli.ConfigError as exc:
            assert "valid keys" in str(exc)

    def test_file_source_requires_path(self, tmp_path):
        text = "[dataset]\nsource = file\n"
        with pytest.raises(cli.ConfigError, match="path"):
            cli.parse_config(write_config(tmp_path / "c.cfg", text))

    def test_effective_config_round_trips(self, tmp_path):
        cfg = cli.parse_config(write_config(tmp_path / "c.cfg", BASE_CONFIG))
        echo = tmp_path / "effective.cfg"
        cli.write_effective_config(cfg, echo)
        back = cli.parse_config(str(echo))
        assert back.train == cfg.train
        assert back.synth == cfg.synth
        assert back.source == cfg.source


class TestSynthCommand:
    def test_writes_expected_row_count(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path / "c.cfg", BASE_CONFIG)
        out_csv = tmp_path / "data.csv"
        rc = cli.main(["synth", "--config", cfg_path, "--out", str(out_csv)])
        assert rc == 0
        ds = dm.load_dataset(out_csv)
        assert len(ds.segments) == 3 * 6 * 4
        assert "per-class counts" in capsys.readouterr().out

    def test_same_seed_same_bytes(self, tmp_path):
        cfg_path = write_config(tmp_path / "c.cfg", BASE_CONFIG)
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        cli.main(["synth", "--config", cfg_path, "--out", str(a)])
        cli.main(["synth", "--config", cfg_path, "--out", str(b)])
        assert a.read_bytes() == b.read_bytes()

    def test_unknown_synth_key_fails(self, tmp_path, capsys):
        bad = BASE_CONFIG.replace("seed = 1", "alpha_beta = 1")
        rc = cli.main(["synth", "--config", write_config(tmp_path / "c.cfg", bad),
                       "--out", str(tmp_path / "x.csv")])
        assert rc == 2
        assert "alpha_beta" in capsys.readouterr().err


class TestTrainCommand:
    def test_loso_run_produces_fold_dirs_and_summary(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path / "c.cfg", BASE_CONFIG)
        out = tmp_path / "run"
        rc = cli.main(["train", "--config", cfg_path, "--out", str(out)])
        assert rc == 0
        assert (out / "summary.txt").exists()
        assert (out / "summary.json").exists()
        assert (out / "effective.cfg").exists()
        fold_dirs = sorted(p.name for p in out.iterdir() if p.is_dir())
        assert fold_dirs == ["fold_01", "fold_02", "fold_03"]
        assert "mean" in capsys.readouterr().out

    def test_single_fold_mode(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path / "c.cfg", BASE_CONFIG)
        out = tmp_path / "run"
        rc = cli.main(["train", "--config", cfg_path, "--out", str(out),
                       "--target-subject", "2"])
        assert rc == 0
        assert (out / "fold_02" / "checkpoint.txt").exists()
        assert "target_subject 2" in capsys.readouterr().out

    def test_ablation_flag_reaches_config(self, tmp_path):
        cfg_path = write_config(tmp_path / "c.cfg", BASE_CONFIG)
        out = tmp_path / "run"
        rc = cli.main(["train", "--config", cfg_path, "--out", str(out),
                       "--ablation", "no_unlabeled_source"])
        assert rc == 0
        echoed = (out / "effective.cfg").read_text()
        assert "ablations = no_unlabeled_source" in echoed

    def test_dataset_file_source(self, tmp_path):
        cfg_path = write_config(tmp_path / "c.cfg", BASE_CONFIG)
        csv = tmp_path / "data.csv"
        cli.main(["synth", "--config", cfg_path, "--out", str(csv)])
        file_cfg = BASE_CONFIG.replace(
            "[dataset]\nsource = synth", f"[dataset]\nsource = file\npath = {csv}"
        )
        out = tmp_path / "run2"
        rc = cli.main(["train", "--config",
                       write_config(tmp_path / "c2.cfg", file_cfg),
                       "--out", str(out)])
        assert rc == 0

    def test_split_target_flag(self, tmp_path):
        cfg_path = write_config(tmp_path / "c.cfg", BASE_CONFIG)
        out = tmp_path / "run"
        rc = cli.main(["train", "--config", cfg_path, "--out", str(out),
                       "--target-subject", "1", "--split-target-k", "2"])
        assert rc == 0
        echoed = (out / "effective.cfg").read_text()
        assert "protocol = split_target" in echoed
        assert "split_k = 2" in echoed


class TestGradcheckCommand:
    def test_stock_build_exits_zero(self, capsys):
        rc = cli.main(["gradcheck", "--seeds", "1"])
        out = capsys.readouterr().out
        assert rc == 0
        assert "PASS" in out
        assert "bilinear.B" in out

    def test_fault_injection_exits_nonzero(self, capsys):
        rc = cli.main(["gradcheck", "--seeds", "1", "--inject-fault"])
        assert rc == 1
        assert "FAIL" in capsys.readouterr().out


class TestReportCommand:
    def run_small(self, tmp_path, name, ablation=None):
        cfg_path = write_config(tmp_path / f"{name}.cfg", BASE_CONFIG)
        out = tmp_path / name
        argv = ["train", "--config", cfg_path, "--out", str(out)]
        if ablation:
            argv += ["--ablation", ablation]
        assert cli.main(argv) == 0
        return str(out)

    def test_single_run_summary_matches_trainer(self, tmp_path, capsys):
        run = self.run_small(tmp_path, "base")
        capsys.readouterr()
        rc = cli.main(["report", run])
        out = capsys.readouterr().out
        assert rc == 0
        summary = json.loads((tmp_path / "base" / "summary.json").read_text())
        want = f"{100 * summary['mean']:05.2f}+-{100 * summary['std']:05.2f}"
        assert want in out
        assert "weighted divergence" in out

    def test_two_runs_print_delta(self, tmp_path, capsys):
        a = self.run_small(tmp_path, "full")
        b = self.run_small(tmp_path, "ablated", ablation="no_unlabeled_source")
        capsys.readouterr()
        rc = cli.main(["report", a, b])
        out = capsys.readouterr().out
        assert rc == 0
        assert "delta" in out
        assert "accuracy points" in out

    def test_malformed_json_cites_line(self, tmp_path, capsys):
        run = self.run_small(tmp_path, "broken")
        metrics = next((tmp_path / "broken").glob("fold_*/metrics.jsonl"))
        lines = metrics.read_text().splitlines()
        lines[1] = "{not json"
        metrics.write_text("\n".join(lines) + "\n")
        rc = cli.main(["report", run])
        assert rc == 2
        assert "line 2" in capsys.readouterr().err
