import json
import os

import pytest

from slidemil import cli
from slidemil.config import (PipelineConfig, config_hash, from_dict, load_config,
                             serialize, to_dict)
from slidemil.errors import ConfigurationError


class TestConfig:
    def test_empty_file_all_defaults(self, tmp_path):
        p = tmp_path / "empty.json"
        p.write_text("")
        cfg = load_config(p)
        assert cfg == PipelineConfig()

    def test_unknown_key_named(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"cohort": {"n_trian": 10}}))
        with pytest.raises(ConfigurationError, match="cohort.n_trian"):
            load_config(p)

    def test_unknown_top_level_key(self, tmp_path):
        p = tmp_path / "bad2.json"
        p.write_text(json.dumps({"sead": 3}))
        with pytest.raises(ConfigurationError, match="sead"):
            load_config(p)

    def test_parse_error_position(self, tmp_path):
        p = tmp_path / "syntax.json"
        p.write_text("{\n  \"seed\": oops\n}")
        with pytest.raises(ConfigurationError, match="line 2"):
            load_config(p)

    def test_roundtrip(self, tmp_path):
        cfg = PipelineConfig()
        cfg.seed = 99
        cfg.cohort.n_train = 12
        cfg.perturb.repeats = 2
        p = tmp_path / "cfg.json"
        p.write_text(serialize(cfg))
        back = load_config(p)
        assert back == cfg
        assert config_hash(back) == config_hash(cfg)

    def test_partial_override(self):
        cfg = from_dict({"seed": 5, "train": {"learning_rate": 0.01}})
        assert cfg.seed == 5
        assert cfg.train.learning_rate == 0.01
        assert cfg.train.weight_decay == PipelineConfig().train.weight_decay

    def test_to_dict_stable(self):
        d = to_dict(PipelineConfig())
        assert "cohort" in d and "n_train" in d["cohort"]


class TestCliContract:
    def test_unknown_subcommand_exit_1(self, capsys):
        assert cli.main(["frobnicate", "--out", "/tmp/x"]) == 1

    def test_no_args_exit_1(self):
        assert cli.main([]) == 1

    def test_help_exit_0(self):
        assert cli.main(["--help"]) == 0

    def test_existing_dir_without_force_exit_2(self, tmp_path, capsys):
        out = tmp_path / "run"
        out.mkdir()
        (out / "stale.txt").write_text("x")
        code = cli.main(["generate", "--out", str(out)])
        assert code == 2
        assert "force" in capsys.readouterr().err

    def test_show_config_defaults(self, capsys):
        assert cli.main(["show-config"]) == 0
        out = capsys.readouterr().out
        assert json.loads(out)["seed"] == 0

    def test_generate_small(self, tmp_path):
        cfg = {"cohort": {"n_train": 2, "n_test": 1, "grid_rows": 2, "grid_cols": 2}}
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        out = tmp_path / "cohort"
        code = cli.main(["generate", "--config", str(cfg_path), "--out", str(out)])
        assert code == 0
        manifest = out / "manifest.jsonl"
        assert manifest.exists()
        assert len(manifest.read_text().splitlines()) == 3

    def test_bad_config_exit_1(self, tmp_path, capsys):
        cfg_path = tmp_path / "bad.json"
        cfg_path.write_text(json.dumps({"nope": 1}))
        out = tmp_path / "run"
        code = cli.main(["generate", "--config", str(cfg_path), "--out", str(out)])
        assert code == 1
        assert "nope" in capsys.readouterr().err
