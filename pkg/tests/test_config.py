"""Config resolution: defaults, profiles, file values, flag overrides."""

import pytest
import yaml

from windndp.config import (
    ExperimentConfig,
    apply_overrides,
    load_config,
    resolve_config,
)
from windndp.errors import ConfigurationError


class TestDefaults:
    def test_training_defaults(self):
        cfg = ExperimentConfig()
        assert cfg.train.epochs == 250
        assert cfg.train.samples_per_epoch == 100
        assert cfg.train.batch_size == 32
        assert cfg.train.ema_decay == 0.995
        assert cfg.train.context_max == 50
        assert (cfg.train.warmup_start, cfg.train.base_lr, cfg.train.final_lr) == (
            2e-5, 1e-3, 1e-5,
        )
        assert cfg.train.n_functions == 500

    def test_model_defaults(self):
        cfg = ExperimentConfig()
        assert (cfg.model.width, cfg.model.layers, cfg.model.heads) == (64, 4, 8)
        assert cfg.model.encoder_output == 8
        assert cfg.model.schedule_config() == {"kind": "cosine", "total_steps": 500, "s": 0.008}

    def test_eval_defaults(self):
        cfg = ExperimentConfig()
        assert cfg.eval.context_sizes == (0, 25, 50)
        assert cfg.eval.n_test == 30
        assert cfg.eval.n_points == 100
        assert cfg.eval.buckets == ((0, 4), (23, 27), (46, 50))


class TestProfiles:
    def test_quick_profile(self):
        cfg = resolve_config(profile="quick")
        assert cfg.model.total_steps == 200
        assert cfg.train.epochs == 150
        assert cfg.eval.n_trajectories == 64
        # untouched keys keep their defaults
        assert cfg.model.width == 64 and cfg.train.batch_size == 32

    def test_smoke_profile_is_tiny(self):
        cfg = resolve_config(profile="smoke")
        assert cfg.model.total_steps == 8 and cfg.train.epochs == 2
        assert cfg.eval.context_sizes == (0, 4)

    def test_unknown_profile(self):
        with pytest.raises(ConfigurationError, match="profile"):
            resolve_config(profile="turbo")

    def test_profile_from_tree(self):
        cfg = resolve_config({"profile": "quick"})
        assert cfg.profile == "quick" and cfg.model.total_steps == 200


class TestPrecedence:
    def test_file_beats_profile_flags_beat_file(self):
        tree = {"profile": "quick", "model": {"total_steps": 123}, "train": {"epochs": 7}}
        cfg = resolve_config(tree)
        assert cfg.model.total_steps == 123 and cfg.train.epochs == 7
        cfg = resolve_config(tree, overrides={"model.total_steps": "99"})
        assert cfg.model.total_steps == 99

    def test_load_from_yaml(self, tmp_path):
        path = tmp_path / "exp.yaml"
        path.write_text(
            yaml.safe_dump(
                {
                    "name": "offsets",
                    "data": {"offsets": [-1.0, 0.0, 1.0], "source": "synthetic"},
                    "model": {"kind": "mt-ndp"},
                    "eval": {"context_sizes": [0, 10]},
                }
            )
        )
        cfg = load_config(path)
        assert cfg.name == "offsets"
        assert cfg.data.offsets == (-1.0, 0.0, 1.0)
        assert cfg.model.kind == "mt-ndp"
        assert cfg.eval.context_sizes == (0, 10)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError, match="exist"):
            load_config(tmp_path / "nope.yaml")

    def test_non_mapping_file(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigurationError, match="mapping"):
            load_config(path)

    def test_resolved_roundtrip(self, tmp_path):
        cfg = resolve_config({"profile": "quick", "train": {"seed": 17}})
        saved = cfg.save(tmp_path / "resolved.yaml")
        again = load_config(saved)
        assert again.to_dict() == cfg.to_dict()


class TestOverrides:
    def test_string_coercion(self):
        cfg = ExperimentConfig()
        apply_overrides(
            cfg,
            {
                "train.epochs": "42",
                "train.base_lr": "5e-4",
                "eval.context_sizes": "0,5,10",
                "model.gp_include_noise": "false",
                "model.embed_dim": "32",
            },
        )
        assert cfg.train.epochs == 42
        assert cfg.train.base_lr == 5e-4
        assert cfg.eval.context_sizes == (0, 5, 10)
        assert cfg.model.gp_include_noise is False
        assert cfg.model.embed_dim == 32

    def test_unknown_key_rejected(self):
        cfg = ExperimentConfig()
        with pytest.raises(ConfigurationError, match="unknown config key"):
            apply_overrides(cfg, {"train.momentum": 0.9})
        with pytest.raises(ConfigurationError, match="section"):
            apply_overrides(cfg, {"optimizer.lr": 0.1})

    def test_section_not_assignable(self):
        cfg = ExperimentConfig()
        with pytest.raises(ConfigurationError, match="section"):
            apply_overrides(cfg, {"train": {}})


class TestValidation:
    def test_bad_values(self):
        with pytest.raises(ConfigurationError, match="source"):
            resolve_config({"data": {"source": "csvfiles"}})
        with pytest.raises(ConfigurationError, match="kind"):
            resolve_config({"model": {"kind": "transformer"}})
        with pytest.raises(ConfigurationError, match="feature"):
            resolve_config({"data": {"feature_set": "F2"}})
        with pytest.raises(ConfigurationError, match="epochs"):
            resolve_config({"train": {"epochs": 0}})
        with pytest.raises(ConfigurationError, match="trajectories"):
            resolve_config({"eval": {"n_trajectories": 1}})
