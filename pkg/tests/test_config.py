import pytest

from rcs.config import (
    ConfigError,
    ExperimentConfig,
    config_from_mapping,
    load_config,
    parse_config_text,
    resolved_text,
)


class TestDefaults:
    def test_reference_hyperparameters(self):
        cfg = ExperimentConfig()
        assert cfg.train_batch_size == 512
        assert cfg.selection_lr == 0.01
        assert cfg.selection_steps == 3
        assert cfg.train_warmup_fraction == 0.1
        assert cfg.train_interval == 20
        assert cfg.attack_eps == 8 / 255
        assert cfg.attack_rho == 2 / 255
        assert cfg.attack_steps == 5
        assert cfg.train_temperature == 0.1
        assert cfg.dynacl_period == 50
        assert cfg.dynacl_rate == 2 / 3
        assert cfg.trades_c == 6.0
        assert cfg.rd_distance == "kl"
        assert cfg.validation_fraction == 0.05

    def test_warmup_fraction_resolution(self):
        cfg = ExperimentConfig(train_epochs=1000)
        assert cfg.warmup_epochs() == 100
        cfg = ExperimentConfig(train_epochs=60, train_warmup_epochs=6)
        assert cfg.warmup_epochs() == 6

    def test_selection_attack_scales_step(self):
        cfg = ExperimentConfig()
        atk = cfg.selection_attack()
        assert atk.steps == 3
        assert atk.eps == cfg.attack_eps  # same budget, reduced steps
        assert atk.step_size == pytest.approx((2 / 255) * 5 / 3)

    def test_seed_derivation(self):
        cfg = ExperimentConfig(seed=42)
        assert cfg.resolved_dataset_seed() == 42
        assert cfg.resolved_model_seed() == 42
        cfg = ExperimentConfig(seed=42, dataset_seed=7, model_seed=9)
        assert cfg.resolved_dataset_seed() == 7
        assert cfg.resolved_model_seed() == 9


class TestParsing:
    def test_basic_parse(self):
        text = "seed = 3\n# comment line\ntrain.epochs = 12  # trailing comment\n"
        mapping = parse_config_text(text)
        assert mapping == {"seed": "3", "train.epochs": "12"}
        cfg = config_from_mapping(mapping)
        assert cfg.seed == 3 and cfg.train_epochs == 12

    def test_unknown_key_lists_valid_keys(self):
        with pytest.raises(ConfigError, match="unknown config key 'train.epoch'"):
            config_from_mapping({"train.epoch": "5"})
        with pytest.raises(ConfigError, match="train.epochs"):
            config_from_mapping({"train.epoch": "5"})

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="train.epochs"):
            config_from_mapping({"train.epochs": "twelve"})

    def test_bad_line(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_config_text("seed = 1\nnonsense\n")

    def test_duplicate_key(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config_text("seed = 1\nseed = 2\n")

    def test_hidden_list(self):
        cfg = config_from_mapping({"model.hidden": "32,16"})
        assert cfg.model_hidden == (32, 16)

    def test_booleans(self):
        assert config_from_mapping({"selection.last_layer": "true"}).selection_last_layer
        assert not config_from_mapping({"selection.last_layer": "false"}).selection_last_layer
        with pytest.raises(ConfigError):
            config_from_mapping({"selection.last_layer": "maybe"})

    def test_clamp_interval(self):
        cfg = config_from_mapping({"attack.clamp": "0,1"})
        assert cfg.clamp_interval() == (0.0, 1.0)
        assert ExperimentConfig().clamp_interval() is None

    def test_load_with_overrides(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("seed = 1\ntrain.epochs = 4\n")
        cfg = load_config(path, overrides={"seed": "9"})
        assert cfg.seed == 9 and cfg.train_epochs == 4


class TestValidation:
    def test_objective_checked(self):
        with pytest.raises(ConfigError, match="objective"):
            config_from_mapping({"train.objective": "simclr"})

    def test_fraction_checked(self):
        with pytest.raises(ConfigError, match="fraction"):
            config_from_mapping({"train.fraction": "0"})

    def test_supervised_needs_matching_head(self):
        with pytest.raises(ConfigError, match="projection_dim"):
            config_from_mapping(
                {"train.objective": "sat", "dataset.classes": "4", "model.projection_dim": "8"}
            )

    def test_nested_config_validation_runs(self):
        with pytest.raises(ConfigError, match="distance"):
            config_from_mapping({"rd.distance": "ot"})


class TestEcho:
    def test_resolved_text_round_trips(self):
        cfg = config_from_mapping({"seed": "3", "train.fraction": "0.2", "model.hidden": "8,4"})
        text = resolved_text(cfg)
        again = config_from_mapping(parse_config_text(text))
        assert again == cfg
        assert resolved_text(again) == text

    def test_resolved_text_is_sorted_and_complete(self):
        lines = resolved_text(ExperimentConfig()).strip().split("\n")
        assert lines == sorted(lines)
        assert "attack.eps = 0.03137254901960784" in lines
        assert "dynacl.rate = 0.6666666666666666" in lines
