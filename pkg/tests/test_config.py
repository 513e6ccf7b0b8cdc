import pytest

from raysplat.config import (
    ConfigError,
    RunConfig,
    config_to_text,
    load_run_config,
    parse_config_text,
)


class TestParsing:
    def test_defaults(self):
        cfg = load_run_config()
        assert cfg.dataset == "synthetic:corridor"
        assert cfg.worker_count == 1
        assert cfg.tracker.scale_mode == "ellipse"
        assert cfg.mapper.rho == 0.8

    def test_file_with_comments(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text(
            "# a comment\n"
            "\n"
            "dataset = synthetic:desk\n"
            "seed=7\n"
            "mapper.mapping_iters = 33\n"
            "tracker.scale_mode=plane\n"
        )
        cfg = load_run_config(path)
        assert cfg.dataset == "synthetic:desk"
        assert cfg.seed == 7
        assert cfg.mapper.mapping_iters == 33
        assert cfg.tracker.scale_mode == "plane"

    def test_malformed_line_reports_location(self):
        with pytest.raises(ConfigError, match=":2"):
            parse_config_text("seed=1\nnot a pair\n", source="x")

    def test_last_assignment_wins(self):
        items = parse_config_text("seed=1\nseed=2\n")
        assert items == {"seed": "2"}

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_run_config(tmp_path / "absent.txt")


class TestPrecedence:
    def test_set_beats_flags_beats_file(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text("seed=1\nworker_count=1\n")
        cfg = load_run_config(path, overrides=["seed=3"], seed=2, worker_count=4)
        assert cfg.seed == 3
        assert cfg.worker_count == 4

    def test_none_flags_ignored(self):
        cfg = load_run_config(seed=None, output_dir=None)
        assert cfg.seed == 0

    def test_bad_override_syntax(self):
        with pytest.raises(ConfigError, match="key=value"):
            load_run_config(overrides=["seed:3"])


class TestCoercion:
    def test_bool_words(self):
        for word, expect in [("true", True), ("FALSE", False), ("1", True), ("off", False)]:
            cfg = load_run_config(overrides=[f"mapper.offset_frozen={word}"])
            assert cfg.mapper.offset_frozen is expect

    def test_bad_bool(self):
        with pytest.raises(ConfigError, match="offset_frozen"):
            load_run_config(overrides=["mapper.offset_frozen=maybe"])

    def test_bad_int(self):
        with pytest.raises(ConfigError, match="seed"):
            load_run_config(overrides=["seed=2.5"])

    def test_float_accepts_int_literal(self):
        cfg = load_run_config(overrides=["mapper.lr_color=1"])
        assert cfg.mapper.lr_color == 1.0

    def test_unknown_top_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            load_run_config(overrides=["bogus=1"])

    def test_unknown_nested_key(self):
        with pytest.raises(ConfigError, match="tracker.bogus"):
            load_run_config(overrides=["tracker.bogus=1"])

    def test_nested_validation_propagates(self):
        with pytest.raises(ConfigError, match="scale_mode"):
            load_run_config(overrides=["tracker.scale_mode=wild"])


class TestValidation:
    def test_unknown_dataset_kind(self):
        with pytest.raises(ConfigError, match="dataset"):
            load_run_config(overrides=["dataset=webcam"])

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="preset"):
            load_run_config(overrides=["dataset=synthetic:castle"])

    def test_generic_requires_root(self):
        with pytest.raises(ConfigError, match="dataset_root"):
            load_run_config(overrides=["dataset=generic"])

    def test_root_must_exist(self, tmp_path):
        with pytest.raises(ConfigError, match="does not exist"):
            load_run_config(
                overrides=["dataset=generic", f"dataset_root={tmp_path / 'gone'}"]
            )

    def test_root_accepted_when_present(self, tmp_path):
        cfg = load_run_config(overrides=["dataset=generic", f"dataset_root={tmp_path}"])
        assert cfg.dataset_root == str(tmp_path)

    def test_worker_count_positive(self):
        with pytest.raises(ConfigError, match="worker_count"):
            load_run_config(overrides=["worker_count=0"])

    def test_negative_max_frames(self):
        with pytest.raises(ConfigError, match="max_frames"):
            load_run_config(overrides=["max_frames=-1"])


class TestRoundTrip:
    def test_text_round_trip_exact(self):
        cfg = load_run_config(
            overrides=[
                "dataset=synthetic:flat",
                "seed=11",
                "mapper.lr_color=0.0125",
                "mapper.offset_frozen=true",
                "tracker.metric_mode=point2point",
                "tracker.convergence_eps=3e-7",
            ]
        )
        text = config_to_text(cfg)
        again = load_run_config(
            overrides=[f"{k}={v}" for k, v in parse_config_text(text).items()]
        )
        assert again == cfg

    def test_every_field_serialized(self):
        text = config_to_text(RunConfig())
        for name in ("dataset", "seed", "tracker.scale_mode", "mapper.rho", "mapper.adam_eps"):
            assert any(line.startswith(name + "=") for line in text.splitlines())
