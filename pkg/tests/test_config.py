import pytest

import unisal.config as C
from unisal.model import ModelConfig


class TestParsing:
    def test_empty_text_is_all_defaults(self):
        assert C.parse_config_text("") == C.DEFAULTS
        assert C.load_config(None) == C.DEFAULTS

    def test_values_comments_and_blanks(self):
        cfg = C.parse_config_text("""
            # a comment
            train.epochs = 3
            model.profile=full      # trailing comment
            train.freeze_encoder_bn = yes
            train.base_lr = 1e-2
        """)
        assert cfg["train.epochs"] == 3
        assert cfg["model.profile"] == "full"
        assert cfg["train.freeze_encoder_bn"] is True
        assert cfg["train.base_lr"] == 0.01

    def test_unknown_key_rejected(self):
        with pytest.raises(C.ConfigError, match="unknown key"):
            C.parse_config_text("train.lr = 0.1")

    def test_bad_value_types(self):
        with pytest.raises(C.ConfigError, match="integer"):
            C.parse_config_text("train.epochs = soon")
        with pytest.raises(C.ConfigError, match="boolean"):
            C.parse_config_text("model.shared_domain_params = maybe")
        with pytest.raises(C.ConfigError, match="number"):
            C.parse_config_text("train.base_lr = fast")

    def test_line_without_equals(self):
        with pytest.raises(C.ConfigError, match="key = value"):
            C.parse_config_text("just words")

    def test_effective_text_round_trips(self):
        cfg = C.apply_overrides(dict(C.DEFAULTS),
                                {"train.epochs": 5,
                                 "model.prior_gamma": "7.5",
                                 "train.freeze_encoder_bn": True})
        text = C.effective_text(cfg)
        assert C.parse_config_text(text) == cfg
        assert "train.epochs = 5" in text
        assert "train.freeze_encoder_bn = true" in text

    def test_override_unknown_key(self):
        with pytest.raises(C.ConfigError, match="unknown key"):
            C.apply_overrides(dict(C.DEFAULTS), {"train.speed": "11"})


class TestDomainSpecs:
    def test_single_spec(self):
        name, modality, hw, fps, root = C.parse_domain_spec(
            "vids:dynamic:24x32:30:/data/vids")
        assert (name, modality, hw, fps, root) == \
            ("vids", "dynamic", (24, 32), 30, "/data/vids")

    def test_root_may_contain_colons(self):
        *_, root = C.parse_domain_spec("a:static:24x32:0:/odd:path")
        assert root == "/odd:path"

    def test_rootless_spec(self):
        *_, root = C.parse_domain_spec("a:static:24x32:0")
        assert root == ""

    def test_malformed_specs(self):
        with pytest.raises(C.ConfigError, match="name:modality"):
            C.parse_domain_spec("a:static:24x32")
        with pytest.raises(C.ConfigError, match="HxW"):
            C.parse_domain_spec("a:static:24-32:0")
        with pytest.raises(C.ConfigError, match="resolution or fps"):
            C.parse_domain_spec("a:static:24xbig:0")

    def test_build_registry(self):
        cfg = C.apply_overrides(
            dict(C.DEFAULTS),
            {"data.domains":
             "pics:static:24x32:0:/p,vids:dynamic:24x32:30:/v"})
        reg, roots = C.build_registry(cfg)
        assert reg.names == ["pics", "vids"]
        assert roots == {"pics": "/p", "vids": "/v"}
        assert reg["vids"].native_fps == 30

    def test_empty_domains_rejected(self):
        with pytest.raises(C.ConfigError, match="data.domains"):
            C.build_registry(dict(C.DEFAULTS))

    def test_modality_error_becomes_config_error(self):
        cfg = C.apply_overrides(dict(C.DEFAULTS),
                                {"data.domains": "a:sideways:24x32:0"})
        with pytest.raises(C.ConfigError):
            C.build_registry(cfg)


class TestBuilders:
    def test_desk_profile_default_width(self):
        mc = C.build_model_config(dict(C.DEFAULTS))
        assert mc.width_multiplier == 0.125
        assert mc.stem == ModelConfig.desk().stem

    def test_full_profile(self):
        cfg = C.apply_overrides(dict(C.DEFAULTS),
                                {"model.profile": "full"})
        mc = C.build_model_config(cfg)
        assert mc.width_multiplier == 1.0
        assert mc.encoder_out == 1280

    def test_width_override(self):
        cfg = C.apply_overrides(dict(C.DEFAULTS),
                                {"model.width_multiplier": "0.25"})
        assert C.build_model_config(cfg).width_multiplier == 0.25

    def test_bad_profile(self):
        cfg = C.apply_overrides(dict(C.DEFAULTS),
                                {"model.profile": "pocket"})
        with pytest.raises(C.ConfigError, match="desk or full"):
            C.build_model_config(cfg)

    def test_model_knobs_carried_over(self):
        cfg = C.apply_overrides(dict(C.DEFAULTS),
                                {"model.n_prior_maps": "8",
                                 "model.shared_domain_params": "true"})
        mc = C.build_model_config(cfg)
        assert mc.n_prior_maps == 8
        assert mc.shared_domain_params

    def test_policy_and_optimizer(self):
        cfg = C.apply_overrides(dict(C.DEFAULTS),
                                {"train.epochs": "4",
                                 "train.base_lr": "0.02",
                                 "train.patience": "2"})
        pol = C.build_policy(cfg)
        opt = C.build_optimizer(cfg)
        assert pol.total_epochs == 4
        assert pol.patience == 2
        assert opt.base_lr == 0.02
        assert opt.decay == 0.8

    def test_policy_validation_is_config_error(self):
        cfg = C.apply_overrides(dict(C.DEFAULTS), {"train.epochs": "0"})
        with pytest.raises(C.ConfigError):
            C.build_policy(cfg)

    def test_negative_loss_weight_is_config_error(self):
        cfg = C.apply_overrides(dict(C.DEFAULTS),
                                {"train.beta_cc": "-0.5"})
        with pytest.raises(C.ConfigError):
            C.build_loss_weights(cfg)
