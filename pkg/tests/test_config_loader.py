import pytest

from services.decomposition import DecompositionPlan
from storage.config_loader import load_model_config, parse_model_config, resolve_backbone_config
from utils.errors import ContractViolation, FormatError


class TestParse:
    def test_keys(self):
        data = parse_model_config('preset = "lsknet-s"\ndepths = [1, 1, 2, 1]\nplan = [[3, 1], [5, 2]]\n')
        assert data == {"preset": "lsknet-s", "depths": [1, 1, 2, 1], "plan": [[3, 1], [5, 2]]}

    def test_unknown_key(self):
        with pytest.raises(FormatError, match="widths"):
            parse_model_config("widths = [1, 2, 3, 4]\n")

    def test_invalid_toml(self):
        with pytest.raises(FormatError):
            parse_model_config("depths = [1, 2\n", source="broken.toml")


class TestResolve:
    def test_defaults_to_lsknet_t(self):
        assert resolve_backbone_config().to_dict() == resolve_backbone_config(preset="lsknet-t").to_dict()

    def test_overrides_apply_on_top_of_preset(self):
        cfg = resolve_backbone_config({"preset": "lsknet-s", "depths": [1, 1, 1, 1], "branch_divisor": 2})
        assert cfg.channels == (64, 128, 320, 512)
        assert cfg.depths == (1, 1, 1, 1)
        assert cfg.stage_lsk_config(0).width == 32

    def test_argument_preset_wins(self):
        cfg = resolve_backbone_config({"preset": "lsknet-s"}, preset="tiny")
        assert cfg.channels == (4, 4, 4, 4)

    def test_full_config_without_preset(self):
        cfg = resolve_backbone_config({"channels": [8, 8, 16, 16], "depths": [1, 1, 1, 1], "plan": [[3, 1], [5, 2]]})
        assert cfg.channels == (8, 8, 16, 16)
        assert cfg.plan == DecompositionPlan.of(((3, 1), (5, 2)))

    def test_unknown_preset(self):
        with pytest.raises(FormatError):
            resolve_backbone_config(preset="lsknet-xl")

    def test_illegal_values_are_contract_errors(self):
        with pytest.raises(ContractViolation):
            resolve_backbone_config({"plan": [[5, 1], [7, 9]]})


class TestLoad:
    def test_file(self, tmp_path):
        path = tmp_path / "model.toml"
        path.write_text('preset = "tiny"\nselection_mode = "channel"\n')
        cfg = load_model_config(str(path))
        assert cfg.channels == (4, 4, 4, 4) and cfg.selection_mode == "channel"

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_model_config(str(tmp_path / "absent.toml"))

    def test_no_file(self):
        assert load_model_config(preset="tiny").depths == (1, 1, 1, 1)
