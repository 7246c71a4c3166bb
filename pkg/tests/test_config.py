import numpy as np
import pytest

from myoscan.config import ConfigError, default_config, load_config, parse_config


class TestParsing:
    def test_defaults_validate(self):
        cfg = load_config()
        assert cfg["cae"]["d"] == 512
        assert cfg["clustering"]["k"] == "auto"
        assert len(cfg.c_grid()) == 11 and len(cfg.gamma_grid()) == 11

    def test_overrides_and_types(self):
        cfg = parse_config("[phantom]\ndims = 64, 64, 48\n[cv]\nsensitivities = 0.6 0.9\n[clustering]\nk = 10\n")
        assert cfg["phantom"]["dims"] == (64, 64, 48)
        assert cfg["cv"]["sensitivities"] == (0.6, 0.9)
        assert cfg["clustering"]["k"] == 10

    @pytest.mark.parametrize("text", [
        "[nonsense]\na = 1\n",
        "[cae]\nwidth = 3\n",
        "[cae]\nd = 100\n",
        "[clustering]\nk = 7\n",
        "[cv]\ncutoff = 0.5\n",
        "[sweep]\nk_values = 1 3\n",
        "[cv]\nmode = median\n",
        "[cae]\nepochs = lots\n",
        "[svm]\nc_exponents = 3 -3\n",
        "no section header\n",
    ])
    def test_rejected(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.ini")


class TestSeedsAndHash:
    def test_hash_is_stable_and_sensitive(self):
        a, b = default_config(), parse_config("")
        assert a.hash() == b.hash()
        assert a.hash() != a.with_seed(1).hash()
        assert parse_config("[cv]\nrepeats = 3\n").hash() != a.hash()

    def test_hash_independent_of_spelling(self):
        assert parse_config("[phantom]\ndims = 96 96 48\n").hash() == parse_config("[phantom]\ndims=96,96,48\n").hash()

    def test_substreams_named_and_reproducible(self):
        cfg = default_config()
        assert cfg.stage_seed("cv") == cfg.stage_seed("cv")
        assert cfg.stage_seed("cv") != cfg.stage_seed("cae_train")
        assert cfg.stage_seed("cv") != cfg.with_seed(1).stage_seed("cv")
        a = np.random.default_rng(cfg.substream("phantoms")).random(3)
        b = np.random.default_rng(cfg.substream("phantoms")).random(3)
        np.testing.assert_array_equal(a, b)

    def test_with_seed_leaves_original(self):
        cfg = default_config()
        cfg.with_seed(9)
        assert cfg.seed == 0
