import math

import pytest

from gpsdf.config import Config
from gpsdf.errors import ConfigError


class TestDefaults:
    def test_values(self):
        c = Config().validate()
        assert c.octree.resolution == 0.08
        assert c.bhm.hinges_per_axis == 7
        assert c.gp.rate == 500.0
        assert (c.scheduler.budget_march, c.scheduler.budget_buffer, c.scheduler.budget_train) == (8, 8, 4)

    def test_derived(self):
        c = Config()
        assert c.kernel_scale == pytest.approx(math.sqrt(1 / 1000))
        assert c.effective_alpha_softmin() == pytest.approx(1 / c.kernel_scale)
        assert c.effective_collection_margin() == pytest.approx(2 * c.kernel_scale)
        assert c.effective_free_spacing() == c.octree.resolution
        assert c.partition_edge == pytest.approx(0.16)
        # feature support: where a hinge's response falls to eps
        assert math.exp(-c.effective_sampling_margin() ** 2 / (2 * c.bhm.scale**2)) == pytest.approx(c.bhm.eps)

    def test_matern_scale(self):
        c = Config()
        c.gp.kernel, c.gp.rate = "matern32", 10.0
        assert c.kernel_scale == pytest.approx(math.sqrt(3) / 10)


class TestText:
    def test_round_trip(self):
        c = Config()
        c.octree.resolution = 0.05
        c.map.dim = 2
        c.gp.alpha_softmin = 12.5
        again = Config.from_text(c.to_text())
        assert again.to_dict() == c.to_dict()

    def test_auto_keyword(self):
        c = Config.from_text("[gp]\nalpha_softmin = auto\n[bhm]\nfree_spacing = 0.02\n")
        assert c.gp.alpha_softmin is None
        assert c.bhm.free_spacing == 0.02

    def test_inline_comment(self):
        assert Config.from_text("[octree]\nresolution = 0.1  # coarse\n").octree.resolution == 0.1

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match=r"unknown section \[planner\]"):
            Config.from_text("[planner]\nx = 1\n")

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key gp.sigma"):
            Config.from_text("[gp]\nsigma = 1\n")

    def test_bad_number(self):
        with pytest.raises(ConfigError, match="cannot parse"):
            Config.from_text("[octree]\nmax_depth = deep\n")

    def test_malformed(self):
        with pytest.raises(ConfigError):
            Config.from_text("resolution = 0.1\n")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read config"):
            Config.load(tmp_path / "nope.ini")

    def test_load(self, tmp_path):
        p = tmp_path / "c.ini"
        p.write_text("[map]\ndim = 2\n")
        assert Config.load(p).map.dim == 2


class TestValidation:
    @pytest.mark.parametrize("section,key,value", [
        ("octree", "resolution", 0.0),
        ("octree", "threads", 0),
        ("bhm", "alpha_lr", 0.0),
        ("bhm", "alpha_lr", 1.5),
        ("bhm", "eps", 1.0),
        ("gp", "kernel", "laplace"),
        ("gp", "jitter", 1e-3),
        ("scheduler", "budget_train", -1),
        ("map", "dim", 4),
        ("sensor", "noise_k", -0.1),
    ])
    def test_rejects(self, section, key, value):
        c = Config()
        setattr(getattr(c, section), key, value)
        with pytest.raises(ConfigError, match=f"{section}"):
            c.validate()

    def test_from_dict(self):
        d = Config().to_dict()
        d["map"]["dim"] = 2
        assert Config.from_dict(d).map.dim == 2
        with pytest.raises(ConfigError):
            Config.from_dict({"extra": {}})
