import numpy as np
import pytest

from droopguard.feeder import load_feeder
from droopguard.scenario import (
    ConfigError,
    ScenarioConfig,
    attacked_curve,
    bundled_feeder_path,
    config_to_text,
    generate_scenario,
    load_config,
    preset_path,
    rng_for,
    STREAM_SCENARIO,
)


@pytest.fixture(scope="module")
def model():
    return load_feeder(bundled_feeder_path())


def gen(model, seed=42, **kw):
    cfg = ScenarioConfig(rng_seed=seed, **kw)
    return generate_scenario(cfg, model, rng_for(seed, STREAM_SCENARIO))


def test_same_seed_bit_identical(model):
    a = gen(model, seed=42)
    b = gen(model, seed=42)
    assert np.array_equal(a.load_profile, b.load_profile)
    assert np.array_equal(a.solar_profile, b.solar_profile)
    assert np.array_equal(a.compromised, b.compromised)
    assert (a.attack_start, a.attack_end) == (b.attack_start, b.attack_end)
    assert a.attacked_curve.eta == b.attacked_curve.eta


def test_different_seeds_differ(model):
    a = gen(model, seed=1)
    b = gen(model, seed=2)
    assert not np.array_equal(a.load_profile, b.load_profile)


def test_load_profile_bounds_and_smoothness(model):
    s = gen(model, seed=7)
    lp = s.load_profile
    assert lp.min() >= 0.7 and lp.max() <= 1.3
    assert np.abs(np.diff(lp, axis=0)).max() <= 0.05


def test_solar_profile_nonnegative_and_capped(model):
    s = gen(model, seed=3)
    assert (s.solar_profile >= 0.0).all()
    assert (s.solar_profile <= s.unit_s[None, :] + 1e-12).all()


def test_partition_disjoint_and_controllable(model):
    s = gen(model, seed=9)
    assert s.compromised.any()
    assert s.uncompromised.any()  # U nonempty
    assert not np.any(s.compromised & s.uncompromised)


def test_capacity_fraction_granularity(model):
    total = model.inverter_s.sum()
    biggest = model.inverter_s.max() / total
    for seed in range(25):
        s = gen(model, seed=seed, attack_fraction_range=(0.45, 0.45))
        assert s.capacity_fraction >= 0.45 - 1e-12
        assert s.capacity_fraction <= 0.45 + biggest + 1e-12


def test_fraction_sampled_in_range(model):
    fracs = [gen(model, seed=s).capacity_fraction for s in range(30)]
    biggest = model.inverter_s.max() / model.inverter_s.sum()
    assert min(fracs) >= 0.15
    assert max(fracs) <= 0.50 + biggest


def test_per_node_mode_exact_fraction(model):
    s = gen(model, seed=4, per_node=True, attack_fraction_range=(0.3, 0.3))
    assert s.capacity_fraction == pytest.approx(0.3)
    n = len(model.inverters)
    assert len(s.unit_s) == 2 * n
    comp_cap = s.unit_s[s.compromised].sum()
    assert comp_cap / s.unit_s.sum() == pytest.approx(0.3, rel=1e-9)


def test_day_positions(model):
    s9 = gen(model, seed=1, day_position="9am")
    mid = s9.day_start + 350
    assert np.sin(np.pi * mid / 43200) == pytest.approx(np.sin(np.pi * 3 / 12), rel=1e-6)
    sn = gen(model, seed=1, day_position="noon")
    assert np.sin(np.pi * (sn.day_start + 350) / 43200) == pytest.approx(1.0, abs=1e-6)


def test_random_day_position_in_production_window(model):
    for seed in range(20):
        s = gen(model, seed=seed)
        frac_start = s.day_start / 43200.0
        assert 1 / 6 - 1e-9 <= frac_start <= 5 / 6


def test_attack_window_random_bounds(model):
    for seed in range(20):
        s = gen(model, seed=seed)
        assert 100 <= s.attack_start <= 700 - 250
        assert s.attack_end == s.attack_start + 250


def test_attacked_curve_identity_when_zero():
    cfg = ScenarioConfig(attack_offset=0.0, attack_slope=0.0)
    out = attacked_curve(cfg.default_curve(), cfg)
    assert np.allclose(out.as_array(), cfg.default_curve().as_array(), atol=1e-15)


def test_attacked_curve_collapses_toward_relay():
    cfg = ScenarioConfig(attack_offset=0.01, attack_slope=0.06)
    e = attacked_curve(cfg.default_curve(), cfg).as_array()
    d = cfg.default_curve().as_array()
    mid = 0.5 * (d[1] + d[2]) + 0.01
    assert e[1] == pytest.approx(mid)  # deadband fully collapsed
    assert e[2] == pytest.approx(mid)
    assert e[1] - e[0] == pytest.approx(cfg.min_gap)
    assert e[3] - e[2] == pytest.approx(cfg.min_gap)
    assert e[4] == pytest.approx(d[4] + 0.01)


def test_invalid_configs_rejected():
    with pytest.raises(ConfigError):
        ScenarioConfig(attack_fraction_range=(0.5, 1.0))
    with pytest.raises(ConfigError):
        ScenarioConfig(agent_period=0)
    with pytest.raises(ConfigError):
        ScenarioConfig(attack_window="600,900")
    with pytest.raises(ConfigError):
        ScenarioConfig(action_bins=10)  # even grid cannot include 0
    with pytest.raises(ConfigError):
        ScenarioConfig(encoding="fancy")


def test_presets_load_and_roundtrip(tmp_path):
    for name in ("train_default", "eval_20pct_9am", "eval_45pct_noon", "eval_45pct_noact"):
        cfg = load_config(name)
        text = config_to_text(cfg)
        p = tmp_path / f"{name}.ini"
        p.write_text(text)
        again = load_config(p)
        assert again == cfg


def test_unknown_preset_and_fields(tmp_path):
    with pytest.raises(ConfigError):
        preset_path("no_such_preset")
    bad = tmp_path / "bad.ini"
    bad.write_text("[episode]\nepisode_len = 700\nwhatever = 3\n")
    with pytest.raises(ConfigError, match="episode.whatever"):
        load_config(bad)
    bad2 = tmp_path / "bad2.ini"
    bad2.write_text("[nosuch]\nx = 1\n")
    with pytest.raises(ConfigError, match="nosuch"):
        load_config(bad2)


def test_config_overrides():
    cfg = load_config("train_default", {"rng_seed": "123", "iterations": "5"})
    assert cfg.rng_seed == 123
    assert cfg.iterations == 5
