import random

import numpy as np
import pytest

from sdpd.errors import ValidationError
from sdpd.simulate import (
    DGPConfig,
    _summarize,
    country_blocks,
    dgp_weights,
    monte_carlo,
    simulate,
    synthetic_grid,
)


def test_first_step_closed_form():
    # W iota = iota so y_1 = (phi + gamma) / (1 - rho) * y_0
    cfg = DGPConfig(n=16, T=1, burn_in=0, rho=0.5, phi=0.2, gamma=0.05, beta=(0.0,), sigma=0.0,
                    fe_individual_scale=0.0, fe_time_scale=0.0, y0=1.0)
    p = simulate(cfg)
    assert np.abs(p.y[:, 0] - 0.5).max() <= 1e-14


def test_same_seed_bit_identical():
    cfg = DGPConfig(n=25, T=8, seed=42)
    a, b = simulate(cfg), simulate(cfg)
    assert np.array_equal(a.y, b.y)
    assert all(np.array_equal(a.X[k], b.X[k]) for k in a.X)
    assert not np.array_equal(a.y, simulate(cfg.replace(seed=43)).y)


def test_config_validation():
    with pytest.raises(ValidationError, match="stable regime"):
        DGPConfig(rho=0.5, phi=0.4, gamma=0.2)
    with pytest.raises(ValidationError, match="cointegrated"):
        DGPConfig(rho=0.5, phi=0.2, gamma=0.1, regime="cointegrated")
    DGPConfig(rho=0.5, phi=0.3, gamma=0.2, regime="cointegrated")
    with pytest.raises(ValidationError, match="burn_in"):
        DGPConfig(burn_in=-1)
    with pytest.raises(ValidationError, match="sigma"):
        DGPConfig(sigma=-0.1)
    with pytest.raises(ValidationError, match="covariate_generator"):
        DGPConfig(covariate_generator="uniform")
    with pytest.raises(ValidationError, match="unknown simulation option"):
        DGPConfig.from_dict({"n": 10, "colour": 1})


def test_dict_roundtrip():
    cfg = DGPConfig(n=30, beta=(1.0, 2.0), covariate_generator="truncated-pair")
    assert DGPConfig.from_dict(cfg.to_dict()) == cfg


def test_synthetic_grid_and_blocks():
    g = synthetic_grid(9)
    assert g.tolist()[:4] == [[0, 0], [1, 0], [2, 0], [0, 1]]
    b = country_blocks(16, 2)
    assert sorted(set(b)) == [0, 1]
    assert dgp_weights(DGPConfig(n=16, k_neighbors=3)).k == 3


def test_truncated_pair_exclusive():
    cfg = DGPConfig(n=36, T=20, beta=(0.5, -0.3), covariate_generator="truncated-pair")
    p = simulate(cfg)
    from sdpd.panel import split_spei

    dry, wet = split_spei(p.X["spei"])
    assert np.all(dry * wet == 0)
    assert cfg.covariate_names == ("dry", "wet")
    assert (dry > 0).any() and (wet > 0).any()


def test_country_block_constant_within_country():
    cfg = DGPConfig(n=36, T=5, covariate_generator="country-block", n_countries=3)
    p = simulate(cfg)
    x = p.X["x1"]
    countries = np.array(p.country_of_unit)
    for c in set(countries):
        assert np.ptp(x[countries == c], axis=0).max() == 0


def test_stable_process_has_no_variance_trend():
    # slope of the per-period cross-sectional variance over T=100, one fit per
    # replication; the t-stat uses the spread of slopes across replications
    # because a single series is too autocorrelated for the OLS standard error
    from sdpd.simulate import replication_rng

    cfg = DGPConfig(n=100, T=100, rho=0.4, phi=0.3, gamma=0.1, beta=(1.0,), seed=3)
    W = dgp_weights(cfg)
    t = np.arange(cfg.T)
    slopes = np.array([np.polyfit(t, simulate(cfg, W, replication_rng(cfg.seed, r)).y.var(axis=0), 1)[0]
                       for r in range(50)])
    t_stat = slopes.mean() / (slopes.std(ddof=1) / np.sqrt(slopes.size))
    assert abs(t_stat) < 2


def test_monte_carlo_single_replication():
    cfg = DGPConfig(n=36, T=8, beta=(1.0,), seed=5)
    s = monte_carlo(cfg, 1, "bias")
    params = s.replications[0]["params"]
    for row in s.rows:
        assert row["mean"] == params[row["parameter"]]
        assert row["bias"] == params[row["parameter"]] - row["true"]
    assert s.n_failed == 0


def test_monte_carlo_order_invariance():
    cfg = DGPConfig(n=36, T=8, beta=(1.0,), seed=6)
    serial = monte_carlo(cfg, 8, "bias", threads=1)
    threaded = monte_carlo(cfg, 8, "bias", threads=4)
    assert serial.rows == threaded.rows
    ok = list(serial.replications)
    random.Random(0).shuffle(ok)
    assert _summarize(cfg, "bias", ok, 0.05) == serial.rows


def test_monte_carlo_bias_rows_one_per_parameter():
    cfg = DGPConfig(n=36, T=8, beta=(1.0, 0.5), seed=7)
    s = monte_carlo(cfg, 4, "bias")
    assert [r["parameter"] for r in s.rows] == ["rho", "phi", "gamma", "x1", "x2", "sigma_sq"]
    for r in s.rows:
        assert {"true", "mean", "bias", "sd", "rmse", "mc_se", "n_ok"} <= set(r)


def test_monte_carlo_records_failures():
    # a constant covariate vanishes under demeaning, so every fit fails
    cfg = DGPConfig(n=16, T=6, beta=(1.0,), covariate_generator="country-block", n_countries=1, seed=1)
    s = monte_carlo(cfg, 3, "bias")
    assert s.n_failed == 3 and s.rows == []
    assert all("CollinearityError" in f["error"] for f in s.failures)


def test_monte_carlo_wald_requires_cointegration():
    with pytest.raises(ValidationError, match="cointegrated"):
        monte_carlo(DGPConfig(n=16, T=6), 2, "wald_size")


def test_effect_identity_experiment():
    cfg = DGPConfig(n=36, T=8, beta=(1.0, -0.5), seed=9)
    s = monte_carlo(cfg, 3, "effect_identity")
    assert {r["parameter"] for r in s.rows} == {"x1:short", "x1:long", "x2:short", "x2:long"}
    assert max(r["max_abs_gap"] for r in s.rows) <= 1e-10


def test_weather_gdp_generator_fits():
    from sdpd.estimator import fit

    beta = (0.5, -0.05, -0.3, 0.2, 0.1, -0.1, 0.05, 0.02)
    cfg = DGPConfig(n=49, T=10, beta=beta, covariate_generator="weather-gdp", sigma=0.1, k_neighbors=4,
                    n_countries=7, seed=2)
    p = simulate(cfg)
    assert set(p.X) == {"gdp", "spei"}
    res = fit(p, dgp_weights(cfg), cfg.model_spec())
    assert res.covariate_names == cfg.covariate_names
