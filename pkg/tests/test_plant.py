import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gruimc import plant
from gruimc.plant import DEFAULT_PARAMS as P

H_MAX = np.array(P.h_max)


def random_operating_point(rng):
    """Levels in [1 cm, h_max] and flows anywhere in their ranges."""
    h = rng.uniform(0.01, H_MAX)
    q = rng.uniform(P.q_min, P.q_max)
    return h, q


def test_table_defaults():
    assert (P.a1, P.a2, P.a3, P.a4) == (1.31e-4, 1.51e-4, 9.27e-5, 8.82e-5)
    assert P.S == 0.06 and (P.gamma_a, P.gamma_b) == (0.3, 0.4)
    assert P.h_max == (1.36, 1.36, 1.3, 1.3) and P.q_max == (9e-4, 1.3e-3)


def test_params_validation_and_json(tmp_path):
    with pytest.raises(ValueError):
        plant.TankParams(a1=-1.0)
    with pytest.raises(ValueError):
        plant.TankParams(gamma_a=1.0)
    with pytest.raises(ValueError):
        plant.TankParams(h_min=(0, 0, 2.0, 0))
    path = tmp_path / "p.json"
    path.write_text(json.dumps(P.to_dict()))
    assert plant.TankParams.from_json(path) == P
    path.write_text(json.dumps({"a5": 1.0}))
    with pytest.raises(ValueError):
        plant.TankParams.from_json(path)


def test_empty_tanks_pumps_off_no_motion():
    assert np.array_equal(plant.derivatives(np.zeros(4), 0.0, 0.0), np.zeros(4))


def test_h4_equilibrium():
    q_a = 5e-4
    h4 = ((1 - P.gamma_a) * q_a / P.a4) ** 2 / (2 * P.g)
    assert h4 == pytest.approx(0.8026, abs=1e-4)
    assert plant.derivatives([0.1, 0.1, 0.1, h4], q_a, 0.0)[3] == pytest.approx(0.0, abs=1e-15)


def test_pumps_at_max_from_empty_fill_every_tank():
    assert np.all(plant.derivatives(np.zeros(4), *P.q_max) > 0)


def test_negative_level_is_a_domain_error():
    with pytest.raises(ValueError):
        plant.derivatives([0.1, -1e-3, 0.1, 0.1], 0.0, 0.0)


def test_first_row_formula():
    h = np.array([0.4, 0.3, 0.2, 0.5])
    q_a, q_b = 3e-4, 7e-4
    d1 = -(P.a1 / P.S) * np.sqrt(2 * P.g * h[0]) + (P.a3 / P.S) * np.sqrt(2 * P.g * h[2]) + P.gamma_a / P.S * q_a
    assert plant.derivatives(h, q_a, q_b)[0] == pytest.approx(d1, rel=1e-14)


def test_step_halving():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(30):
        h, q = random_operating_point(rng)
        a = plant.step(h, *q, substep=1.0)
        b = plant.step(h, *q, substep=0.5)
        worst = max(worst, np.max(np.abs(a - b)))
    assert worst < 1e-6


def test_settled_state_stops_moving():
    h = plant.settle(4e-4, 6e-4)
    assert np.max(np.abs(plant.step(h, 4e-4, 6e-4) - h)) < 1e-9
    assert np.allclose(h, plant.steady_levels(4e-4, 6e-4), atol=1e-6)


def test_settling_reproduces_h4():
    h = plant.settle(5e-4, 0.0)
    assert h[3] == pytest.approx(0.8026, abs=1e-4)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_pure_drainage(seed):
    rng = np.random.default_rng(seed)
    h = rng.uniform(0, H_MAX)
    nxt = plant.step(h, 0.0, 0.0)
    assert np.all(nxt[2:] <= h[2:])
    assert np.sum(P.S * nxt) <= np.sum(P.S * h)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_levels_stay_in_bounds(seed):
    rng = np.random.default_rng(seed)
    h = rng.uniform(0, H_MAX)
    q = rng.uniform(-1e-3, 2e-3, 2)  # beyond the pump limits on purpose
    for _ in range(5):
        h = plant.step(h, *q)
        assert np.all(h >= 0) and np.all(h <= H_MAX)


def test_flows_clamped():
    assert plant.clamp_flows(-1.0, 1.0) == (0.0, P.q_max[1])
    h = np.full(4, 0.3)
    assert np.array_equal(plant.step(h, 1.0, 1.0), plant.step(h, *P.q_max))


def test_settled_h1_monotone_in_q_a():
    for q_b in (2e-4, 6e-4, 1e-3):
        h1 = [plant.steady_levels(q_a, q_b)[0] for q_a in np.linspace(0, P.q_max[0], 7)]
        assert np.all(np.diff(h1) >= 0)


def test_normalizer_examples():
    n = plant.Normalizer.for_plant()
    assert n.normalize(0.0, "h1") == -1.0 and n.normalize(1.36, "h1") == 1.0
    assert n.normalize(0.68, "h1") == pytest.approx(0.0, abs=1e-15)
    x = np.random.default_rng(0).uniform(0, 1.36, 100)
    assert np.max(np.abs(n.normalize(n.denormalize(n.normalize(x, "h2"), "h2"), "h2")
                         - n.normalize(x, "h2"))) < 1e-12
    with pytest.raises(KeyError):
        n.normalize(0.1, "h9")


def test_measure_noise():
    n = plant.Normalizer.for_plant()
    h = np.array([0.68, 0.34, 0.1, 0.1])
    assert np.array_equal(plant.measure(h, n), [0.0, -0.5])
    a = plant.measure(h, n, 0.01, np.random.default_rng(7))
    b = plant.measure(h, n, 0.01, np.random.default_rng(7))
    assert np.array_equal(a, b)
    rng = np.random.default_rng(0)
    N = 100_000
    draws = np.array([plant.measure(h, n, 0.01, rng) for _ in range(2000)])  # per-call path
    noise = rng.normal(0, 0.01, N)  # same generator call the measurement uses
    assert abs(noise.mean()) < 3 * 0.01 / np.sqrt(N)
    assert abs((draws - [0.0, -0.5]).mean()) < 3 * 0.01 / np.sqrt(draws.size)


def test_tank_plant_uses_normalized_signals():
    n = plant.Normalizer.for_plant()
    tank = plant.TankPlant(np.zeros(4), normalizer=n)
    y = tank.apply(np.array([1.0, 1.0]))
    assert np.allclose(tank.state, plant.step(np.zeros(4), *P.q_max))
    assert np.allclose(y, n.normalize_many(tank.state[:2], ("h1", "h2")))
