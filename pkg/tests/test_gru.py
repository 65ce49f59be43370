import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gruimc.gru import (DimensionError, GruLayerWeights, GruNetwork, OutputMap, PARAM_NAMES,
                        clamp_free_convergence_probe, dumps_network, in_unit_box, init_network,
                        load_network, network_from_dict, network_to_dict, save_network, simulate,
                        step, zero_network)
from _nets import certified_net, random_net


def scalar_oracle(net, state, v):
    """Element-by-element evaluation of the layer equations with plain floats."""
    def sig(x):
        return 1.0 / (1.0 + math.exp(-x))

    new_state = []
    inp = [float(x) for x in v]
    off = 0
    for layer in net.layers:
        n = layer.n_units
        h = [float(x) for x in state[off:off + n]]
        off += n
        gates = {}
        for g in "zf":
            W, U, b = (getattr(layer, f"{k}_{g}") for k in "WUb")
            gates[g] = [sig(sum(W[i][j] * inp[j] for j in range(len(inp)))
                            + sum(U[i][j] * h[j] for j in range(n)) + b[i]) for i in range(n)]
        z, f = gates["z"], gates["f"]
        hn = []
        for i in range(n):
            a = (sum(layer.W_r[i][j] * inp[j] for j in range(len(inp)))
                 + sum(layer.U_r[i][j] * f[j] * h[j] for j in range(n)) + layer.b_r[i])
            hn.append(z[i] * h[i] + (1 - z[i]) * math.tanh(a))
        new_state += hn
        inp = hn
    out = [sum(net.output.U_o[i][j] * inp[j] for j in range(len(inp))) + net.output.b_o[i]
           for i in range(net.output_dim)]
    if net.output.activation == "tanh":
        out = [math.tanh(x) for x in out]
    return np.array(new_state), np.array(out)


def test_zero_net_zero_state_gives_bias():
    net = zero_network(2, [3], 2)
    net = GruNetwork(net.layers, OutputMap(np.zeros((2, 3)), [0.3, -0.2]))
    xi, y = step(net, np.zeros(3), [0.7, -0.4])
    assert np.array_equal(xi, np.zeros(3))
    assert np.allclose(y, [0.3, -0.2])


def test_zero_net_halves_state():
    net = zero_network(2, [2, 3], 1)
    c = np.array([0.4, -1.0, 0.2, 0.9, -0.6])
    xi, _ = step(net, c, [1.0, 1.0])
    assert np.allclose(xi, 0.5 * c)


@pytest.mark.parametrize("seed", range(5))
def test_matches_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    for act in ("identity", "tanh"):
        net = random_net(rng, 2, (3, 3), 2, act, scale=1.5)
        xi0 = rng.uniform(-1, 1, 6)
        v = rng.uniform(-1, 1, 2)
        xi, y = step(net, xi0, v)
        xo, yo = scalar_oracle(net, xi0, v)
        assert np.allclose(xi, xo, atol=1e-13, rtol=0)
        assert np.allclose(y, yo, atol=1e-13, rtol=0)


def test_second_layer_sees_updated_state():
    # with W_r of layer 2 picking layer-1's unit, the output reacts within one step
    rng = np.random.default_rng(3)
    net = random_net(rng, 1, (1, 1), 1)
    xi, _ = step(net, np.zeros(2), [1.0])
    l1 = net.layers[0]
    h1 = step(GruNetwork((l1,), OutputMap(np.zeros((1, 1)), [0.0])), np.zeros(1), [1.0])[0]
    l2 = net.layers[1]
    expected, *_ = __import__("gruimc.gru", fromlist=["layer_forward"]).layer_forward(l2, h1, np.zeros(1))
    assert np.allclose(xi[1:], expected)


def test_batched_step_matches_single():
    rng = np.random.default_rng(0)
    net = random_net(rng, 2, (4, 3), 2)
    X = rng.uniform(-1, 1, (5, 7))
    V = rng.uniform(-1, 1, (5, 2))
    Xn, Y = step(net, X, V)
    for i in range(5):
        x, y = step(net, X[i], V[i])
        assert np.allclose(Xn[i], x, atol=1e-15) and np.allclose(Y[i], y, atol=1e-15)


def test_dimension_errors_name_layer_and_shapes():
    net = zero_network(2, [3], 1)
    with pytest.raises(DimensionError) as e:
        step(net, np.zeros(3), np.zeros(4))
    assert e.value.expected == (2,) and e.value.actual == (4,) and e.value.layer == 1
    with pytest.raises(DimensionError):
        step(net, np.zeros(2), np.zeros(2))
    with pytest.raises(DimensionError) as e:
        GruNetwork((GruLayerWeights.zeros(3, 2, 1), GruLayerWeights.zeros(2, 4, 2)),
                   OutputMap(np.zeros((1, 2)), [0.0]))
    assert e.value.layer == 2


def test_weights_must_be_finite():
    kw = {k: getattr(GruLayerWeights.zeros(2, 1), k) for k in PARAM_NAMES}
    kw["U_f"] = np.array([[np.nan, 0], [0, 0]])
    with pytest.raises(ValueError):
        GruLayerWeights(**kw)


def test_zero_net_geometric_halving():
    net = zero_network(1, [4], 1)
    xi0 = np.array([1.0, -0.5, 0.25, 0.0])
    traj = simulate(net, np.zeros((12, 1)), xi0)
    norms = np.max(np.abs(traj.states), axis=1)
    assert np.allclose(norms, 2.0 ** -np.arange(13))


def test_trajectory_lengths():
    rng = np.random.default_rng(1)
    net = random_net(rng)
    traj = simulate(net, rng.uniform(-1, 1, (9, 2)))
    assert len(traj) == 9 and traj.states.shape == (10, 3) and traj.outputs.shape == (9, 2)
    assert np.array_equal(traj.states[0], np.zeros(3))


def test_simulate_rejects_empty_and_reports_time_index():
    net = zero_network(2, [2], 1)
    with pytest.raises(ValueError):
        simulate(net, np.zeros((0, 2)))
    with pytest.raises(DimensionError):
        simulate(net, np.zeros((4, 3)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), split=st.integers(1, 19))
def test_simulate_fold_associativity(seed, split):
    rng = np.random.default_rng(seed)
    net = random_net(rng, 2, (3, 2), 2, scale=2.0)
    u = rng.uniform(-1, 1, (20, 2))
    xi0 = rng.uniform(-1, 1, 5)
    whole = simulate(net, u, xi0)
    a = simulate(net, u[:split], xi0)
    b = simulate(net, u[split:], a.final_state)
    assert np.array_equal(whole.states, np.vstack([a.states, b.states[1:]]))
    assert np.array_equal(whole.outputs, np.vstack([a.outputs, b.outputs]))


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(0.01, 5.0))
def test_unit_box_is_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    net = random_net(rng, 2, (3, 2), 2, scale=scale)
    xi = rng.uniform(-1, 1, (20, 5))
    xi[0] = np.sign(xi[0])  # a vertex of the box
    v = rng.uniform(-1, 1, (20, 2))
    nxt, _ = step(net, xi, v)
    assert np.all(np.abs(nxt) <= 1.0)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_tanh_output_strictly_saturated(seed):
    rng = np.random.default_rng(seed)
    net = random_net(rng, 2, (3,), 2, "tanh", scale=3.0)
    _, y = step(net, rng.uniform(-1, 1, (30, 3)), rng.uniform(-1, 1, (30, 2)))
    assert np.all(np.abs(y) < 1.0)


def test_probe_zero_net_series():
    net = zero_network(1, [3], 1)
    series = clamp_free_convergence_probe(net, 3.0 * np.ones(3), np.zeros((3, 1)))
    assert np.allclose(series, [3.0, 1.5, 0.75, 0.375])
    assert in_unit_box(np.full(3, series[2]))


def test_probe_rejects_state_inside_box():
    net = zero_network(1, [3], 1)
    with pytest.raises(ValueError):
        clamp_free_convergence_probe(net, np.full(3, 0.9), np.zeros((3, 1)))


@pytest.mark.parametrize("seed", range(5))
def test_probe_strictly_decreasing_for_certified_net(seed):
    rng = np.random.default_rng(seed)
    net = certified_net(rng, 2, (3, 3))
    series = clamp_free_convergence_probe(net, 5.0 * np.ones(6), rng.uniform(-1, 1, (200, 2)))
    outside = series[series > 1.0]
    assert np.all(np.diff(outside) < 0)
    assert series[-1] <= 1.0


def test_weight_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    net = random_net(rng, 2, (3, 2), 2, "tanh")
    path = tmp_path / "w.json"
    save_network(net, path)
    back = load_network(path)
    assert all(np.array_equal(a, b) for a, b in zip(net.params(), back.params()))
    assert back.output.activation == "tanh"
    # canonical text: writing again gives the same bytes
    assert dumps_network(back) == path.read_text()
    doc = json.loads(path.read_text())
    assert doc["role"] == "controller" and doc["dims"]["layer_widths"] == [3, 2]


def test_weight_file_validation():
    rng = np.random.default_rng(0)
    doc = network_to_dict(random_net(rng))
    bad = json.loads(json.dumps(doc))
    bad["layers"][0]["U_r"] = [[0.0, 0.0], [0.0, 0.0]]
    with pytest.raises(DimensionError):
        network_from_dict(bad)
    bad = json.loads(json.dumps(doc))
    bad["format_version"] = 99
    with pytest.raises(ValueError):
        network_from_dict(bad)
    bad = json.loads(json.dumps(doc))
    bad["role"] = "controller"  # identity output cannot be a controller
    with pytest.raises(ValueError):
        network_from_dict(bad)


def test_params_round_trip_and_immutability():
    rng = np.random.default_rng(0)
    net = random_net(rng, 2, (3, 2), 2)
    clone = net.with_params([p * 2 for p in net.params()])
    assert np.allclose(clone.params()[0], 2 * net.params()[0])
    assert net.n_params() == sum(p.size for p in net.params())
    with pytest.raises(ValueError):
        net.layers[0].U_z[0, 0] = 1.0


def test_init_network_scale():
    net = init_network(2, [10, 10], 2, rng=np.random.default_rng(0))
    assert np.max(np.abs(net.layers[0].U_r)) <= 1 / np.sqrt(10)
    assert net.state_dim == 20 and net.widths == (10, 10)


def test_trained_model_regression_fixture():
    fixtures = __import__("pathlib").Path(__file__).parent / "fixtures"
    net = load_network(fixtures / "tank_model.json")
    doc = json.loads((fixtures / "tank_model_regression.json").read_text())
    out = simulate(net, np.array(doc["inputs"])).outputs
    assert np.allclose(out, doc["outputs"], rtol=0, atol=1e-12)
