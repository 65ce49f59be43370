import numpy as np
import pytest

from gruimc import datagen as dg, imc, plant
from gruimc.gru import init_network, zero_network
from gruimc.training import forward
from _nets import certified_net


def _pair(seed=0):
    rng = np.random.default_rng(seed)
    model = certified_net(rng, 2, [4, 3], 2, "identity")
    ctrl = certified_net(rng, 2, [3], 2, "tanh")
    return ctrl, model


def _nominal(ctrl, model, xi0=None, feedback=True):
    rm = dg.ReferenceModel.from_time_constant(25, 2000)
    return imc.ImcAssembly(ctrl, model, imc.ModelPlant(model, xi0), rm, rm if feedback else None)


SCHEDULE = imc.Schedule([[0.2, -0.1], [-0.3, 0.4]], [60, 60])


def test_open_loop_equivalence_bitwise():
    ctrl, model = _pair()
    log = imc.run_experiment(_nominal(ctrl, model), SCHEDULE)
    assert np.all(log.array("e_m") == 0.0)
    assert np.all(log.array("e_filtered") == 0.0)
    yf = dg.filter_reference(SCHEDULE.profile(), dg.ReferenceModel.from_time_constant(25, 2000),
                             initial=[0.0, 0.0])
    np.testing.assert_array_equal(log.array("yf"), yf)
    u, _ = forward(ctrl, yf[None])
    y, _ = forward(model, u)
    np.testing.assert_array_equal(log.array("u"), u[0])
    np.testing.assert_array_equal(log.array("y_p"), y[0])


def test_mismatched_initial_state_error_vanishes():
    ctrl, model = _pair(1)
    xi0 = np.full(model.state_dim, 0.8)
    log = imc.run_experiment(_nominal(ctrl, model, xi0), imc.Schedule([[0.1, 0.1]], [400]))
    e = np.linalg.norm(log.array("e_m"), axis=1)
    assert e[0] > 1e-3
    assert e[-1] < 1e-9


def test_control_action_bounded_and_reproducible():
    ctrl, model = _pair(2)
    a = imc.run_experiment(imc.tank_assembly(ctrl, model, noise_std=0.01, seed=4), SCHEDULE)
    b = imc.run_experiment(imc.tank_assembly(ctrl, model, noise_std=0.01, seed=4), SCHEDULE)
    u = a.array("u")
    assert np.all(np.abs(u) < 1.0)
    for name in imc.ClosedLoopLog.SERIES:
        np.testing.assert_array_equal(a.array(name), b.array(name))
    levels = a.array("levels")
    assert np.all(levels >= 0) and np.all(levels <= np.array(plant.DEFAULT_PARAMS.h_max))


def test_ordering_uses_previous_error():
    ctrl, model = _pair(3)
    asm = imc.tank_assembly(ctrl, model)
    rows = [imc.closed_loop_step(asm, [0.0, 0.0]) for _ in range(3)]
    np.testing.assert_array_equal(rows[0]["e_filtered"], np.zeros(2))
    # with the feedback filter, the signal after k steps is its state after absorbing e_m(0..k-1)
    g = 1.0 - np.exp(-25 / 2000)
    np.testing.assert_allclose(rows[1]["e_filtered"], g * rows[0]["e_m"], rtol=1e-12)


def test_filter_dc_neutrality():
    # once settled, the filtered error equals the raw one, so the loop sees the exact e_m
    ctrl, model = _pair(4)
    asm = imc.tank_assembly(ctrl, model)
    log = imc.run_experiment(asm, imc.Schedule([[0.0, 0.2]], [2500]))
    e_m, e_f = log.array("e_m"), log.array("e_filtered")
    assert np.max(np.abs(e_m[-1] - e_f[-1])) < 1e-6

    unfiltered = imc.tank_assembly(ctrl, model)
    unfiltered.fb_filter = None
    log2 = imc.run_experiment(unfiltered, imc.Schedule([[0.0, 0.2]], [2500]))
    assert np.max(np.abs(log.array("y_p")[-1] - log2.array("y_p")[-1])) < 1e-6


def test_schedule_roundtrip(tmp_path):
    norm = plant.Normalizer.for_plant()
    path = tmp_path / "schedule.ndjson"
    SCHEDULE.save(path, norm)
    back = imc.Schedule.load(path, norm)
    np.testing.assert_allclose(back.setpoints, SCHEDULE.setpoints, atol=1e-12)
    np.testing.assert_array_equal(back.holds, SCHEDULE.holds)
    assert SCHEDULE.segments() == [(0, 60), (60, 120)]
    with pytest.raises(ValueError):
        imc.Schedule([[0.0, 0.0]], [0])


def test_log_csv_roundtrip(tmp_path):
    ctrl, model = _pair(5)
    log = imc.run_experiment(imc.tank_assembly(ctrl, model, noise_std=0.01), SCHEDULE)
    path = tmp_path / "log.csv"
    log.to_csv(path)
    back = imc.ClosedLoopLog.from_csv(path)
    assert back.sample_period == 25.0
    for name in imc.ClosedLoopLog.SERIES:
        np.testing.assert_array_equal(back.array(name), log.array(name))


def test_sidecar_hashes_weights(tmp_path):
    from gruimc.gru import save_network
    from gruimc.manifest import git_blob_hash
    import json

    ctrl, model = _pair(6)
    save_network(model, tmp_path / "model.json")
    imc.write_sidecar(tmp_path / "log.json", {"tau_s": 25.0}, {"model": tmp_path / "model.json"},
                      relative_to=tmp_path)
    doc = json.loads((tmp_path / "log.json").read_text())
    assert doc["weights"]["model"] == {"path": "model.json",
                                       "hash": git_blob_hash(tmp_path / "model.json")}


def test_nonfinite_output_faults():
    class Broken:
        def __init__(self):
            self.k = 0

        def apply(self, u):
            self.k += 1
            return np.full(2, np.nan) if self.k > 3 else np.zeros(2)

    ctrl = zero_network(2, [2], 2, "tanh")
    model = init_network(2, [2], 2, "identity", np.random.default_rng(0))
    rm = dg.ReferenceModel.from_time_constant(25, 2000)
    with pytest.raises(imc.SimulationFault, match="t = 75 s") as info:
        imc.run_experiment(imc.ImcAssembly(ctrl, model, Broken(), rm, rm), SCHEDULE)
    assert len(info.value.log) == 3


def test_dimension_mismatch():
    ctrl = zero_network(2, [2], 3, "tanh")
    model = zero_network(2, [2], 2)
    with pytest.raises(ValueError):
        _nominal(ctrl, model)
