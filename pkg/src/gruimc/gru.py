"""Deep GRU networks in state-space form.

A network maps an input sequence ``v(k)`` to an output sequence through a
stack of GRU layers.  Layer ``l`` receives the *updated* state of layer
``l - 1`` as its input, and the output map reads the updated state of the
last layer.  The whole network state is stored as one flat vector, with
``GruNetwork.offsets`` giving the per-layer slices.

Every public stepping routine accepts either a single state ``(n,)`` or a
batch of states ``(B, n)``; the same kernel is used in both cases.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit as sigmoid

PARAM_NAMES = ("W_z", "U_z", "b_z", "W_f", "U_f", "b_f", "W_r", "U_r", "b_r")
ACTIVATIONS = ("identity", "tanh")
FORMAT_VERSION = 1


class DimensionError(ValueError):
    """Raised when an array does not have the shape a network expects."""

    def __init__(self, what: str, expected, actual, layer: int | None = None):
        self.what = what
        self.expected = expected
        self.actual = actual
        self.layer = layer
        where = f"layer {layer}: " if layer is not None else ""
        super().__init__(f"{where}{what} expected shape {expected}, got {actual}")


def _as_f64(a, name: str, layer: int | None = None) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        where = f"layer {layer}: " if layer is not None else ""
        raise ValueError(f"{where}{name} contains non-finite entries")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class GruLayerWeights:
    W_z: np.ndarray
    U_z: np.ndarray
    b_z: np.ndarray
    W_f: np.ndarray
    U_f: np.ndarray
    b_f: np.ndarray
    W_r: np.ndarray
    U_r: np.ndarray
    b_r: np.ndarray
    index: int | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        for name in PARAM_NAMES:
            object.__setattr__(self, name, _as_f64(getattr(self, name), name, self.index))
        n = self.b_z.shape[0] if self.b_z.ndim == 1 else -1
        if n < 1:
            raise DimensionError("b_z", "(n,)", self.b_z.shape, self.index)
        m = self.W_z.shape[1] if self.W_z.ndim == 2 else -1
        for g in "zfr":
            W, U, b = (getattr(self, f"{k}_{g}") for k in "WUb")
            if W.shape != (n, m):
                raise DimensionError(f"W_{g}", (n, m), W.shape, self.index)
            if U.shape != (n, n):
                raise DimensionError(f"U_{g}", (n, n), U.shape, self.index)
            if b.shape != (n,):
                raise DimensionError(f"b_{g}", (n,), b.shape, self.index)
        # stacked gate matrices, used by the stepping kernel
        object.__setattr__(self, "_Wzf_T", np.ascontiguousarray(np.vstack([self.W_z, self.W_f]).T))
        object.__setattr__(self, "_Uzf_T", np.ascontiguousarray(np.vstack([self.U_z, self.U_f]).T))
        object.__setattr__(self, "_bzf", np.concatenate([self.b_z, self.b_f]))
        object.__setattr__(self, "_Wr_T", np.ascontiguousarray(self.W_r.T))
        object.__setattr__(self, "_Ur_T", np.ascontiguousarray(self.U_r.T))

    @property
    def n_units(self) -> int:
        return self.b_z.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.W_z.shape[1]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in PARAM_NAMES]

    @classmethod
    def zeros(cls, n_units: int, n_inputs: int, index: int | None = None) -> "GruLayerWeights":
        kw = {}
        for g in "zfr":
            kw[f"W_{g}"] = np.zeros((n_units, n_inputs))
            kw[f"U_{g}"] = np.zeros((n_units, n_units))
            kw[f"b_{g}"] = np.zeros(n_units)
        return cls(**kw, index=index)


@dataclass(frozen=True)
class OutputMap:
    U_o: np.ndarray
    b_o: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.activation!r}")
        object.__setattr__(self, "U_o", _as_f64(self.U_o, "U_o"))
        object.__setattr__(self, "b_o", _as_f64(self.b_o, "b_o"))
        if self.U_o.ndim != 2:
            raise DimensionError("U_o", "(p, n_M)", self.U_o.shape)
        if self.b_o.shape != (self.U_o.shape[0],):
            raise DimensionError("b_o", (self.U_o.shape[0],), self.b_o.shape)
        object.__setattr__(self, "_Uo_T", np.ascontiguousarray(self.U_o.T))

    def __call__(self, h_last: np.ndarray) -> np.ndarray:
        a = h_last @ self._Uo_T + self.b_o
        return np.tanh(a) if self.activation == "tanh" else a


@dataclass(frozen=True)
class GruNetwork:
    """Immutable deep GRU: ordered layers plus an output map."""

    layers: tuple[GruLayerWeights, ...]
    output: OutputMap

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("a GRU network needs at least one layer")
        object.__setattr__(self, "layers", layers)
        for l in range(1, len(layers)):
            if layers[l].n_inputs != layers[l - 1].n_units:
                raise DimensionError("W_*", (layers[l].n_units, layers[l - 1].n_units),
                                     layers[l].W_z.shape, l + 1)
        if self.output.U_o.shape[1] != layers[-1].n_units:
            raise DimensionError("U_o", (self.output.U_o.shape[0], layers[-1].n_units),
                                 self.output.U_o.shape)
        offsets = np.concatenate([[0], np.cumsum(self.widths)]).astype(int)
        object.__setattr__(self, "offsets", tuple(int(o) for o in offsets))

    @property
    def input_dim(self) -> int:
        return self.layers[0].n_inputs

    @property
    def output_dim(self) -> int:
        return self.output.U_o.shape[0]

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(layer.n_units for layer in self.layers)

    @property
    def state_dim(self) -> int:
        return sum(self.widths)

    @property
    def role(self) -> str:
        return "controller" if self.output.activation == "tanh" else "model"

    def zero_state(self, batch: int | None = None) -> np.ndarray:
        shape = (self.state_dim,) if batch is None else (batch, self.state_dim)
        return np.zeros(shape)

    def layer_state(self, state: np.ndarray, l: int) -> np.ndarray:
        """View of layer ``l`` (0-based) inside a flat state vector."""
        return state[..., self.offsets[l]:self.offsets[l + 1]]

    def params(self) -> list[np.ndarray]:
        """All weight arrays in canonical order (per layer, then U_o, b_o)."""
        out = []
        for layer in self.layers:
            out.extend(layer.arrays())
        out.extend([self.output.U_o, self.output.b_o])
        return out

    def param_names(self) -> list[str]:
        names = [f"{name}[{l + 1}]" for l in range(len(self.layers)) for name in PARAM_NAMES]
        return names + ["U_o", "b_o"]

    def with_params(self, arrays: Sequence[np.ndarray]) -> "GruNetwork":
        arrays = list(arrays)
        if len(arrays) != 9 * len(self.layers) + 2:
            raise ValueError(f"expected {9 * len(self.layers) + 2} arrays, got {len(arrays)}")
        layers = []
        for l in range(len(self.layers)):
            chunk = arrays[9 * l:9 * l + 9]
            layers.append(GruLayerWeights(**dict(zip(PARAM_NAMES, chunk)), index=l + 1))
        out = OutputMap(arrays[-2], arrays[-1], self.output.activation)
        return GruNetwork(tuple(layers), out)

    def n_params(self) -> int:
        return sum(a.size for a in self.params())


def init_network(input_dim: int, widths: Sequence[int], output_dim: int,
                 activation: str = "identity", rng: np.random.Generator | None = None,
                 scale: float | None = None) -> GruNetwork:
    """Random network with uniform(-s, s) weights, s = 1/sqrt(n_l) by default."""
    rng = np.random.default_rng() if rng is None else rng
    layers = []
    m = input_dim
    for l, n in enumerate(widths):
        s = 1.0 / np.sqrt(n) if scale is None else scale
        kw = {}
        for g in "zfr":
            kw[f"W_{g}"] = rng.uniform(-s, s, (n, m))
            kw[f"U_{g}"] = rng.uniform(-s, s, (n, n))
            kw[f"b_{g}"] = rng.uniform(-s, s, n)
        layers.append(GruLayerWeights(**kw, index=l + 1))
        m = n
    s = 1.0 / np.sqrt(widths[-1]) if scale is None else scale
    out = OutputMap(rng.uniform(-s, s, (output_dim, widths[-1])), np.zeros(output_dim), activation)
    return GruNetwork(tuple(layers), out)


def zero_network(input_dim: int, widths: Sequence[int], output_dim: int,
                 activation: str = "identity") -> GruNetwork:
    layers = []
    m = input_dim
    for l, n in enumerate(widths):
        layers.append(GruLayerWeights.zeros(n, m, index=l + 1))
        m = n
    out = OutputMap(np.zeros((output_dim, widths[-1])), np.zeros(output_dim), activation)
    return GruNetwork(tuple(layers), out)


def layer_forward(layer: GruLayerWeights, v: np.ndarray, h: np.ndarray):
    """One layer update.  Returns ``(h_next, z, f, c)``."""
    zf = sigmoid(v @ layer._Wzf_T + h @ layer._Uzf_T + layer._bzf)
    n = layer.n_units
    z = zf[..., :n]
    f = zf[..., n:]
    c = np.tanh(v @ layer._Wr_T + (f * h) @ layer._Ur_T + layer.b_r)
    h_next = z * h + (1.0 - z) * c
    return h_next, z, f, c


def _check_state(net: GruNetwork, state: np.ndarray) -> np.ndarray:
    state = np.asarray(state, dtype=np.float64)
    if state.shape[-1:] != (net.state_dim,):
        raise DimensionError("state", (net.state_dim,), state.shape)
    return state


def _check_input(net: GruNetwork, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1:] != (net.input_dim,):
        raise DimensionError("input", (net.input_dim,), v.shape, layer=1)
    return v


def _step(net: GruNetwork, state: np.ndarray, v: np.ndarray):
    parts = []
    for l, layer in enumerate(net.layers):
        h = state[..., net.offsets[l]:net.offsets[l + 1]]
        v = layer_forward(layer, v, h)[0]
        parts.append(v)
    return np.concatenate(parts, axis=-1), net.output(v)


def step(net: GruNetwork, state: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Advance the network one sample.

    Returns the updated state and the output read from the updated state of
    the last layer.
    """
    state = _check_state(net, state)
    v = _check_input(net, v)
    return _step(net, state, v)


@dataclass
class Trajectory:
    """Inputs ``(T, m)``, states ``(T + 1, n)`` including the initial one, outputs ``(T, p)``."""

    inputs: np.ndarray
    states: np.ndarray
    outputs: np.ndarray
    sample_period: float = 1.0

    def __post_init__(self):
        T = len(self.inputs)
        if len(self.outputs) != T or len(self.states) != T + 1:
            raise ValueError(
                f"inconsistent trajectory lengths: inputs {T}, outputs {len(self.outputs)}, "
                f"states {len(self.states)} (expected {T + 1})")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]


def simulate(net: GruNetwork, inputs, initial=None, sample_period: float = 1.0) -> Trajectory:
    """Run the network over an input sequence from ``initial`` (zeros by default)."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or len(inputs) == 0:
        raise ValueError(f"expected a nonempty (T, m) input sequence, got shape {inputs.shape}")
    state = net.zero_state() if initial is None else _check_state(net, initial)
    if state.ndim != 1:
        raise DimensionError("state", (net.state_dim,), state.shape)
    T = len(inputs)
    states = np.empty((T + 1, net.state_dim))
    outputs = np.empty((T, net.output_dim))
    states[0] = state
    for k in range(T):
        try:
            v = _check_input(net, inputs[k])
        except DimensionError as exc:
            raise DimensionError(f"input at time index {k}", exc.expected, exc.actual, 1) from exc
        state, outputs[k] = _step(net, state, v)
        states[k + 1] = state
    return Trajectory(inputs, states, outputs, sample_period)


def in_unit_box(state: np.ndarray, tol: float = 0.0) -> bool:
    """Membership in the invariant hypercube [-1, 1]^n."""
    return bool(np.max(np.abs(state)) <= 1.0 + tol)


def clamp_free_convergence_probe(net: GruNetwork, initial, inputs) -> np.ndarray:
    """Infinity norms ``|xi(k)|_inf`` for k = 0..T of a free run started outside the unit box."""
    initial = _check_state(net, initial)
    if in_unit_box(initial):
        raise ValueError("probe needs an initial state outside [-1, 1]^n")
    traj = simulate(net, inputs, initial)
    return np.max(np.abs(traj.states), axis=1)


# --- weight files -----------------------------------------------------------

def network_to_dict(net: GruNetwork, role: str | None = None) -> dict:
    role = net.role if role is None else role
    return {
        "format_version": FORMAT_VERSION,
        "role": role,
        "dims": {
            "input_dim": net.input_dim,
            "layer_widths": list(net.widths),
            "output_dim": net.output_dim,
        },
        "layers": [{name: getattr(layer, name).tolist() for name in PARAM_NAMES}
                   for layer in net.layers],
        "output": {
            "U_o": net.output.U_o.tolist(),
            "b_o": net.output.b_o.tolist(),
            "activation": net.output.activation,
        },
    }


def network_from_dict(doc: dict) -> GruNetwork:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported weight format version {doc.get('format_version')!r}")
    role = doc.get("role")
    if role not in ("model", "controller"):
        raise ValueError(f"unknown network role {role!r}")
    dims = doc["dims"]
    widths = list(dims["layer_widths"])
    if len(doc["layers"]) != len(widths):
        raise DimensionError("layers", len(widths), len(doc["layers"]))
    layers = []
    m = dims["input_dim"]
    for l, (entry, n) in enumerate(zip(doc["layers"], widths)):
        arrays = {name: np.asarray(entry[name], dtype=np.float64) for name in PARAM_NAMES}
        for g in "zfr":
            for key, shape in ((f"W_{g}", (n, m)), (f"U_{g}", (n, n)), (f"b_{g}", (n,))):
                if arrays[key].shape != shape:
                    raise DimensionError(key, shape, arrays[key].shape, l + 1)
        layers.append(GruLayerWeights(**arrays, index=l + 1))
        m = n
    o = doc["output"]
    U_o = np.asarray(o["U_o"], dtype=np.float64)
    if U_o.shape != (dims["output_dim"], widths[-1]):
        raise DimensionError("U_o", (dims["output_dim"], widths[-1]), U_o.shape)
    net = GruNetwork(tuple(layers), OutputMap(U_o, o["b_o"], o["activation"]))
    if net.role != role:
        raise ValueError(f"role {role!r} does not match output activation {o['activation']!r}")
    return net


def dumps_network(net: GruNetwork, role: str | None = None) -> str:
    return json.dumps(network_to_dict(net, role), sort_keys=True, indent=1) + "\n"


def save_network(net: GruNetwork, path, role: str | None = None) -> None:
    Path(path).write_text(dumps_network(net, role))


def load_network(path) -> GruNetwork:
    return network_from_dict(json.loads(Path(path).read_text()))
