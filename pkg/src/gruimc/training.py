"""Backpropagation through time for deep GRUs, losses and RMSProp training.

Rollouts are vectorized over a batch of equal-length sequences: inputs are
``(B, T, m)`` arrays and the reverse pass walks the full sequence (no
within-sequence truncation).  The reduction over the batch is a fixed-order
numpy sum, so results are reproducible for a given seed.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .gru import PARAM_NAMES, GruNetwork, layer_forward
from .stability import certify, delta_iss_residual, penalty, penalty_slope, residual_gradient

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, report: "TrainReport | None" = None):
        super().__init__(message)
        self.report = report


class GradientSet:
    """Gradients congruent with ``GruNetwork.params()``."""

    def __init__(self, arrays: Sequence[np.ndarray], names: Sequence[str] | None = None):
        self.arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        self.names = list(names) if names is not None else None

    @classmethod
    def zeros_like(cls, net: GruNetwork) -> "GradientSet":
        return cls([np.zeros_like(a) for a in net.params()], net.param_names())

    def __iter__(self):
        return iter(self.arrays)

    def __len__(self):
        return len(self.arrays)

    def __getitem__(self, key):
        if isinstance(key, str):
            return self.arrays[self.names.index(key)]
        return self.arrays[key]

    def __iadd__(self, other: "GradientSet"):
        for a, b in zip(self.arrays, other.arrays):
            a += b
        return self

    def global_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(a * a)) for a in self.arrays))

    def scale(self, factor: float) -> None:
        for a in self.arrays:
            a *= factor

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays)


# --- batched rollout with cache ---------------------------------------------

@dataclass
class _Cache:
    inputs: list[np.ndarray]  # per layer, (T, B, m_l)
    states: list[np.ndarray]  # per layer, (T + 1, B, n_l)
    z: list[np.ndarray]
    f: list[np.ndarray]
    c: list[np.ndarray]
    outputs: np.ndarray       # (T, B, p)


def forward(net: GruNetwork, inputs: np.ndarray, h0: np.ndarray | None = None):
    """Batched rollout.  ``inputs`` is ``(B, T, m)``; returns outputs ``(B, T, p)`` and a cache."""
    inputs = np.asarray(inputs, dtype=np.float64)
    B, T, m = inputs.shape
    if m != net.input_dim:
        raise ValueError(f"input width {m} does not match network input {net.input_dim}")
    h0 = net.zero_state(B) if h0 is None else np.asarray(h0, dtype=np.float64)
    v_seq = np.ascontiguousarray(inputs.transpose(1, 0, 2))
    cache = _Cache([], [], [], [], [], None)
    for l, layer in enumerate(net.layers):
        n = layer.n_units
        H = np.empty((T + 1, B, n))
        Z = np.empty((T, B, n))
        F = np.empty((T, B, n))
        C = np.empty((T, B, n))
        H[0] = h0[:, net.offsets[l]:net.offsets[l + 1]]
        for t in range(T):
            H[t + 1], Z[t], F[t], C[t] = layer_forward(layer, v_seq[t], H[t])
        cache.inputs.append(v_seq)
        cache.states.append(H)
        cache.z.append(Z)
        cache.f.append(F)
        cache.c.append(C)
        v_seq = H[1:]
    cache.outputs = net.output(v_seq)
    return cache.outputs.transpose(1, 0, 2), cache


def backward(net: GruNetwork, cache: _Cache, d_outputs: np.ndarray, param_grads: bool = True):
    """Reverse pass.  Returns ``(GradientSet | None, d_inputs (B, T, m))``."""
    d_y = np.ascontiguousarray(np.asarray(d_outputs, dtype=np.float64).transpose(1, 0, 2))
    if net.output.activation == "tanh":
        d_y = d_y * (1.0 - cache.outputs ** 2)
    M = len(net.layers)
    T, B, _ = d_y.shape
    h_last = cache.states[-1][1:]
    d_above = d_y @ net.output.U_o  # (T, B, n_M): gradient on last layer's updated state

    grads = []
    for l in reversed(range(M)):
        layer = net.layers[l]
        n = layer.n_units
        H, Z, F, C, V = cache.states[l], cache.z[l], cache.f[l], cache.c[l], cache.inputs[l]
        Uzf = np.vstack([layer.U_z, layer.U_f])
        Wzf = np.vstack([layer.W_z, layer.W_f])
        dA_zf = np.empty((T, B, 2 * n))
        dA_r = np.empty((T, B, n))
        d_v = np.empty((T, B, layer.n_inputs))
        carry = np.zeros((B, n))
        for t in reversed(range(T)):
            dhp = carry + d_above[t]
            h, z, f, c = H[t], Z[t], F[t], C[t]
            da_r = dhp * (1.0 - z) * (1.0 - c * c)
            dfh = da_r @ layer.U_r
            da_zf = dA_zf[t]
            da_zf[:, :n] = dhp * (h - c) * z * (1.0 - z)
            da_zf[:, n:] = dfh * h * f * (1.0 - f)
            dA_r[t] = da_r
            carry = dhp * z + dfh * f + da_zf @ Uzf
            d_v[t] = da_r @ layer.W_r + da_zf @ Wzf
        if param_grads:
            Vf = V.reshape(T * B, -1)
            Hf = H[:-1].reshape(T * B, n)
            FHf = (F * H[:-1]).reshape(T * B, n)
            Azf = dA_zf.reshape(T * B, 2 * n)
            Ar = dA_r.reshape(T * B, n)
            gW = Azf.T @ Vf
            gU = Azf.T @ Hf
            gb = Azf.sum(axis=0)
            grads.append([gW[:n], gU[:n], gb[:n], gW[n:], gU[n:], gb[n:],
                          Ar.T @ Vf, Ar.T @ FHf, Ar.sum(axis=0)])
        d_above = d_v
    d_inputs = d_above.transpose(1, 0, 2)
    if not param_grads:
        return None, d_inputs
    arrays = []
    for g in reversed(grads):
        arrays.extend(g)
    Yf = d_y.reshape(T * B, -1)
    arrays.append(Yf.T @ h_last.reshape(T * B, -1))
    arrays.append(Yf.sum(axis=0))
    return GradientSet(arrays, net.param_names()), d_inputs


# --- losses -----------------------------------------------------------------

def _values(x) -> np.ndarray:
    return np.asarray(getattr(x, "outputs", x), dtype=np.float64)


def mse_washout(predicted, measured, washout: int) -> float:
    """Mean over steps ``washout..T-1`` of the squared output error norm.

    Accepts ``Trajectory`` objects or ``(T, p)`` arrays.
    """
    yp, ym = _values(predicted), _values(measured)
    if yp.shape != ym.shape:
        raise ValueError(f"length/shape mismatch: {yp.shape} vs {ym.shape}")
    T = len(yp)
    if not 0 <= washout < T:
        raise ValueError(f"washout {washout} must be below the sequence length {T}")
    d = yp[washout:] - ym[washout:]
    return float(np.sum(d * d) / (T - washout))


def _batch_mse(pred: np.ndarray, target: np.ndarray, washout: int):
    """Sum over the batch of per-sequence washout MSE, and its gradient."""
    T = pred.shape[1]
    diff = pred - target
    diff[:, :washout] = 0.0
    loss = float(np.sum(diff * diff) / (T - washout))
    return loss, (2.0 / (T - washout)) * diff


def stability_penalty(net: GruNetwork, margin: float, slope: float, with_grad: bool = True):
    """Total penalty over layers and (optionally) its subgradient as a GradientSet."""
    total = 0.0
    grads = GradientSet.zeros_like(net) if with_grad else None
    for l, layer in enumerate(net.layers):
        nu = delta_iss_residual(layer)
        total += penalty(nu, margin, slope)
        k = penalty_slope(nu, margin, slope)
        if with_grad and k:
            rg = residual_gradient(layer)
            for j, name in enumerate(PARAM_NAMES):
                grads.arrays[9 * l + j] += k * rg[name]
    return total, grads


def random_states(net: GruNetwork, batch: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, (batch, net.state_dim))


def model_loss(net: GruNetwork, inputs: np.ndarray, targets: np.ndarray, cfg: "TrainConfig",
               h0: np.ndarray | None = None, rng: np.random.Generator | None = None,
               mse_weight: float = 1.0):
    """Identification loss: summed washout MSE of the free-run prediction plus the δISS penalty.

    Initial states are ``h0`` if given, otherwise drawn uniformly from the
    unit box with ``rng`` (zeros when neither is given).
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if h0 is None and rng is not None:
        h0 = random_states(net, len(inputs), rng)
    pred, cache = forward(net, inputs, h0)
    mse, d_pred = _batch_mse(pred, targets, cfg.washout)
    if not math.isfinite(mse):
        raise TrainingDiverged(
            "model loss is not finite; lower the learning rate or tighten gradient clipping")
    grads, _ = backward(net, cache, mse_weight * d_pred)
    pen, pen_grads = stability_penalty(net, cfg.margin, cfg.slope)
    grads += pen_grads
    return mse_weight * mse + pen, grads


def controller_loss(ctrl: GruNetwork, model: GruNetwork, references: np.ndarray, cfg: "TrainConfig"):
    """Nominal tracking loss of controller and frozen model in series, plus the controller penalty.

    Both networks start from the zero state; gradients reach the controller
    through the model's input sensitivities, the model weights get none.
    """
    references = np.asarray(references, dtype=np.float64)
    if ctrl.output_dim != model.input_dim:
        raise ValueError(f"controller output dim {ctrl.output_dim} != model input dim {model.input_dim}")
    if references.shape[-1] != ctrl.input_dim or model.output_dim != ctrl.input_dim:
        raise ValueError("reference width must match controller input and model output")
    u, c_cache = forward(ctrl, references)
    y, m_cache = forward(model, u)
    mse, d_y = _batch_mse(y, references, cfg.washout)
    if not math.isfinite(mse):
        raise TrainingDiverged(
            "controller loss is not finite; lower the learning rate or tighten gradient clipping")
    _, d_u = backward(model, m_cache, d_y, param_grads=False)
    grads, _ = backward(ctrl, c_cache, d_u)
    pen, pen_grads = stability_penalty(ctrl, cfg.margin, cfg.slope)
    grads += pen_grads
    return mse + pen, grads


# --- optimizer --------------------------------------------------------------

@dataclass
class RMSPropState:
    cache: list[np.ndarray]

    @classmethod
    def zeros_like(cls, net: GruNetwork) -> "RMSPropState":
        return cls([np.zeros_like(a) for a in net.params()])


def rmsprop_step(weights: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: RMSPropState,
                 lr: float, decay: float = 0.9, eps: float = 1e-8):
    """One RMSProp update; returns the new weight list and mutates ``state`` in place."""
    new = []
    for j, (w, g) in enumerate(zip(weights, grads)):
        if np.shape(w) != np.shape(g):
            raise ValueError(f"gradient {j} has shape {np.shape(g)}, weight has {np.shape(w)}")
        cache = decay * state.cache[j] + (1.0 - decay) * g * g
        state.cache[j] = cache
        new.append(w - lr * g / (np.sqrt(cache) + eps))
    return new, state


# --- training loop ----------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    decay: float = 0.9
    eps: float = 1e-8
    washout: int = 50
    max_epochs: int = 1000
    patience: int = 20
    margin: float = -0.05
    slope: float = 10.0
    clip_norm: float = 10.0
    seed: int = 0
    require_certified: bool = True  # only epochs meeting the margin can become "best"

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.margin >= 0 or self.slope <= 0:
            raise ValueError("penalty needs margin < 0 and slope > 0")
        if self.batch_size < 1 or self.washout < 0:
            raise ValueError("batch_size must be >= 1 and washout >= 0")
        if not self.lr > 0 or not 0 <= self.decay < 1 or self.max_epochs < 0:
            raise ValueError("lr must be positive, decay in [0, 1) and max_epochs >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    residuals: list[list[float]] = field(default_factory=list)
    initial_val_mse: float = float("nan")
    best_epoch: int = 0
    best_val_mse: float = float("inf")
    stopping_epoch: int = 0
    stop_reason: str = ""
    clip_events: int = 0
    certificate: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def validation_mse(net: GruNetwork, data, loss: str, washout: int,
                   model: GruNetwork | None = None) -> float:
    """Mean washout MSE over a validation set, zero initial states, no penalty."""
    if loss == "model":
        u, y = data
        pred, _ = forward(net, u)
        return _batch_mse(pred, np.asarray(y), washout)[0] / len(u)
    refs = np.asarray(data)
    u, _ = forward(net, refs)
    y, _ = forward(model, u)
    return _batch_mse(y, refs, washout)[0] / len(refs)


def _n_sequences(data, loss: str) -> int:
    return len(data[0]) if loss == "model" else len(data)


def _batch(data, idx, loss: str):
    if loss == "model":
        return np.asarray(data[0])[idx], np.asarray(data[1])[idx]
    return np.asarray(data)[idx]


def train(net: GruNetwork, dataset, validation, cfg: TrainConfig, loss: str = "model",
          model: GruNetwork | None = None,
          val_metric: Callable[[GruNetwork], float] | None = None,
          progress: Callable[[str], None] | None = None) -> tuple[GruNetwork, TrainReport]:
    """Minimize the selected loss with RMSProp and early stopping on validation MSE.

    ``dataset``/``validation`` are ``(inputs, targets)`` pairs of ``(N, T, .)``
    arrays for ``loss="model"`` and reference arrays ``(N, T, p)`` for
    ``loss="controller"`` (which also needs the frozen ``model``).
    Returns the best-validation network and the report.
    """
    if loss not in ("model", "controller"):
        raise ValueError(f"unknown loss selector {loss!r}")
    if loss == "controller" and model is None:
        raise ValueError("controller training needs a frozen model")
    rng = np.random.default_rng(cfg.seed)
    if val_metric is None:
        def val_metric(n):
            return validation_mse(n, validation, loss, cfg.washout, model)

    report = TrainReport()
    report.initial_val_mse = float(val_metric(net))
    state = RMSPropState.zeros_like(net)
    best, best_val = None, math.inf
    fallback, fallback_val = net, math.inf
    stale = 0
    diverging = 0
    N = _n_sequences(dataset, loss)

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(N)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, N, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if loss == "model":
                u, y = _batch(dataset, idx, loss)
                value, grads = model_loss(net, u, y, cfg, rng=rng)
            else:
                value, grads = controller_loss(net, model, _batch(dataset, idx, loss), cfg)
            if not math.isfinite(value) or not grads.is_finite():
                report.stopping_epoch = epoch
                report.stop_reason = "non-finite loss"
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}; lower the learning rate", report)
            norm = grads.global_norm()
            if norm > cfg.clip_norm:
                grads.scale(cfg.clip_norm / norm)
                report.clip_events += 1
            params, state = rmsprop_step(net.params(), grads.arrays, state, cfg.lr, cfg.decay, cfg.eps)
            net = net.with_params(params)
            epoch_loss += value
            batches += 1

        val = float(val_metric(net))
        cert = certify(net)
        report.train_loss.append(epoch_loss / batches)
        report.val_mse.append(val)
        report.residuals.append(cert.residuals)
        if progress is not None:
            progress(f"epoch {epoch:4d}  loss {epoch_loss / batches:.6g}  val {val:.6g}  "
                     f"nu {' '.join(f'{r:+.4f}' for r in cert.residuals)}")

        if val < fallback_val:
            fallback, fallback_val = net, val
        eligible = cert.satisfies(cfg.margin) or not cfg.require_certified
        if eligible and val < best_val:
            best, best_val = net, val
            report.best_epoch = epoch
            stale = 0
        elif best is not None:
            stale += 1

        if val > 10.0 * report.initial_val_mse:
            diverging += 1
            if diverging >= 5:
                report.stopping_epoch = epoch
                report.stop_reason = "diverged"
                raise TrainingDiverged(
                    f"validation MSE above 10x its initial value for 5 epochs (epoch {epoch})", report)
        else:
            diverging = 0

        if best is not None and stale >= cfg.patience:
            report.stopping_epoch = epoch
            report.stop_reason = "early stop"
            break
    else:
        report.stopping_epoch = cfg.max_epochs
        report.stop_reason = "max epochs"

    if best is None:
        log.warning("no epoch met the stability margin; returning the best unconstrained weights")
        best, best_val = fallback, fallback_val
        report.best_epoch = report.val_mse.index(fallback_val) + 1 if fallback_val < math.inf else 0
    report.best_val_mse = best_val
    report.certificate = certify(best).to_dict()
    return best, report
