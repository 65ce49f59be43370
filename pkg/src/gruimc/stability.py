"""Sufficient δISS condition for deep GRUs, its residual and training penalty.

For each layer the residual

    nu = |U_r| (|U_f| / 4 + s_f) + (1 + p_r) / (4 (1 - s_z)) |U_z| - 1

is negative iff the layer satisfies the incremental-stability condition,
where ``|.|`` is the induced infinity norm (max absolute row sum) and

    s_z = sigmoid(|[W_z U_z b_z]|),  s_f = sigmoid(|[W_f U_f b_f]|),
    p_r = tanh(|[W_r U_r b_r]|).

A network whose every layer has ``nu < 0`` is certified δISS.  The test is
sufficient only; an uncertified network may still be stable.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit as sigmoid

from .gru import GruLayerWeights, GruNetwork

DEFAULT_MARGIN = -0.05
DEFAULT_SLOPE = 10.0


def inf_norm(*blocks: np.ndarray) -> float:
    """Infinity norm of the horizontal concatenation of ``blocks``."""
    rows = sum(np.abs(b).sum(axis=1) if b.ndim == 2 else np.abs(b) for b in blocks)
    return float(np.max(rows))


def _inf_norm_grad(*blocks: np.ndarray) -> list[np.ndarray]:
    # subgradient: sign pattern of the (first) maximizing row
    rows = sum(np.abs(b).sum(axis=1) if b.ndim == 2 else np.abs(b) for b in blocks)
    i = int(np.argmax(rows))
    grads = []
    for b in blocks:
        g = np.zeros_like(b)
        g[i] = np.sign(b[i])
        grads.append(g)
    return grads


def layer_bounds(layer: GruLayerWeights) -> tuple[float, float, float]:
    """Upper bounds ``(s_z, s_f, p_r)`` on the gate activations of a layer."""
    s_z = float(sigmoid(inf_norm(layer.W_z, layer.U_z, layer.b_z)))
    s_f = float(sigmoid(inf_norm(layer.W_f, layer.U_f, layer.b_f)))
    p_r = float(np.tanh(inf_norm(layer.W_r, layer.U_r, layer.b_r)))
    return s_z, s_f, p_r


def _residual_terms(layer: GruLayerWeights):
    s_z, s_f, p_r = layer_bounds(layer)
    R = inf_norm(layer.U_r)
    F = inf_norm(layer.U_f)
    Z = inf_norm(layer.U_z)
    lhs = R * (0.25 * F + s_f)
    rhs = 1.0 - 0.25 * (1.0 + p_r) / (1.0 - s_z) * Z
    return s_z, s_f, p_r, R, F, Z, lhs, rhs


def delta_iss_residual(layer: GruLayerWeights) -> float:
    *_, lhs, rhs = _residual_terms(layer)
    return lhs - rhs


def residual_gradient(layer: GruLayerWeights) -> dict[str, np.ndarray]:
    """Subgradient of the layer residual with respect to its nine weight arrays."""
    s_z, s_f, p_r, R, F, Z, _, _ = _residual_terms(layer)
    d_R = 0.25 * F + s_f
    d_F = 0.25 * R
    d_Z = 0.25 * (1.0 + p_r) / (1.0 - s_z)
    d_Nf = R * s_f * (1.0 - s_f)
    d_Nr = 0.25 * Z / (1.0 - s_z) * (1.0 - p_r ** 2)
    d_Nz = 0.25 * (1.0 + p_r) * Z / (1.0 - s_z) ** 2 * s_z * (1.0 - s_z)

    grads = {}
    for g, d_full, d_rec, U in (("z", d_Nz, d_Z, layer.U_z),
                                ("f", d_Nf, d_F, layer.U_f),
                                ("r", d_Nr, d_R, layer.U_r)):
        W, b = getattr(layer, f"W_{g}"), getattr(layer, f"b_{g}")
        gW, gU, gb = _inf_norm_grad(W, U, b)
        grads[f"W_{g}"] = d_full * gW
        grads[f"U_{g}"] = d_full * gU + d_rec * _inf_norm_grad(U)[0]
        grads[f"b_{g}"] = d_full * gb
    return grads


def penalty(nu: float, margin: float = DEFAULT_MARGIN, slope: float = DEFAULT_SLOPE) -> float:
    """Piecewise-linear violation cost ``slope * max(0, nu - margin)``."""
    return slope * max(0.0, nu - margin)


def penalty_slope(nu: float, margin: float = DEFAULT_MARGIN, slope: float = DEFAULT_SLOPE) -> float:
    return slope if nu > margin else 0.0


@dataclass(frozen=True)
class LayerStabilityReport:
    layer: int
    sigma_z: float
    sigma_f: float
    phi_r: float
    lhs: float
    rhs: float
    residual: float


@dataclass(frozen=True)
class StabilityCertificate:
    layers: tuple[LayerStabilityReport, ...]

    @property
    def residuals(self) -> list[float]:
        return [r.residual for r in self.layers]

    @property
    def certified(self) -> bool:
        return all(r.residual < 0 for r in self.layers)

    @property
    def margin(self) -> float:
        return min(-r.residual for r in self.layers)

    def satisfies(self, target: float) -> bool:
        """True when every residual is at or below ``target`` (a negative margin target)."""
        return all(r.residual <= target for r in self.layers)

    def format(self) -> str:
        lines = ["layer  sigma_z   sigma_f   phi_r     residual"]
        for r in self.layers:
            lines.append(f"{r.layer:>5}  {r.sigma_z:.6f}  {r.sigma_f:.6f}  {r.phi_r:.6f}  {r.residual:+.6f}")
        verdict = "CERTIFIED" if self.certified else "NOT CERTIFIED"
        lines.append(f"{verdict} (margin {self.margin:+.6f}); the condition is sufficient, not necessary")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "certified": self.certified,
            "margin": self.margin,
            "residuals": self.residuals,
            "layers": [r.__dict__ for r in self.layers],
        }


def certify(net: GruNetwork) -> StabilityCertificate:
    reports = []
    for l, layer in enumerate(net.layers):
        s_z, s_f, p_r, *_, lhs, rhs = _residual_terms(layer)
        reports.append(LayerStabilityReport(l + 1, s_z, s_f, p_r, lhs, rhs, lhs - rhs))
    return StabilityCertificate(tuple(reports))
