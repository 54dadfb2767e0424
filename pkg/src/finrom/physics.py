"""Nonlinear heat-conduction physics: the temperature-dependent conductivity
law and the pointwise residual, Jacobian, and output integrands in
reference-domain form.

These scalar integrands are the definitional route; the assembly module
vectorizes the same formulas and is tested against this one.
"""

from __future__ import annotations

import warnings

import numpy as np
from numpy.polynomial import polynomial as npoly

from .errors import GeometryError

# Aluminum-alloy conductivity correlation: log10(k [W/K]) is a degree-7
# polynomial in log10(T [K]) on [1, 300] K, coefficients in ascending order
# (full precision; published tables round these to three decimals, which
# shifts k(300) by 27%). The raw polynomial dips below its 1 K value around
# 1.25 K, an artifact of the fit, so the curve is floored at k(1); the
# resulting law is nondecreasing with range [4.339, 177.770] W/K.
CONDUCTIVITY_COEFFS = (
    0.63736,
    -1.1437,
    7.4624,
    -12.6905,
    11.9165,
    -6.18721,
    1.63939,
    -0.172667,
)
_DERIV_COEFFS = npoly.polyder(CONDUCTIVITY_COEFFS)

T_MIN = 1.0
T_MAX = 300.0
K_FLOOR = float(10.0 ** npoly.polyval(0.0, CONDUCTIVITY_COEFFS))


class TemperatureClampWarning(UserWarning):
    """Temperature outside [1, 300] K was clamped before evaluating k."""


def _clamp(temperature):
    t = np.asarray(temperature, dtype=float)
    if np.any(t <= 0.0):
        raise ValueError("conductivity undefined for nonpositive temperature")
    if t.min() < T_MIN or t.max() > T_MAX:
        # constant message so the warning filter deduplicates across calls
        warnings.warn(
            "temperature outside [1, 300] K clamped in conductivity evaluation",
            TemperatureClampWarning,
            stacklevel=3,
        )
        t = np.clip(t, T_MIN, T_MAX)
    return t


def conductivity(temperature):
    """Thermal conductivity k(T) in W/K, vectorized.

    Temperatures outside [1, 300] K are clamped with a warning; nonpositive
    temperatures raise ValueError.
    """
    t = _clamp(temperature)
    k = 10.0 ** npoly.polyval(np.log10(t), CONDUCTIVITY_COEFFS)
    k = np.maximum(k, K_FLOOR)
    return float(k) if np.isscalar(temperature) else k


def conductivity_derivative(temperature):
    """dk/dT in W/K^2; zero wherever the clamp or the low-T floor is active
    (the implemented curve is flat there)."""
    t = _clamp(temperature)
    s = np.log10(t)
    k_raw = 10.0 ** npoly.polyval(s, CONDUCTIVITY_COEFFS)
    dk = k_raw * npoly.polyval(s, _DERIV_COEFFS) / t
    t_in = np.asarray(temperature, dtype=float)
    live = (t_in >= T_MIN) & (t_in <= T_MAX) & (k_raw > K_FLOOR)
    dk = np.where(live, dk, 0.0)
    return float(dk) if np.isscalar(temperature) else dk


def _map_gradients(jac_map, *ref_grads):
    """|det J| and the physical gradients J^{-T} g for each reference g."""
    j = np.asarray(jac_map, dtype=float)
    det = j[0, 0] * j[1, 1] - j[0, 1] * j[1, 0]
    if det <= 0.0:
        raise GeometryError(f"inverted element: det J = {det:.3e}")
    inv_t = np.array([[j[1, 1], -j[1, 0]], [-j[0, 1], j[0, 0]]]) / det
    return det, [inv_t @ np.asarray(g, dtype=float) for g in ref_grads]


def residual_integrand(w_val, w_grad, v_val, v_grad, source, jac_map, k_fn=None):
    """Weak-form residual density at one quadrature point.

    Returns [k(w) (J^{-T} grad w) . (J^{-T} grad v) - source * v] |det J|.
    ``k_fn`` overrides the conductivity law (test hook).
    """
    k_fn = k_fn or conductivity
    det, (gw, gv) = _map_gradients(jac_map, w_grad, v_grad)
    return (k_fn(w_val) * float(gw @ gv) - source * v_val) * det


def jacobian_integrand(w_val, w_grad, z_val, z_grad, v_val, v_grad, jac_map,
                       k_fn=None, dk_fn=None):
    """Directional derivative of the residual density in direction z."""
    k_fn = k_fn or conductivity
    dk_fn = dk_fn or conductivity_derivative
    det, (gw, gz, gv) = _map_gradients(jac_map, w_grad, z_grad, v_grad)
    return (
        dk_fn(w_val) * z_val * float(gw @ gv) + k_fn(w_val) * float(gz @ gv)
    ) * det


def output_integrand(w_val, jac_map):
    """Output density: temperature times the volume element (the system
    output is the domain integral of temperature)."""
    det, _ = _map_gradients(jac_map)
    return w_val * det
