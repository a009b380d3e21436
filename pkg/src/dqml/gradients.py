"""Exact derivatives of readout probabilities and the training loss.

The adjoint method runs a single reverse sweep over the deferred gate
sequence, with one diagonal projector observable per readout outcome:

    dP[y]/dtheta_k = 2 Re <lambda_k | dU_k/dtheta | psi_{k-1}>

where lambda is the observable back-propagated through the inverse gates.
Controlled rotations are differentiated directly through their gate-local
generator; the two-term parameter-shift rule is provided as an independent
oracle but is valid only for slots whose gates are plain rotations.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .circuits import (
    ModelSpec,
    ModelError,
    _bind_ops,
    _evaluate_states,
    _instance_arrays,
    _readout_onehot,
    _single,
    forward_batch,
    to_deferred,
)

FD_STEP = 1e-5


@dataclass
class GradientRecord:
    """Bundle of probability and loss derivatives at one evaluation point."""

    dP: np.ndarray  # (outcomes, d)
    dL_dtheta: np.ndarray | None = None
    dL_dw: np.ndarray | None = None


def _require_deferred(model: ModelSpec) -> ModelSpec:
    if not model.deferred:
        raise ModelError("gradients run on the deferred form; call to_deferred")
    return model


def _adjoint_sweep(ops, psi, lam, d):
    """Reverse sweep.  psi: (B, dim); lam: (K, B, dim).  Returns (K, B, d)."""
    K, B = lam.shape[0], psi.shape[0]
    jac = np.zeros((K, B, d))
    for op in reversed(ops):
        op.apply_inverse(psi)
        if op.slot is not None:
            dpsi = op.derivative_apply(psi)
            contrib = 2.0 * np.real(np.einsum("kbi,bi->kb", lam.conj(), dpsi))
            jac[:, :, op.slot] += contrib
        op.apply_inverse(lam)
    return jac


def probability_jacobian_batch(model: ModelSpec, params, instances) -> tuple:
    """Readout probabilities and their Jacobian for a batch.

    Returns (probs (B, K), jac (K, B, d)).
    """
    model = _require_deferred(model)
    params = np.asarray(params, dtype=float)
    ops = _bind_ops(model, params, instances)
    _, _, batch = _instance_arrays(model, instances)
    dim = 2**model.n_qubits
    psi = np.zeros((batch, dim), dtype=complex)
    psi[:, 0] = 1.0
    for op in ops:
        op.apply(psi)
    onehot = _readout_onehot(model.n_qubits, model.readout_qubits)
    probs = (psi.real**2 + psi.imag**2) @ onehot
    lam = psi[None, :, :] * onehot.T[:, None, :]
    jac = _adjoint_sweep(ops, psi, lam, model.param_slots)
    return probs, jac


def adjoint_gradient(model: ModelSpec, params, instance) -> np.ndarray:
    """Exact dP[y]/dtheta_i, shape (outcomes, d), for one instance."""
    _, jac = probability_jacobian_batch(model, params, _single(model, instance))
    return jac[:, 0, :]


def finite_diff_gradient(model: ModelSpec, params, instance, step: float = FD_STEP) -> np.ndarray:
    """Central-difference dP, shape (outcomes, d): verification oracle."""
    if step <= 0:
        raise ModelError("finite-difference step must be positive")
    params = np.asarray(params, dtype=float)
    d = model.param_slots
    shifts = np.repeat(params[None, :], 2 * d, axis=0)
    rows = np.arange(d)
    shifts[2 * rows, rows] += step
    shifts[2 * rows + 1, rows] -= step
    probs = forward_batch(model, shifts, _single(model, instance))
    plus, minus = probs[0::2], probs[1::2]  # (d, K)
    return (plus - minus).T / (2.0 * step)


def uncontrolled_slots(model: ModelSpec) -> list[int]:
    """Slots whose every gate occurrence is an uncontrolled rotation."""
    dm = to_deferred(model)
    bad = set()
    good = set()
    for ev in dm.events:
        if ev[0] == "gate" and ev[1].angle_slot is not None:
            (bad if ev[1].controls else good).add(ev[1].angle_slot)
    return sorted(good - bad)


def parameter_shift_gradient(model: ModelSpec, params, instance, slots=None) -> np.ndarray:
    """Two-term parameter-shift dP on the given slots (default: all
    uncontrolled ones); other columns are NaN.  Exact for rotation gates."""
    params = np.asarray(params, dtype=float)
    if slots is None:
        slots = uncontrolled_slots(model)
    slots = list(slots)
    d = model.param_slots
    shifts = np.repeat(params[None, :], 2 * len(slots), axis=0)
    for j, s in enumerate(slots):
        shifts[2 * j, s] += np.pi / 2.0
        shifts[2 * j + 1, s] -= np.pi / 2.0
    probs = forward_batch(model, shifts, _single(model, instance))
    out = np.full((probs.shape[1], d), np.nan)
    for j, s in enumerate(slots):
        out[:, s] = (probs[2 * j] - probs[2 * j + 1]) / 2.0
    return out


def _loss_terms(model, params, weights, instances, labels):
    """Shared forward pass: states, probabilities, residuals."""
    model = _require_deferred(model)
    params = np.asarray(params, dtype=float)
    weights = np.asarray(weights, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if labels.size == 0:
        raise ModelError("empty batch")
    if weights.shape != (model.n_outcomes,):
        raise ModelError(
            f"expected {model.n_outcomes} interpret weights, got {weights.shape}"
        )
    ops = _bind_ops(model, params, instances)
    _, _, batch = _instance_arrays(model, instances)
    if batch != labels.shape[0]:
        raise ModelError("labels do not match the instance batch")
    dim = 2**model.n_qubits
    psi = np.zeros((batch, dim), dtype=complex)
    psi[:, 0] = 1.0
    for op in ops:
        op.apply(psi)
    onehot = _readout_onehot(model.n_qubits, model.readout_qubits)
    probs = (psi.real**2 + psi.imag**2) @ onehot
    f_int = probs @ weights
    residual = labels - f_int
    return ops, psi, onehot, probs, f_int, residual


def loss_and_grad(model: ModelSpec, params, weights, batch) -> tuple:
    """Least-squares loss and its gradients over a batch.

    ``batch`` is (instances, labels) with labels in {-1, 1}.  The loss is
    the batch mean of (f_label - f_int)^2 with f_int the weighted readout
    probabilities; returns (loss, dL_dtheta, dL_dw).
    """
    instances, labels = batch
    loss, dtheta, dw, _ = _loss_and_grad_full(model, params, weights, instances, labels)
    return loss, dtheta, dw


def _loss_and_grad_full(model, params, weights, instances, labels):
    ops, psi, onehot, probs, f_int, residual = _loss_terms(
        model, params, weights, instances, labels
    )
    batch = probs.shape[0]
    loss = float(np.mean(residual**2))
    dw = (-2.0 / batch) * (residual @ probs)
    weights = np.asarray(weights, dtype=float)
    # per-instance diagonal observable c_n * sum_y w_y Proj_y
    coeff = (-2.0 / batch) * residual
    wbasis = onehot @ weights  # (dim,)
    lam = (psi * wbasis[None, :] * coeff[:, None])[None, :, :]
    jac = _adjoint_sweep(ops, psi, lam, model.param_slots)
    dtheta = jac[0].sum(axis=0)
    return loss, dtheta, dw, probs


def gradient_record(model: ModelSpec, params, weights, instance, label) -> GradientRecord:
    """Full derivative bundle at a single instance."""
    dP = adjoint_gradient(model, params, instance)
    loss, dtheta, dw = loss_and_grad(
        model, params, weights, (_single(model, instance), np.asarray([label]))
    )
    return GradientRecord(dP=dP, dL_dtheta=dtheta, dL_dw=dw)
