"""Fisher information matrices, effective dimension, and spectrum stats.

The Fisher matrix over a Haar-embedded capacity model is

    F_ij = (1/N) sum_n sum_y p(y|x_n) d_i log p(y|x_n) d_j log p(y|x_n)

summed over readout outcomes with p below a floor skipped.  The default is
this outcome-expected form; a sampled-outcome mode (one y drawn per
instance) is available for cross-checking ranks.  Effective dimension is
the maximum numerical rank of F over random parameter sets; the spectrum
statistics accumulate the nonzero eigenvalues of many such matrices on a
log10 scale.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .circuits import ModelSpec, ModelError, build_model, to_deferred
from .datagen import haar_dataset
from .gradients import probability_jacobian_batch

RANK_TOL_REL = 1e-8
RANK_FLOOR = 1e-12
P_FLOOR = 1e-12


@dataclass
class FisherReport:
    matrix: np.ndarray  # (d, d), symmetric PSD
    rank: int
    eigenvalues: np.ndarray  # ascending
    meta: dict


@dataclass
class SpectrumStats:
    scheme: str
    sigma_log: float
    bin_edges: np.ndarray  # log10 scale, width 0.02
    counts: np.ndarray
    log10_eigenvalues: np.ndarray
    meta: dict


def fisher_matrix(
    model: ModelSpec,
    params,
    haar_inputs,
    outcome_mode: str = "expected",
    rng: np.random.Generator | None = None,
    tol_rel: float = RANK_TOL_REL,
    p_floor: float = P_FLOOR,
) -> FisherReport:
    """Fisher matrix of a capacity model over N Haar inputs.

    Only the gate parameters enter (interpret weights are no part of the
    model's probability).  ``outcome_mode="sampled"`` draws one outcome
    per instance from p(y|x) instead of summing, and needs ``rng``.
    """
    if model.embedding != "haar":
        raise ModelError("fisher_matrix expects a Haar-embedding capacity model")
    dm = to_deferred(model)
    n_inputs = np.asarray(haar_inputs[0]).shape[0]
    if n_inputs == 0:
        raise ModelError("need at least one input")
    probs, jac = probability_jacobian_batch(dm, params, haar_inputs)  # (N,K), (K,N,d)
    if outcome_mode == "expected":
        weight = np.where(probs.T > p_floor, 1.0 / np.maximum(probs.T, p_floor), 0.0)
        fmat = np.einsum("knd,kn,kne->de", jac, weight, jac) / n_inputs
    elif outcome_mode == "sampled":
        if rng is None:
            raise ModelError("sampled outcome mode needs an rng")
        cum = np.cumsum(probs, axis=1)
        draws = rng.uniform(0.0, 1.0, n_inputs)
        picks = (draws[:, None] > cum).sum(axis=1)
        rows = np.arange(n_inputs)
        p_pick = probs[rows, picks]
        scores = jac[picks, rows, :] / np.maximum(p_pick, p_floor)[:, None]
        scores[p_pick <= p_floor] = 0.0
        fmat = scores.T @ scores / n_inputs
    else:
        raise ModelError(f"unknown outcome_mode {outcome_mode!r}")
    fmat = 0.5 * (fmat + fmat.T)
    eigs = np.linalg.eigvalsh(fmat)
    rank = _rank_from_eigs(eigs, tol_rel)
    meta = {
        "scheme": model.scheme.value,
        "L": model.n_sublayers,
        "qubits_per_qpu": model.qubits_per_qpu,
        "pooling": model.pooling,
        "n_inputs": int(n_inputs),
        "outcome_mode": outcome_mode,
    }
    return FisherReport(matrix=fmat, rank=rank, eigenvalues=eigs, meta=meta)


def _rank_from_eigs(eigs: np.ndarray, tol_rel: float) -> int:
    lam_max = float(eigs[-1]) if len(eigs) else 0.0
    if lam_max <= 0.0:
        return 0
    threshold = max(tol_rel * lam_max, RANK_FLOOR)
    return int(np.sum(eigs > threshold))


def numerical_rank(fmat: np.ndarray, tol_rel: float = RANK_TOL_REL) -> int:
    """Eigenvalues above tol_rel * lambda_max (and an absolute 1e-12 floor)."""
    fmat = np.asarray(fmat, dtype=float)
    scale = max(1.0, float(np.max(np.abs(fmat))) if fmat.size else 1.0)
    if fmat.size and np.max(np.abs(fmat - fmat.T)) > 1e-9 * scale:
        raise ModelError("matrix is not symmetric within tolerance")
    eigs = np.linalg.eigvalsh(0.5 * (fmat + fmat.T))
    return _rank_from_eigs(eigs, tol_rel)


def _theta_sets(d: int, n_sets: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 2.0 * np.pi, (n_sets, d))


def effective_dimension(
    scheme,
    qubits_per_qpu: int,
    L: int,
    n_theta_sets: int = 20,
    n_inputs: int = 500,
    pooling: str = "standard",
    theta_seed: int = 0,
    data_seed: int = 0,
    tol_rel: float = RANK_TOL_REL,
) -> int:
    """Max Fisher rank over uniformly drawn parameter sets.

    The Haar inputs are drawn once from ``data_seed`` and reused across
    all parameter sets (and, by shared seeding, across schemes).
    """
    model = build_model(scheme, qubits_per_qpu, L, pooling, embedding="haar")
    dm = to_deferred(model)
    inputs = haar_dataset(n_inputs, qubits_per_qpu, np.random.default_rng(data_seed))
    best = 0
    for params in _theta_sets(dm.param_slots, n_theta_sets, theta_seed):
        report = fisher_matrix(dm, params, inputs, tol_rel=tol_rel)
        best = max(best, report.rank)
    return best


def spectrum_statistics(
    scheme,
    L: int = 4,
    n_matrices: int = 200,
    n_theta: int = 200,
    n_inputs: int = 200,
    qubits_per_qpu: int = 4,
    pooling: str = "standard",
    theta_seed: int = 0,
    data_seed: int = 0,
    tol_rel: float = RANK_TOL_REL,
    bin_width: float = 0.02,
) -> SpectrumStats:
    """Accumulated nonzero-eigenvalue spectrum over many Fisher matrices.

    One matrix per random parameter set, each estimated on the same
    ``n_inputs`` Haar states.  Nonzero means above the rank threshold of
    its own matrix.  The histogram uses log10 bins of the given width and
    ``sigma_log`` is the standard deviation of the log10 eigenvalues.
    """
    if n_theta != n_matrices:
        raise ModelError("one matrix per parameter set: n_theta must equal n_matrices")
    model = build_model(scheme, qubits_per_qpu, L, pooling, embedding="haar")
    dm = to_deferred(model)
    inputs = haar_dataset(n_inputs, qubits_per_qpu, np.random.default_rng(data_seed))
    logs = []
    for params in _theta_sets(dm.param_slots, n_matrices, theta_seed):
        report = fisher_matrix(dm, params, inputs, tol_rel=tol_rel)
        eigs = report.eigenvalues
        lam_max = eigs[-1] if len(eigs) else 0.0
        if lam_max <= 0.0:
            continue
        threshold = max(tol_rel * lam_max, RANK_FLOOR)
        logs.append(np.log10(eigs[eigs > threshold]))
    values = np.concatenate(logs) if logs else np.array([])
    if values.size:
        lo = np.floor(values.min() / bin_width) * bin_width
        hi = np.ceil(values.max() / bin_width) * bin_width
        if hi <= lo:
            hi = lo + bin_width
        edges = np.arange(lo, hi + bin_width / 2, bin_width)
        counts, _ = np.histogram(values, bins=edges)
        sigma = float(values.std())
    else:
        edges = np.array([0.0, bin_width])
        counts = np.array([0])
        sigma = 0.0
    meta = {
        "scheme": as_value(scheme),
        "L": L,
        "qubits_per_qpu": qubits_per_qpu,
        "n_matrices": n_matrices,
        "n_inputs": n_inputs,
        "theta_seed": theta_seed,
        "data_seed": data_seed,
    }
    return SpectrumStats(
        scheme=as_value(scheme),
        sigma_log=sigma,
        bin_edges=edges,
        counts=counts,
        log10_eigenvalues=values,
        meta=meta,
    )


def as_value(scheme) -> str:
    from .circuits import as_scheme

    return as_scheme(scheme).value


def report_to_json(report: FisherReport) -> str:
    import json

    return json.dumps(
        {
            "matrix": [[float(v) for v in row] for row in report.matrix],
            "rank": report.rank,
            "eigenvalues": [float(v) for v in report.eigenvalues],
            "meta": report.meta,
        }
    )
