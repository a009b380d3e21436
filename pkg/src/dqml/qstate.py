"""Dense statevector simulation for small qubit registers.

Conventions used throughout the package:

* Qubit 0 is the least significant bit of the basis index, so the basis
  state |q_{n-1} ... q_1 q_0> lives at index sum_k q_k * 2**k.
* Full-register bitstrings are rendered most-significant qubit first,
  i.e. ``format(index, f"0{n}b")``.
* Probability maps over a subset of qubits are keyed by bitstrings whose
  k-th character is the outcome of the k-th qubit *in the order requested*.
* Operations return new states; an amplitude buffer is never mutated after
  it has been handed to a StateVector.
* All randomness flows through an explicitly passed
  ``numpy.random.Generator``; there is no ambient global randomness.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import cos, sin

import numpy as np

MAX_QUBITS = 10
MAX_HAAR_QUBITS = 5

#: squared-amplitude threshold below which a measurement branch is pruned
PRUNE_TOL = 1e-14

GATE_KINDS = (
    "PauliRotX",
    "PauliRotY",
    "PauliRotZ",
    "Hadamard",
    "CZ",
    "CNOT",
    "ArbitraryUnitary",
)
ROTATION_KINDS = ("PauliRotX", "PauliRotY", "PauliRotZ")

_H = np.array([[1.0, 1.0], [1.0, -1.0]], dtype=complex) / np.sqrt(2.0)
_X = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
_Z = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)
PAULI = {
    "PauliRotX": _X,
    "PauliRotY": np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex),
    "PauliRotZ": _Z,
}


class QStateError(ValueError):
    """Raised for invalid gates, indices, or malformed states."""


def rotation_matrix(kind: str, angle: float) -> np.ndarray:
    """2x2 matrix of exp(-i * angle/2 * P) for P in {X, Y, Z}."""
    c, s = cos(angle / 2.0), sin(angle / 2.0)
    if kind == "PauliRotX":
        return np.array([[c, -1j * s], [-1j * s, c]])
    if kind == "PauliRotY":
        return np.array([[c, -s], [s, c]], dtype=complex)
    if kind == "PauliRotZ":
        return np.array([[c - 1j * s, 0.0], [0.0, c + 1j * s]])
    raise QStateError(f"not a rotation kind: {kind}")


@dataclass(frozen=True, eq=False)
class GateOp:
    """A single gate: unitary on ``targets``, gated by ``controls`` (on 1).

    Carries either an ``angle_slot`` (parameterized rotations) or a
    ``fixed_matrix`` (ArbitraryUnitary), never both.  For CNOT/CZ the Pauli
    acts on the single target and the control qubit goes in ``controls``.
    """

    kind: str
    targets: tuple[int, ...]
    controls: tuple[int, ...] = ()
    angle_slot: int | None = None
    fixed_matrix: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in GATE_KINDS:
            raise QStateError(f"unknown gate kind {self.kind!r}")
        object.__setattr__(self, "targets", tuple(self.targets))
        object.__setattr__(self, "controls", tuple(self.controls))
        tset, cset = set(self.targets), set(self.controls)
        if not self.targets or len(tset) != len(self.targets):
            raise QStateError("targets must be nonempty and distinct")
        if len(cset) != len(self.controls):
            raise QStateError("controls must be distinct")
        if tset & cset:
            raise QStateError("controls overlap targets")
        if self.angle_slot is not None and self.fixed_matrix is not None:
            raise QStateError("gate carries both angle_slot and fixed_matrix")
        if self.kind in ROTATION_KINDS:
            if self.angle_slot is None:
                raise QStateError(f"{self.kind} requires an angle_slot")
            if len(self.targets) != 1:
                raise QStateError("rotations act on one target")
        elif self.kind == "ArbitraryUnitary":
            if self.fixed_matrix is None:
                raise QStateError("ArbitraryUnitary requires fixed_matrix")
            dim = 2 ** len(self.targets)
            m = np.asarray(self.fixed_matrix, dtype=complex)
            if m.shape != (dim, dim):
                raise QStateError(f"matrix shape {m.shape} != ({dim}, {dim})")
            if np.max(np.abs(m.conj().T @ m - np.eye(dim))) > 1e-10:
                raise QStateError("fixed_matrix is not unitary")
            m = m.copy()
            m.flags.writeable = False
            object.__setattr__(self, "fixed_matrix", m)
        else:  # Hadamard, CZ, CNOT
            if self.angle_slot is not None or self.fixed_matrix is not None:
                raise QStateError(f"{self.kind} takes no parameters")
            if len(self.targets) != 1:
                raise QStateError(f"{self.kind} acts on one target")
            if self.kind in ("CZ", "CNOT") and not self.controls:
                raise QStateError(f"{self.kind} requires a control qubit")

    def base_matrix(self, angles=None) -> np.ndarray:
        """Matrix on the targets (controls handled by the applicator)."""
        if self.kind in ROTATION_KINDS:
            if angles is None or self.angle_slot >= len(angles):
                raise QStateError(f"parameter slot {self.angle_slot} unresolvable")
            return rotation_matrix(self.kind, float(angles[self.angle_slot]))
        if self.kind == "Hadamard":
            return _H
        if self.kind == "CZ":
            return _Z
        if self.kind == "CNOT":
            return _X
        return self.fixed_matrix


class StateVector:
    """Dense state on ``n_qubits`` qubits; amplitudes are read-only."""

    __slots__ = ("n_qubits", "amplitudes")

    def __init__(self, n_qubits: int, amplitudes: np.ndarray):
        if not 1 <= n_qubits <= MAX_QUBITS:
            raise QStateError(f"n_qubits must be in 1..{MAX_QUBITS}")
        amps = np.asarray(amplitudes, dtype=complex)
        if amps.shape != (2**n_qubits,):
            raise QStateError(f"need {2**n_qubits} amplitudes, got {amps.shape}")
        norm = np.linalg.norm(amps)
        if abs(norm - 1.0) > 1e-9:
            raise QStateError(f"state norm {norm} is not 1")
        amps = amps.copy()
        amps.flags.writeable = False
        object.__setattr__(self, "n_qubits", n_qubits)
        object.__setattr__(self, "amplitudes", amps)

    def __setattr__(self, name, value):
        raise AttributeError("StateVector is immutable")

    def __repr__(self):
        return f"StateVector(n_qubits={self.n_qubits})"

    @classmethod
    def zero_state(cls, n_qubits: int) -> "StateVector":
        amps = np.zeros(2**n_qubits, dtype=complex)
        amps[0] = 1.0
        return cls(n_qubits, amps)

    @classmethod
    def basis_state(cls, n_qubits: int, index: int) -> "StateVector":
        amps = np.zeros(2**n_qubits, dtype=complex)
        amps[index] = 1.0
        return cls(n_qubits, amps)

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def probabilities(self) -> np.ndarray:
        a = self.amplitudes
        return a.real**2 + a.imag**2

    def to_json(self) -> str:
        """Debug dump: {"n_qubits": k, "amplitudes": [[re, im], ...]}."""
        pairs = [[float(a.real), float(a.imag)] for a in self.amplitudes]
        return json.dumps({"n_qubits": self.n_qubits, "amplitudes": pairs})

    @classmethod
    def from_json(cls, doc: str) -> "StateVector":
        data = json.loads(doc)
        amps = np.array([complex(re, im) for re, im in data["amplitudes"]])
        return cls(data["n_qubits"], amps)


@dataclass(frozen=True)
class Branch:
    """One outcome of a mid-circuit measurement.

    ``post_state`` lives on the surviving n-1 qubits (the measured qubit is
    removed; survivors keep their relative order, so a qubit above the
    measured index shifts down by one).  A branch with probability below
    PRUNE_TOL carries ``post_state=None``.
    """

    outcome_bits: dict
    probability: float
    post_state: StateVector | None


# ---------------------------------------------------------------------------
# kernels: operate on (..., 2**n) buffers in place; leading axes are batch
# ---------------------------------------------------------------------------

def _apply_unitary_inplace(amps, mat, targets, controls, n):
    """Apply ``mat`` on the target qubits, restricted to controls all = 1.

    ``amps``: (..., 2**n) complex, modified in place.  ``mat`` is
    (2**k, 2**k) or batched (B, 2**k, 2**k) with B equal to the single
    leading batch axis.  The first listed target is the most significant
    bit of the gate's local index.
    """
    lead = amps.ndim - 1
    view = amps.reshape(amps.shape[:-1] + (2,) * n)

    def axis(q):
        return lead + (n - 1 - q)

    sel = [slice(None)] * view.ndim
    for c in controls:
        sel[axis(c)] = 1
    sub = view[tuple(sel)]
    ctrl_axes = sorted(axis(c) for c in controls)
    t_axes = []
    for q in targets:
        a = axis(q)
        t_axes.append(a - sum(1 for c in ctrl_axes if c < a))
    k = len(targets)
    moved = np.moveaxis(sub, t_axes, range(sub.ndim - k, sub.ndim))
    head = moved.shape[:-k]
    blk = np.ascontiguousarray(moved).reshape(head + (2**k,))
    if mat.ndim == 3:
        out = np.einsum("bij,b...j->b...i", mat, blk)
    else:
        out = blk @ mat.T
    moved[...] = out.reshape(moved.shape)


def _apply_diag_inplace(amps, diag):
    """Multiply by a diagonal, broadcast over leading batch axes."""
    amps *= diag


def _check_gate_indices(gate: GateOp, n: int):
    for q in gate.targets + gate.controls:
        if not 0 <= q < n:
            raise QStateError(f"qubit index {q} out of range for {n} qubits")


def apply_gate(state: StateVector, gate: GateOp, angles=None) -> StateVector:
    """Unitary action of ``gate`` on ``state``; returns a new state."""
    _check_gate_indices(gate, state.n_qubits)
    mat = gate.base_matrix(angles)
    amps = state.amplitudes.copy()
    _apply_unitary_inplace(amps, mat, gate.targets, gate.controls, state.n_qubits)
    return StateVector(state.n_qubits, amps)


def measure_probabilities(state: StateVector, qubits) -> dict:
    """Outcome distribution over the listed qubits.

    Keys are bitstrings whose k-th character is the outcome of
    ``qubits[k]``.  Values are nonnegative and sum to 1 within 1e-12.
    """
    qubits = list(qubits)
    n = state.n_qubits
    if len(set(qubits)) != len(qubits):
        raise QStateError("duplicate qubit index")
    for q in qubits:
        if not 0 <= q < n:
            raise QStateError(f"qubit index {q} out of range")
    k = len(qubits)
    p = state.probabilities().reshape((2,) * n)
    keep = [n - 1 - q for q in qubits]
    other = tuple(a for a in range(n) if a not in set(keep))
    m = p.sum(axis=other) if other else p
    order = sorted(keep)
    perm = [order.index(a) for a in keep]
    m = m.transpose(perm).reshape(-1)
    return {format(i, f"0{k}b"): float(m[i]) for i in range(2**k)}


def branch_measure(state: StateVector, qubit: int) -> tuple[Branch, Branch]:
    """Both branches of measuring one qubit.

    Post-states are renormalized on the surviving n-1 qubits; a branch with
    probability < PRUNE_TOL is flagged with probability 0 and no state.
    """
    n = state.n_qubits
    if not 0 <= qubit < n:
        raise QStateError(f"qubit index {qubit} out of range")
    axis = n - 1 - qubit
    t = state.amplitudes.reshape((2,) * n)
    branches = []
    for outcome in (0, 1):
        sl = [slice(None)] * n
        sl[axis] = outcome
        part = t[tuple(sl)].reshape(-1)
        prob = float(np.sum(part.real**2 + part.imag**2))
        if prob < PRUNE_TOL:
            branches.append(Branch({qubit: outcome}, 0.0, None))
        elif n == 1:
            # no survivors; keep a trivial record without a post state
            branches.append(Branch({qubit: outcome}, prob, None))
        else:
            post = StateVector(n - 1, part / np.sqrt(prob))
            branches.append(Branch({qubit: outcome}, prob, post))
    return branches[0], branches[1]


def haar_unitary(n_qubits: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed unitary on ``n_qubits`` qubits.

    QR decomposition of a complex Ginibre matrix with the R diagonal's
    phases folded back in, which makes the distribution exactly invariant
    under left multiplication by any fixed unitary.
    """
    if not 1 <= n_qubits <= MAX_HAAR_QUBITS:
        raise QStateError(f"haar sampling capped at {MAX_HAAR_QUBITS} qubits")
    dim = 2**n_qubits
    z = (rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim)))
    z /= np.sqrt(2.0)
    q, r = np.linalg.qr(z)
    d = np.diag(r)
    return q * (d / np.abs(d))


def haar_state(n_qubits: int, rng: np.random.Generator) -> StateVector:
    """Haar-random pure state: a Haar unitary applied to |0...0>."""
    u = haar_unitary(n_qubits, rng)
    return StateVector(n_qubits, u[:, 0])
