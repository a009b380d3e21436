"""QCNN model construction and evaluation for the four communication schemes.

A model is a symbolic gate program over one or two QPUs:

    Embedding -> Conv(L sub-layers) -> Pooling -> [Conv(L) -> Pooling]*

until one qubit per QPU survives.  Schemes differ only in how the two QPUs
interact: NO_COMM not at all, CLASSICAL_COMM through outcome-conditioned
single-qubit gates at the pooling stages, QUANTUM_COMM through two-qubit
convolutional gates across the QPU boundary.  NON_DISTRIBUTED is the
single-QPU baseline with the embedding repeated twice.

Reference circuit blocks (fixed for this package):

* embedding block: Hadamard on every qubit, then RotY(x_i) on qubit i;
* convolutional two-qubit unit on a pair (a, b): RotY(th_a) on a,
  RotY(th_b) on b, then CZ(a, b);
* pooling block: measure a; conditioned on the outcome o, RotZ(th_Z^o)
  then RotX(th_X^o) on the surviving qubit (4 slots per block).

Models come in two execution forms: the *branching* form with mid-circuit
measurements, and the *deferred* form (``to_deferred``) where every
classically conditioned gate becomes a quantum-controlled gate and all
measurements move to the end.  Both produce identical readout
distributions; gradients run on the deferred form only.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .qstate import (
    GateOp,
    PAULI,
    QStateError,
    ROTATION_KINDS,
    StateVector,
    _apply_unitary_inplace,
    branch_measure,
    measure_probabilities,
    rotation_matrix,
)

PRUNE_TOL = 1e-14

_X_MATRIX = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)


class Scheme(enum.Enum):
    NON_DISTRIBUTED = "non"
    NO_COMM = "nc"
    CLASSICAL_COMM = "cc"
    QUANTUM_COMM = "qc"


class ModelError(ValueError):
    """Raised for invalid model configurations or evaluation inputs."""


def as_scheme(value) -> Scheme:
    if isinstance(value, Scheme):
        return value
    try:
        return Scheme(str(value).lower())
    except ValueError:
        raise ModelError(f"unknown scheme {value!r}") from None


@dataclass(frozen=True)
class LayerSpec:
    """Structural summary of one layer (audit/serialization aid)."""

    kind: str  # "embedding" | "conv" | "pooling" | "dumb_pooling"
    active_qubits: tuple[tuple[int, ...], ...]
    slot_range: tuple[int, int]
    sublayers: int = 0
    alignments: tuple[str, ...] = ()


@dataclass(frozen=True)
class FeedforwardLink:
    """One measured-qubit -> target feedforward in a pooling layer.

    ``slots`` is outcome-major: the outcome-0 (RotZ, RotX) pairs first,
    then the outcome-1 pairs; standard pooling has one pair per outcome,
    dumb pooling three.
    """

    qpu: int
    measured: int
    target: int
    slots: tuple[int, ...]
    pairs: int = 1
    cross: bool = False
    stage: int = 0


# Event forms inside ModelSpec.events:
#   ("gate", GateOp)
#   ("embed_ry", qubit, attribute_index)
#   ("embed_haar", qpu_index, targets)
#   ("measure", qubit)
#   ("cond", GateOp, source_qubit, outcome)
Event = tuple


@dataclass(frozen=True, eq=False)
class ModelSpec:
    scheme: Scheme
    qubits_per_qpu: int
    n_sublayers: int
    pooling: str  # "standard" | "dumb"
    embedding: str  # "angle" | "haar"
    qpus: tuple[tuple[int, ...], ...]
    n_qubits: int
    n_attributes: int
    layers: tuple[LayerSpec, ...]
    events: tuple[Event, ...]
    param_slots: int
    measurement_schedule: tuple[tuple[int, int], ...]  # (qubit, event index)
    readout_qubits: tuple[int, ...]
    pooling_links: tuple[FeedforwardLink, ...]
    deferred: bool = False
    deferred_measured: tuple[int, ...] = ()

    @property
    def n_outcomes(self) -> int:
        return 2 ** len(self.readout_qubits)

    def outcome_keys(self) -> list[str]:
        k = len(self.readout_qubits)
        return [format(i, f"0{k}b") for i in range(2**k)]

    def qpu_of(self, qubit: int) -> int:
        for i, qpu in enumerate(self.qpus):
            if qubit in qpu:
                return i
        raise ModelError(f"qubit {qubit} not in any QPU")


# ---------------------------------------------------------------------------
# layer builders
# ---------------------------------------------------------------------------

def embedding_layer(attributes, qpus, repeats: int = 1) -> list[GateOp]:
    """Concrete embedding gates: per block, H on every qubit then RotY(x_i).

    Data angles are fixed numbers, not trainable slots, so the rotations
    are emitted as ArbitraryUnitary gates.
    """
    attributes = np.asarray(attributes, dtype=float)
    n = sum(len(q) for q in qpus)
    if attributes.shape != (repeats * n,):
        raise ModelError(
            f"expected {repeats * n} attributes, got {attributes.shape}"
        )
    gates = []
    for r in range(repeats):
        for qpu in qpus:
            for q in qpu:
                gates.append(GateOp("Hadamard", (q,)))
            for j, q in enumerate(qpu):
                idx = r * n + q  # qubit q holds attribute r*n + q
                mat = rotation_matrix("PauliRotY", attributes[idx])
                gates.append(GateOp("ArbitraryUnitary", (q,), fixed_matrix=mat))
    return gates


def haar_embedding(blocks, qpus) -> list[GateOp]:
    """Capacity-mode embedding: one fixed Haar unitary per QPU."""
    if len(blocks) != len(qpus):
        raise ModelError("need one unitary per QPU")
    gates = []
    for block, qpu in zip(blocks, qpus):
        targets = tuple(reversed(qpu))  # first target = most significant
        gates.append(GateOp("ArbitraryUnitary", targets, fixed_matrix=block))
    return gates


def _brick_pairs(active_by_qpu, alignment, scheme: Scheme):
    """Qubit pairs of one brick-wall row.

    Aligned rows pair consecutive active qubits within each QPU.  Offset
    rows shift by one and wrap: within each QPU for local schemes, across
    the QPU boundary for QUANTUM_COMM.
    """
    if alignment == "aligned":
        groups = active_by_qpu
    elif scheme is Scheme.QUANTUM_COMM:
        groups = [[q for qpu in active_by_qpu for q in qpu]]
    else:
        groups = active_by_qpu
    pairs = []
    for grp in groups:
        m = len(grp)
        if alignment == "aligned":
            pairs.extend((grp[2 * i], grp[2 * i + 1]) for i in range(m // 2))
        else:
            pairs.extend(
                (grp[(2 * i + 1) % m], grp[(2 * i + 2) % m]) for i in range(m // 2)
            )
    return pairs


def conv_sublayer(active_qubits, alignment: str, scheme, slot_base: int = 0):
    """One brick-wall row: RotY on each qubit of a pair, then CZ.

    ``active_qubits`` is grouped by QPU.  Consumes exactly one slot per
    active qubit; the slot of a qubit is ``slot_base`` plus its position
    in the flattened active list.
    """
    scheme = as_scheme(scheme)
    if alignment not in ("aligned", "offset"):
        raise ModelError(f"bad alignment {alignment!r}")
    flat = [q for qpu in active_qubits for q in qpu]
    slot_of = {q: slot_base + i for i, q in enumerate(flat)}
    gates = []
    for a, b in _brick_pairs(active_qubits, alignment, scheme):
        gates.append(GateOp("PauliRotY", (a,), angle_slot=slot_of[a]))
        gates.append(GateOp("PauliRotY", (b,), angle_slot=slot_of[b]))
        gates.append(GateOp("CZ", (b,), controls=(a,)))
    return gates


@dataclass(frozen=True)
class PoolingStage:
    events: tuple[Event, ...]
    links: tuple[FeedforwardLink, ...]
    survivors: tuple[tuple[int, ...], ...]
    n_slots: int


def pooling_layer(
    active_qubits, scheme, pooling: str = "standard", slot_base: int = 0,
    stage: int = 0,
) -> PoolingStage:
    """Measurements plus outcome-conditioned feedforward gates.

    Standard pooling measures the lower qubit of each consecutive pair and
    applies RotZ(th_Z^o), RotX(th_X^o) to the survivor (4 slots per block);
    under CLASSICAL_COMM each block also drives a 4-slot conditional pair
    on the same-position survivor of the other QPU.  Dumb pooling measures
    all but the last qubit of each QPU and applies three conditional
    RotZ/RotX pairs per outcome to the survivor (12 slots per measured
    qubit).
    """
    scheme = as_scheme(scheme)
    links: list[FeedforwardLink] = []
    slot = slot_base
    if pooling == "standard":
        for k, grp in enumerate(active_qubits):
            if len(grp) % 2:
                raise ModelError("standard pooling needs an even active count")
            for i in range(len(grp) // 2):
                links.append(
                    FeedforwardLink(
                        qpu=k, measured=grp[2 * i], target=grp[2 * i + 1],
                        slots=tuple(range(slot, slot + 4)), stage=stage,
                    )
                )
                slot += 4
        if scheme is Scheme.CLASSICAL_COMM:
            local = list(links)
            for link in local:
                other = 1 - link.qpu
                partner = [l for l in local if l.qpu == other]
                same_position = partner[[l for l in local if l.qpu == link.qpu].index(link)]
                links.append(
                    FeedforwardLink(
                        qpu=link.qpu, measured=link.measured,
                        target=same_position.target,
                        slots=tuple(range(slot, slot + 4)),
                        cross=True, stage=stage,
                    )
                )
                slot += 4
        survivors = tuple(
            tuple(grp[2 * i + 1] for i in range(len(grp) // 2))
            for grp in active_qubits
        )
    elif pooling == "dumb":
        if scheme is Scheme.CLASSICAL_COMM:
            raise ModelError("dumb pooling is not defined for classical communication")
        for k, grp in enumerate(active_qubits):
            for q in grp[:-1]:
                links.append(
                    FeedforwardLink(
                        qpu=k, measured=q, target=grp[-1],
                        slots=tuple(range(slot, slot + 12)), pairs=3,
                        stage=stage,
                    )
                )
                slot += 12
        survivors = tuple((grp[-1],) for grp in active_qubits)
    else:
        raise ModelError(f"unknown pooling {pooling!r}")

    events: list[Event] = []
    for link in links:
        if not link.cross:
            events.append(("measure", link.measured))
    for cross in (False, True):
        for link in links:
            if link.cross != cross:
                continue
            half = 2 * link.pairs
            for outcome in (0, 1):
                base = outcome * half
                for p in range(link.pairs):
                    z_slot = link.slots[base + 2 * p]
                    x_slot = link.slots[base + 2 * p + 1]
                    events.append(
                        ("cond", GateOp("PauliRotZ", (link.target,), angle_slot=z_slot),
                         link.measured, outcome)
                    )
                    events.append(
                        ("cond", GateOp("PauliRotX", (link.target,), angle_slot=x_slot),
                         link.measured, outcome)
                    )
    return PoolingStage(tuple(events), tuple(links), survivors, slot - slot_base)


def build_model(
    scheme,
    qubits_per_qpu: int = 4,
    L: int = 9,
    pooling: str = "standard",
    embedding: str = "angle",
) -> ModelSpec:
    """Assemble the full layer grammar for one scheme.

    ``L`` is the number of brick-wall sub-layers per convolutional layer,
    alternating aligned/offset starting aligned.  ``embedding`` selects
    angle encoding of data attributes or per-QPU Haar unitaries (capacity
    runs).
    """
    scheme = as_scheme(scheme)
    if qubits_per_qpu not in (2, 4):
        raise ModelError("qubits_per_qpu must be 2 or 4")
    if L < 1:
        raise ModelError("need at least one convolutional sub-layer")
    if pooling not in ("standard", "dumb"):
        raise ModelError(f"unknown pooling {pooling!r}")
    if pooling == "dumb" and scheme is Scheme.CLASSICAL_COMM:
        raise ModelError("dumb pooling is not defined for classical communication")
    if embedding not in ("angle", "haar"):
        raise ModelError(f"unknown embedding {embedding!r}")

    n_qpus = 1 if scheme is Scheme.NON_DISTRIBUTED else 2
    n = qubits_per_qpu * n_qpus
    qpus = tuple(
        tuple(range(k * qubits_per_qpu, (k + 1) * qubits_per_qpu))
        for k in range(n_qpus)
    )

    events: list[Event] = []
    layers: list[LayerSpec] = []
    links: list[FeedforwardLink] = []
    slot = 0

    if embedding == "angle":
        repeats = 2 if scheme is Scheme.NON_DISTRIBUTED else 1
        n_attributes = repeats * n
        for r in range(repeats):
            for qpu in qpus:
                for q in qpu:
                    events.append(("gate", GateOp("Hadamard", (q,))))
                for q in qpu:
                    events.append(("embed_ry", q, r * n + q))
    else:
        n_attributes = 0
        for k, qpu in enumerate(qpus):
            events.append(("embed_haar", k, tuple(reversed(qpu))))
    layers.append(
        LayerSpec("embedding", qpus, (0, 0))
    )

    active = [list(qpu) for qpu in qpus]
    stage = 0
    while max(len(a) for a in active) > 1:
        conv_start = slot
        alignments = []
        for ell in range(L):
            alignment = "aligned" if ell % 2 == 0 else "offset"
            alignments.append(alignment)
            gates = conv_sublayer(active, alignment, scheme, slot_base=slot)
            slot += sum(len(a) for a in active)
            events.extend(("gate", g) for g in gates)
        layers.append(
            LayerSpec(
                "conv", tuple(tuple(a) for a in active), (conv_start, slot),
                sublayers=L, alignments=tuple(alignments),
            )
        )
        pool = pooling_layer(active, scheme, pooling, slot_base=slot, stage=stage)
        layers.append(
            LayerSpec(
                "dumb_pooling" if pooling == "dumb" else "pooling",
                tuple(tuple(a) for a in active), (slot, slot + pool.n_slots),
            )
        )
        slot += pool.n_slots
        events.extend(pool.events)
        links.extend(pool.links)
        active = [list(s) for s in pool.survivors]
        stage += 1

    readout = tuple(a[0] for a in active)
    schedule = tuple(
        (ev[1], i) for i, ev in enumerate(events) if ev[0] == "measure"
    )
    model = ModelSpec(
        scheme=scheme,
        qubits_per_qpu=qubits_per_qpu,
        n_sublayers=L,
        pooling=pooling,
        embedding=embedding,
        qpus=qpus,
        n_qubits=n,
        n_attributes=n_attributes,
        layers=tuple(layers),
        events=tuple(events),
        param_slots=slot,
        measurement_schedule=schedule,
        readout_qubits=readout,
        pooling_links=tuple(links),
    )
    validate_model(model)
    return model


def validate_model(model: ModelSpec):
    """Check the structural invariants of a model; raises ModelError."""
    seen: dict[int, int] = {}
    for ev in model.events:
        gate = None
        if ev[0] == "gate":
            gate = ev[1]
        elif ev[0] == "cond":
            gate = ev[1]
            if model.deferred:
                raise ModelError("deferred model contains conditional events")
        elif ev[0] == "measure" and model.deferred:
            raise ModelError("deferred model contains measurements")
        if gate is not None and gate.angle_slot is not None:
            seen[gate.angle_slot] = seen.get(gate.angle_slot, 0) + 1
        if (
            gate is not None
            and not model.deferred  # the deferred form of CC has cross controls
            and ev[0] == "gate"
            and model.scheme in (Scheme.NO_COMM, Scheme.CLASSICAL_COMM)
        ):
            touched = {model.qpu_of(q) for q in gate.targets + gate.controls}
            if len(touched) > 1:
                raise ModelError("local scheme has a gate spanning QPUs")
    if sorted(seen) != list(range(model.param_slots)):
        raise ModelError("parameter slots are not exactly covered")
    if any(count != 1 for count in seen.values()):
        raise ModelError("a parameter slot is referenced more than once")


# ---------------------------------------------------------------------------
# deferred-measurement transform
# ---------------------------------------------------------------------------

def to_deferred(model: ModelSpec) -> ModelSpec:
    """Replace classically conditioned gates by quantum-controlled gates.

    Conditioned-on-1 gates gain the (not yet measured) source qubit as a
    control; conditioned-on-0 gates compile to an X-conjugated control.
    All measurements move to the end, so the result is measurement-free
    and its readout marginal equals the branching execution's distribution.
    """
    if model.deferred:
        return model
    events: list[Event] = []
    deferred_measured: list[int] = []
    i = 0
    src_events = model.events
    while i < len(src_events):
        ev = src_events[i]
        if ev[0] == "measure":
            deferred_measured.append(ev[1])
            i += 1
        elif ev[0] == "cond":
            _, gate, source, outcome = ev
            if outcome == 1:
                events.append(("gate", _with_control(gate, source)))
                i += 1
            else:
                # maximal run of consecutive on-0 conditionals from the same
                # source shares one X conjugation
                run = []
                while (
                    i < len(src_events)
                    and src_events[i][0] == "cond"
                    and src_events[i][2] == source
                    and src_events[i][3] == 0
                ):
                    run.append(src_events[i][1])
                    i += 1
                x = GateOp("ArbitraryUnitary", (source,), fixed_matrix=_X_MATRIX)
                events.append(("gate", x))
                events.extend(("gate", _with_control(g, source)) for g in run)
                events.append(("gate", x))
        else:
            events.append(ev)
            i += 1
    return replace(
        model,
        events=tuple(events),
        measurement_schedule=(),
        deferred=True,
        deferred_measured=tuple(deferred_measured),
    )


def _with_control(gate: GateOp, control: int) -> GateOp:
    return GateOp(
        gate.kind,
        gate.targets,
        gate.controls + (control,),
        angle_slot=gate.angle_slot,
        fixed_matrix=gate.fixed_matrix,
    )


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@lru_cache(maxsize=32)
def _bit_table(n: int) -> np.ndarray:
    idx = np.arange(2**n)
    return np.stack([(idx >> q) & 1 for q in range(n)])


@lru_cache(maxsize=256)
def _readout_onehot(n: int, readout: tuple[int, ...]) -> np.ndarray:
    """(dim, 2**k) selector: column y collects basis states whose readout
    bits spell y, with the first readout qubit as the most significant."""
    bits = _bit_table(n)
    k = len(readout)
    y = np.zeros(2**n, dtype=int)
    for j, q in enumerate(readout):
        y |= bits[q] << (k - 1 - j)
    onehot = np.zeros((2**n, 2**k))
    onehot[np.arange(2**n), y] = 1.0
    return onehot


class _BoundOp:
    """A gate bound to concrete parameters/instance data for fast replay."""

    __slots__ = ("mat", "targets", "controls", "slot", "kind", "ctrl_mask", "n")

    def __init__(self, mat, targets, controls, n, slot=None, kind=None):
        self.mat = mat
        self.targets = targets
        self.controls = controls
        self.slot = slot
        self.kind = kind
        self.n = n
        self.ctrl_mask = None

    def apply(self, amps):
        _apply_unitary_inplace(amps, self.mat, self.targets, self.controls, self.n)

    def apply_inverse(self, amps):
        inv = self.mat.conj().swapaxes(-1, -2)
        _apply_unitary_inplace(amps, inv, self.targets, self.controls, self.n)

    def derivative_apply(self, amps_in):
        """(-i/2) * generator * gate applied on the control-1 subspace."""
        out = amps_in.copy()
        dmat = (-0.5j) * (PAULI[self.kind] @ self.mat)
        _apply_unitary_inplace(out, dmat, self.targets, self.controls, self.n)
        if self.controls:
            if self.ctrl_mask is None:
                bits = _bit_table(self.n)
                mask = np.ones(2**self.n)
                for c in self.controls:
                    mask = mask * bits[c]
                self.ctrl_mask = mask
            out *= self.ctrl_mask
        return out


def _rotation_stack(kind: str, angles) -> np.ndarray:
    """Rotation matrices for a scalar angle or a batch of angles."""
    a = np.asarray(angles, dtype=float)
    c, s = np.cos(a / 2.0), np.sin(a / 2.0)
    m = np.zeros(a.shape + (2, 2), dtype=complex)
    if kind == "PauliRotX":
        m[..., 0, 0] = c
        m[..., 1, 1] = c
        m[..., 0, 1] = -1j * s
        m[..., 1, 0] = -1j * s
    elif kind == "PauliRotY":
        m[..., 0, 0] = c
        m[..., 1, 1] = c
        m[..., 0, 1] = -s
        m[..., 1, 0] = s
    elif kind == "PauliRotZ":
        m[..., 0, 0] = c - 1j * s
        m[..., 1, 1] = c + 1j * s
    else:
        raise ModelError(f"not a rotation kind {kind!r}")
    return m


def _instance_arrays(model: ModelSpec, instance):
    """Normalize one instance or a batch to (attrs, haar_blocks, batch)."""
    if model.embedding == "angle":
        attrs = np.asarray(instance, dtype=float)
        if attrs.ndim == 1:
            attrs = attrs[None, :]
        if attrs.shape[1] != model.n_attributes:
            raise ModelError(
                f"expected {model.n_attributes} attributes, got {attrs.shape[1]}"
            )
        return attrs, None, attrs.shape[0]
    blocks = []
    for arr in instance:
        b = np.asarray(arr, dtype=complex)
        if b.ndim == 2:
            b = b[None, :, :]
        blocks.append(b)
    if len(blocks) != len(model.qpus):
        raise ModelError("need one Haar block per QPU")
    sizes = {b.shape[0] for b in blocks}
    if len(sizes) != 1:
        raise ModelError("Haar blocks disagree on batch size")
    return None, blocks, sizes.pop()


def _bind_ops(model: ModelSpec, params, instance) -> list[_BoundOp]:
    """Bind a deferred model's events to parameters and instance data."""
    if not model.deferred:
        raise ModelError("binding requires the deferred form")
    params = np.asarray(params, dtype=float)
    if params.shape[-1] != model.param_slots:
        raise ModelError(
            f"expected {model.param_slots} parameters, got {params.shape[-1]}"
        )
    attrs, blocks, _ = _instance_arrays(model, instance)
    n = model.n_qubits
    ops = []
    for ev in model.events:
        if ev[0] == "gate":
            gate = ev[1]
            if gate.kind in ROTATION_KINDS:
                mat = _rotation_stack(gate.kind, params[..., gate.angle_slot])
                ops.append(
                    _BoundOp(mat, gate.targets, gate.controls, n,
                             slot=gate.angle_slot, kind=gate.kind)
                )
            else:
                ops.append(_BoundOp(gate.base_matrix(), gate.targets, gate.controls, n))
        elif ev[0] == "embed_ry":
            _, qubit, idx = ev
            mat = _rotation_stack("PauliRotY", attrs[:, idx])
            if mat.shape[0] == 1:
                mat = mat[0]
            ops.append(_BoundOp(mat, (qubit,), (), n))
        elif ev[0] == "embed_haar":
            _, k, targets = ev
            mat = blocks[k]
            if mat.shape[0] == 1:
                mat = mat[0]
            ops.append(_BoundOp(mat, targets, (), n))
        else:
            raise ModelError(f"cannot bind event {ev[0]!r}")
    return ops


def _evaluate_states(model: ModelSpec, params, instance) -> np.ndarray:
    """Final (batch, 2**n) amplitudes of a deferred model."""
    params = np.asarray(params, dtype=float)
    _, _, data_batch = _instance_arrays(model, instance)
    param_batch = params.shape[0] if params.ndim == 2 else 1
    batch = max(data_batch, param_batch)
    if data_batch not in (1, batch) or param_batch not in (1, batch):
        raise ModelError("instance and parameter batch sizes do not broadcast")
    amps = np.zeros((batch, 2**model.n_qubits), dtype=complex)
    amps[:, 0] = 1.0
    for op in _bind_ops(model, params, instance):
        op.apply(amps)
    return amps


def forward_batch(model: ModelSpec, params, instances) -> np.ndarray:
    """Readout distributions for a batch: (batch, n_outcomes) array.

    The model may be in either form; branching models are deferred
    internally (cached on first use is the caller's concern).
    """
    dm = model if model.deferred else to_deferred(model)
    amps = _evaluate_states(dm, params, instances)
    probs = amps.real**2 + amps.imag**2
    onehot = _readout_onehot(dm.n_qubits, dm.readout_qubits)
    return probs @ onehot


def forward(model: ModelSpec, params, instance) -> dict:
    """Readout probability map for one instance.

    Keys are readout bitstrings with one character per QPU, the first
    QPU's outcome first.  Branching models are executed by exhaustive
    branch enumeration; deferred models by a single statevector run.
    """
    params = np.asarray(params, dtype=float)
    if params.shape != (model.param_slots,):
        raise ModelError(
            f"expected {model.param_slots} parameters, got {params.shape}"
        )
    if model.deferred:
        p = forward_batch(model, params, _single(model, instance))[0]
    else:
        p = _run_branching(model, params, instance)
    return dict(zip(model.outcome_keys(), (float(x) for x in p)))


def _single(model: ModelSpec, instance):
    if model.embedding == "angle":
        return np.asarray(instance, dtype=float)[None, :]
    return [np.asarray(b, dtype=complex)[None, :, :] for b in instance]


def _run_branching(model: ModelSpec, params, instance) -> np.ndarray:
    """Exhaustive mid-circuit branch enumeration; returns outcome probs."""
    attrs, blocks, batch = _instance_arrays(model, instance)
    if batch != 1:
        raise ModelError("branching execution takes a single instance")
    n = model.n_qubits
    amps0 = np.zeros(2**n, dtype=complex)
    amps0[0] = 1.0
    # branch: (prob, outcomes {qubit: bit}, amps, layout)
    branches = [(1.0, {}, amps0, list(range(n)))]
    for ev in model.events:
        if ev[0] == "measure":
            qubit = ev[1]
            new = []
            for prob, outcomes, amps, layout in branches:
                pos = layout.index(qubit)
                state = StateVector(len(layout), amps)
                b0, b1 = branch_measure(state, pos)
                rest = [q for q in layout if q != qubit]
                for br in (b0, b1):
                    if br.post_state is None:
                        continue
                    new.append(
                        (prob * br.probability,
                         {**outcomes, qubit: br.outcome_bits[pos]},
                         br.post_state.amplitudes.copy(), list(rest))
                    )
            branches = new
            continue
        if ev[0] == "cond":
            _, gate, source, outcome = ev
            out = []
            for prob, outcomes, amps, layout in branches:
                if outcomes[source] == outcome:
                    amps = amps.copy()
                    g = _localize(gate, layout)
                    mat = g.base_matrix(params)
                    _apply_unitary_inplace(amps, mat, g.targets, g.controls, len(layout))
                out.append((prob, outcomes, amps, layout))
            branches = out
            continue
        for i, (prob, outcomes, amps, layout) in enumerate(branches):
            m = len(layout)
            if ev[0] == "gate":
                g = _localize(ev[1], layout)
                mat = g.base_matrix(params)
                _apply_unitary_inplace(amps, mat, g.targets, g.controls, m)
            elif ev[0] == "embed_ry":
                _, qubit, idx = ev
                mat = rotation_matrix("PauliRotY", attrs[0, idx])
                _apply_unitary_inplace(amps, mat, (layout.index(qubit),), (), m)
            elif ev[0] == "embed_haar":
                _, k, targets = ev
                pos = tuple(layout.index(q) for q in targets)
                _apply_unitary_inplace(amps, blocks[k][0], pos, (), m)

    keys = model.outcome_keys()
    total = np.zeros(len(keys))
    for prob, outcomes, amps, layout in branches:
        state = StateVector(len(layout), amps)
        pos = [layout.index(q) for q in model.readout_qubits]
        marg = measure_probabilities(state, pos)
        for y, key in enumerate(keys):
            total[y] += prob * marg[key]
    return total


def _localize(gate: GateOp, layout) -> GateOp:
    if layout == list(range(len(layout))):
        return gate
    return GateOp(
        gate.kind,
        tuple(layout.index(q) for q in gate.targets),
        tuple(layout.index(q) for q in gate.controls),
        angle_slot=gate.angle_slot,
        fixed_matrix=gate.fixed_matrix,
    )


# ---------------------------------------------------------------------------
# parameter embeddings between schemes
# ---------------------------------------------------------------------------

def cross_link_slots(model: ModelSpec) -> list[int]:
    """Slots belonging to cross-QPU feedforward links, ascending."""
    slots = []
    for link in model.pooling_links:
        if link.cross:
            slots.extend(link.slots)
    return sorted(slots)


def embed_params_nc_to_cc(cc_model: ModelSpec, params_nc) -> np.ndarray:
    """Map no-communication parameters into the CC slot layout.

    Cross-link slots are set to zero; the CC model then reproduces the NC
    model pointwise.  Works because both schemes allocate the shared slots
    in the same order.
    """
    params_nc = np.asarray(params_nc, dtype=float)
    cross = set(cross_link_slots(cc_model))
    if len(params_nc) != cc_model.param_slots - len(cross):
        raise ModelError("parameter count does not match the shared slots")
    out = np.zeros(cc_model.param_slots)
    shared = [s for s in range(cc_model.param_slots) if s not in cross]
    out[shared] = params_nc
    return out


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _gate_to_dict(gate: GateOp) -> dict:
    doc = {
        "kind": gate.kind,
        "targets": list(gate.targets),
        "controls": list(gate.controls),
    }
    if gate.angle_slot is not None:
        doc["angle_slot"] = gate.angle_slot
    if gate.fixed_matrix is not None:
        doc["matrix"] = [
            [[float(z.real), float(z.imag)] for z in row]
            for row in gate.fixed_matrix
        ]
    return doc


def _gate_from_dict(doc: dict) -> GateOp:
    matrix = None
    if "matrix" in doc:
        matrix = np.array(
            [[complex(re, im) for re, im in row] for row in doc["matrix"]]
        )
    return GateOp(
        doc["kind"],
        tuple(doc["targets"]),
        tuple(doc["controls"]),
        angle_slot=doc.get("angle_slot"),
        fixed_matrix=matrix,
    )


def _event_to_dict(ev: Event) -> dict:
    if ev[0] == "gate":
        return {"type": "gate", "gate": _gate_to_dict(ev[1])}
    if ev[0] == "embed_ry":
        return {"type": "embed_ry", "qubit": ev[1], "attribute": ev[2]}
    if ev[0] == "embed_haar":
        return {"type": "embed_haar", "qpu": ev[1], "targets": list(ev[2])}
    if ev[0] == "measure":
        return {"type": "measure", "qubit": ev[1]}
    if ev[0] == "cond":
        return {
            "type": "cond", "gate": _gate_to_dict(ev[1]),
            "source": ev[2], "outcome": ev[3],
        }
    raise ModelError(f"unknown event {ev[0]!r}")


def _event_from_dict(doc: dict) -> Event:
    t = doc["type"]
    if t == "gate":
        return ("gate", _gate_from_dict(doc["gate"]))
    if t == "embed_ry":
        return ("embed_ry", doc["qubit"], doc["attribute"])
    if t == "embed_haar":
        return ("embed_haar", doc["qpu"], tuple(doc["targets"]))
    if t == "measure":
        return ("measure", doc["qubit"])
    if t == "cond":
        return ("cond", _gate_from_dict(doc["gate"]), doc["source"], doc["outcome"])
    raise ModelError(f"unknown event type {t!r}")


def model_to_json(model: ModelSpec) -> str:
    doc = {
        "scheme": model.scheme.value,
        "qubits_per_qpu": model.qubits_per_qpu,
        "n_sublayers": model.n_sublayers,
        "pooling": model.pooling,
        "embedding": model.embedding,
        "qpus": [list(q) for q in model.qpus],
        "n_qubits": model.n_qubits,
        "n_attributes": model.n_attributes,
        "param_slots": model.param_slots,
        "readout_qubits": list(model.readout_qubits),
        "deferred": model.deferred,
        "deferred_measured": list(model.deferred_measured),
        "measurement_schedule": [list(x) for x in model.measurement_schedule],
        "layers": [
            {
                "kind": layer.kind,
                "active_qubits": [list(a) for a in layer.active_qubits],
                "slot_range": list(layer.slot_range),
                "sublayers": layer.sublayers,
                "alignments": list(layer.alignments),
            }
            for layer in model.layers
        ],
        "pooling_links": [
            {
                "qpu": link.qpu,
                "measured": link.measured,
                "target": link.target,
                "slots": list(link.slots),
                "pairs": link.pairs,
                "cross": link.cross,
                "stage": link.stage,
            }
            for link in model.pooling_links
        ],
        "events": [_event_to_dict(ev) for ev in model.events],
    }
    return json.dumps(doc)


def model_from_json(doc: str) -> ModelSpec:
    data = json.loads(doc)
    model = ModelSpec(
        scheme=Scheme(data["scheme"]),
        qubits_per_qpu=data["qubits_per_qpu"],
        n_sublayers=data["n_sublayers"],
        pooling=data["pooling"],
        embedding=data["embedding"],
        qpus=tuple(tuple(q) for q in data["qpus"]),
        n_qubits=data["n_qubits"],
        n_attributes=data["n_attributes"],
        layers=tuple(
            LayerSpec(
                kind=l["kind"],
                active_qubits=tuple(tuple(a) for a in l["active_qubits"]),
                slot_range=tuple(l["slot_range"]),
                sublayers=l["sublayers"],
                alignments=tuple(l["alignments"]),
            )
            for l in data["layers"]
        ),
        events=tuple(_event_from_dict(e) for e in data["events"]),
        param_slots=data["param_slots"],
        measurement_schedule=tuple(tuple(x) for x in data["measurement_schedule"]),
        readout_qubits=tuple(data["readout_qubits"]),
        pooling_links=tuple(
            FeedforwardLink(
                qpu=l["qpu"], measured=l["measured"], target=l["target"],
                slots=tuple(l["slots"]), pairs=l["pairs"], cross=l["cross"],
                stage=l["stage"],
            )
            for l in data["pooling_links"]
        ),
        deferred=data["deferred"],
        deferred_measured=tuple(data["deferred_measured"]),
    )
    validate_model(model)
    return model
