"""Two-node execution of NC/CC models over an explicit message protocol.

Each QPU runs as an independent simulator holding only its own qubits
(never more than 16 amplitudes per live branch for a 4-qubit QPU).  At a
mid-circuit measurement the owning node splits every enumerated branch in
two and, if the outcome feeds a gate on the other node, announces both
children as ClassicalMessage frames; the receiver expands its branch tree
per announcement and applies the conditional gates on its side.  Branch
trees are enumerated exhaustively in a fixed order, so the transcript and
the final joint distribution are pure functions of (model, params,
instance); zero-probability subtrees are carried as dead tokens to keep
both nodes in lockstep and are dropped from the final ledger.

Quantum-communication models are rejected: their cross-QPU two-qubit gates
cannot be expressed as classical messages.

Wire format (little-endian), byte-exact across transports:

    u32 payload length | u32 sequence_no | u8 sender | u8 path_len |
    packed path bits | u8 outcome | f64 probability factor
"""
from __future__ import annotations

import socket
import struct
import threading
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .circuits import ModelSpec, ModelError, Scheme, _instance_arrays, _localize
from .qstate import (
    GateOp,
    StateVector,
    _apply_unitary_inplace,
    branch_measure,
    measure_probabilities,
    rotation_matrix,
)

PRUNE_TOL = 1e-14
EQUIV_TOL = 1e-10


class ProtocolError(RuntimeError):
    """Desynchronization or malformed frame: an implementation bug."""


class PartitionError(ModelError):
    """Model cannot be split into classically communicating nodes."""


@dataclass(frozen=True)
class ClassicalMessage:
    """Announcement of one measurement outcome in one sender branch.

    ``branch_path`` lists every outcome bit the sender knew before this
    measurement (its own and previously received ones, in the sender's
    local order); ``probability_factor`` is the conditional probability of
    the announced outcome in that branch (0.0 on a dead branch).
    """

    sequence_no: int
    sender: str  # "A" | "B"
    branch_path: tuple[int, ...]
    outcome_bit: int
    probability_factor: float


_SENDER_BYTE = {"A": ord("A"), "B": ord("B")}
_BYTE_SENDER = {v: k for k, v in _SENDER_BYTE.items()}


def encode_message(msg: ClassicalMessage) -> bytes:
    """Length-prefixed frame; the u32 prefix counts the payload bytes."""
    if msg.outcome_bit not in (0, 1):
        raise ProtocolError("outcome bit must be 0 or 1")
    n_bits = len(msg.branch_path)
    packed = bytearray((n_bits + 7) // 8)
    for i, bit in enumerate(msg.branch_path):
        if bit:
            packed[i // 8] |= 1 << (i % 8)
    payload = (
        struct.pack("<I", msg.sequence_no)
        + bytes([_SENDER_BYTE[msg.sender], n_bits])
        + bytes(packed)
        + bytes([msg.outcome_bit])
        + struct.pack("<d", msg.probability_factor)
    )
    return struct.pack("<I", len(payload)) + payload


def decode_message(frame: bytes) -> ClassicalMessage:
    """Inverse of encode_message; raises ProtocolError on bad frames."""
    if len(frame) < 4:
        raise ProtocolError("frame shorter than its length prefix")
    (length,) = struct.unpack_from("<I", frame, 0)
    if len(frame) != 4 + length:
        raise ProtocolError(f"frame length {len(frame) - 4} != prefix {length}")
    if length < 15:
        raise ProtocolError("payload below minimal frame size")
    (seq,) = struct.unpack_from("<I", frame, 4)
    sender_byte, n_bits = frame[8], frame[9]
    if sender_byte not in _BYTE_SENDER:
        raise ProtocolError(f"unknown sender byte {sender_byte}")
    n_path_bytes = (n_bits + 7) // 8
    if length != 15 + n_path_bytes:
        raise ProtocolError("payload size disagrees with path length")
    packed = frame[10:10 + n_path_bytes]
    path = tuple((packed[i // 8] >> (i % 8)) & 1 for i in range(n_bits))
    outcome = frame[10 + n_path_bytes]
    if outcome not in (0, 1):
        raise ProtocolError(f"bad outcome byte {outcome}")
    (factor,) = struct.unpack_from("<d", frame, 11 + n_path_bytes)
    return ClassicalMessage(seq, _BYTE_SENDER[sender_byte], path, outcome, factor)


# ---------------------------------------------------------------------------
# partitioning
# ---------------------------------------------------------------------------

# Node step forms:
#   ("gate", GateOp)                      local unitary (global labels)
#   ("embed_ry", qubit, attr_index)
#   ("embed_haar", qpu_index, targets)
#   ("measure", qubit, meas_index, send)  send=True when the peer consumes it
#   ("cond_own", GateOp, meas_index, outcome)
#   ("recv", meas_index)                  absorb the peer's announcements
#   ("cond_recv", GateOp, meas_index, outcome)


@dataclass
class NodeProgram:
    node_id: str
    qpu_index: int
    qubits: tuple[int, ...]
    readout_qubit: int
    steps: tuple = ()
    context_order: tuple[int, ...] = ()  # meas indices in local learn order
    peer_context_order: tuple[int, ...] = ()


@dataclass
class _Partition:
    node_a: NodeProgram
    node_b: NodeProgram
    message_schedule: tuple[tuple[int, str, str], ...]  # (meas_index, from, to)
    interleave: tuple[str, ...]  # global order of node step execution
    meas_order: dict  # meas_index -> global measurement position


def _partition(model: ModelSpec) -> _Partition:
    if model.deferred:
        raise PartitionError("partitioning runs on the branching form")
    if model.scheme is Scheme.QUANTUM_COMM:
        raise PartitionError(
            "quantum communication uses nonlocal two-qubit gates, which "
            "classical messages cannot implement; only NC and CC models "
            "can be partitioned"
        )
    if model.scheme is Scheme.NON_DISTRIBUTED or len(model.qpus) != 2:
        raise PartitionError("partitioning needs exactly two QPUs")

    ids = ("A", "B")
    meas_index_of = {q: i for i, (q, _) in enumerate(model.measurement_schedule)}
    # measurements whose outcome conditions a gate on the other QPU
    cross_meas = set()
    for ev in model.events:
        if ev[0] == "cond":
            _, gate, source, _ = ev
            if model.qpu_of(gate.targets[0]) != model.qpu_of(source):
                cross_meas.add(meas_index_of[source])

    steps = {"A": [], "B": []}
    context = {"A": [], "B": []}
    recv_done = {"A": set(), "B": set()}
    interleave = []
    schedule = []

    def emit(node, step):
        steps[node].append(step)
        interleave.append(node)

    for ev in model.events:
        if ev[0] == "gate":
            node = ids[model.qpu_of(ev[1].targets[0])]
            emit(node, ev)
        elif ev[0] == "embed_ry":
            emit(ids[model.qpu_of(ev[1])], ev)
        elif ev[0] == "embed_haar":
            emit(ids[ev[1]], ev)
        elif ev[0] == "measure":
            qubit = ev[1]
            node = ids[model.qpu_of(qubit)]
            idx = meas_index_of[qubit]
            send = idx in cross_meas
            emit(node, ("measure", qubit, idx, send))
            context[node].append(idx)
            if send:
                other = "B" if node == "A" else "A"
                schedule.append((idx, node, other))
        else:  # cond
            _, gate, source, outcome = ev
            node = ids[model.qpu_of(gate.targets[0])]
            src_node = ids[model.qpu_of(source)]
            idx = meas_index_of[source]
            if node == src_node:
                emit(node, ("cond_own", gate, idx, outcome))
            else:
                if idx not in recv_done[node]:
                    emit(node, ("recv", idx))
                    context[node].append(idx)
                    recv_done[node].add(idx)
                emit(node, ("cond_recv", gate, idx, outcome))

    progs = {}
    for k, node in enumerate(ids):
        other = ids[1 - k]
        progs[node] = NodeProgram(
            node_id=node,
            qpu_index=k,
            qubits=model.qpus[k],
            readout_qubit=model.readout_qubits[k],
            steps=tuple(steps[node]),
            context_order=tuple(context[node]),
            peer_context_order=tuple(context[other]),
        )
    meas_order = {idx: pos for pos, idx in enumerate(sorted(meas_index_of.values()))}
    return _Partition(
        node_a=progs["A"],
        node_b=progs["B"],
        message_schedule=tuple(schedule),
        interleave=tuple(interleave),
        meas_order=meas_order,
    )


def partition_model(model: ModelSpec):
    """Split an NC/CC model into two node programs plus the send schedule."""
    part = _partition(model)
    return part.node_a, part.node_b, part.message_schedule


# ---------------------------------------------------------------------------
# node runtime
# ---------------------------------------------------------------------------

@dataclass
class _NodeBranch:
    context: dict  # meas_index -> bit
    amps: np.ndarray | None  # None on a dead branch
    layout: list
    own_cum: float = 1.0
    recv_cum: float = 1.0

    @property
    def dead(self) -> bool:
        return self.amps is None


class QpuNode:
    """One QPU worker: local amplitudes per branch, classical I/O only."""

    def __init__(self, program: NodeProgram, params, attrs, haar_block, transport):
        self.program = program
        self.params = np.asarray(params, dtype=float)
        self.attrs = attrs
        self.haar_block = haar_block
        self.transport = transport
        n_local = len(program.qubits)
        amps = np.zeros(2**n_local, dtype=complex)
        amps[0] = 1.0
        self.branches = [_NodeBranch({}, amps, list(program.qubits))]
        self.sent: list[ClassicalMessage] = []
        self.seq = 0
        self.expect_seq = 0
        self.peak_branch_amplitudes = 2**n_local
        self.steps_done = 0

    # -- helpers ----------------------------------------------------------

    def _apply(self, branch: _NodeBranch, gate: GateOp, mat=None):
        if branch.dead:
            return
        local = _localize(gate, branch.layout)
        if mat is None:
            mat = local.base_matrix(self.params)
        _apply_unitary_inplace(
            branch.amps, mat, local.targets, local.controls, len(branch.layout)
        )

    def step_once(self):
        step = self.program.steps[self.steps_done]
        self.steps_done += 1
        kind = step[0]
        if kind == "gate":
            for br in self.branches:
                self._apply(br, step[1])
        elif kind == "embed_ry":
            _, qubit, idx = step
            mat = rotation_matrix("PauliRotY", self.attrs[idx])
            for br in self.branches:
                self._apply(br, GateOp("Hadamard", (qubit,)), mat=mat)
        elif kind == "embed_haar":
            _, _, targets = step
            gate = GateOp("ArbitraryUnitary", targets, fixed_matrix=self.haar_block)
            for br in self.branches:
                self._apply(br, gate)
        elif kind == "measure":
            self._measure(*step[1:])
        elif kind == "cond_own" or kind == "cond_recv":
            _, gate, idx, outcome = step
            for br in self.branches:
                if not br.dead and br.context[idx] == outcome:
                    self._apply(br, gate)
        elif kind == "recv":
            self._receive(step[1])
        else:
            raise ProtocolError(f"unknown step {kind!r}")

    def run(self):
        while self.steps_done < len(self.program.steps):
            self.step_once()

    def _measure(self, qubit, idx, send):
        new = []
        for br in self.branches:
            path = tuple(br.context[i] for i in self.program.context_order
                         if i in br.context)
            if br.dead:
                probs, posts = (0.0, 0.0), (None, None)
                layout = [q for q in br.layout if q != qubit]
            else:
                pos = br.layout.index(qubit)
                state = StateVector(len(br.layout), br.amps)
                b0, b1 = branch_measure(state, pos)
                probs = (b0.probability, b1.probability)
                posts = tuple(
                    None if b.post_state is None
                    else b.post_state.amplitudes.copy()
                    for b in (b0, b1)
                )
                layout = [q for q in br.layout if q != qubit]
            for outcome in (0, 1):
                child = _NodeBranch(
                    context={**br.context, idx: outcome},
                    amps=posts[outcome],
                    layout=list(layout),
                    own_cum=br.own_cum * probs[outcome],
                    recv_cum=br.recv_cum,
                )
                new.append(child)
                if send:
                    msg = ClassicalMessage(
                        sequence_no=self.seq,
                        sender=self.program.node_id,
                        branch_path=path,
                        outcome_bit=outcome,
                        probability_factor=probs[outcome],
                    )
                    self.seq += 1
                    self.sent.append(msg)
                    self.transport.send(self.program.node_id, encode_message(msg))
        self.branches = new

    def _receive(self, idx):
        order = self.program.peer_context_order
        pos = order.index(idx)
        count = 2 ** (pos + 1)
        messages = []
        for _ in range(count):
            frame = self.transport.recv(self.program.node_id)
            msg = decode_message(frame)
            if msg.sequence_no != self.expect_seq:
                raise ProtocolError(
                    f"sequence gap: got {msg.sequence_no}, expected {self.expect_seq}"
                )
            self.expect_seq += 1
            if len(msg.branch_path) != pos:
                raise ProtocolError("announcement path does not match the schedule")
            messages.append(msg)
        new = []
        for br in self.branches:
            for msg in messages:
                ctx = dict(zip(order[:pos], msg.branch_path))
                ctx[idx] = msg.outcome_bit
                if any(br.context.get(k, v) != v for k, v in ctx.items()):
                    continue
                factor = msg.probability_factor
                child = _NodeBranch(
                    context={**br.context, **ctx},
                    amps=None if (br.dead or factor < PRUNE_TOL) else br.amps.copy(),
                    layout=list(br.layout),
                    own_cum=br.own_cum,
                    recv_cum=br.recv_cum * factor,
                )
                new.append(child)
        if len(new) != 2 * len(self.branches):
            raise ProtocolError("announcements do not tile the branch tree")
        self.branches = new

    def report(self):
        """Final per-branch record: context, own probability, readout marginal."""
        out = []
        for br in self.branches:
            if br.dead:
                out.append((br.context, 0.0, None, None))
                continue
            state = StateVector(len(br.layout), br.amps)
            pos = br.layout.index(self.program.readout_qubit)
            marg = measure_probabilities(state, [pos])
            out.append((br.context, br.own_cum, (marg["0"], marg["1"]), state))
        return out


# ---------------------------------------------------------------------------
# transports
# ---------------------------------------------------------------------------

class MemoryTransport:
    """In-process byte queues; frames still pass through the codec."""

    def __init__(self):
        self.queues = {"A": deque(), "B": deque()}  # keyed by receiver

    def send(self, sender, frame: bytes):
        receiver = "B" if sender == "A" else "A"
        self.queues[receiver].append(frame)

    def recv(self, receiver) -> bytes:
        if not self.queues[receiver]:
            raise ProtocolError("read from an empty channel: schedule violation")
        return self.queues[receiver].popleft()


class SocketTransport:
    """One duplex loopback TCP connection; each node owns one end."""

    def __init__(self, conn_a: socket.socket, conn_b: socket.socket):
        self.conns = {"A": conn_a, "B": conn_b}
        self.buffers = {"A": b"", "B": b""}

    def send(self, sender, frame: bytes):
        self.conns[sender].sendall(frame)

    def _read_exact(self, receiver, n: int) -> bytes:
        buf = self.buffers[receiver]
        conn = self.conns[receiver]
        while len(buf) < n:
            chunk = conn.recv(4096)
            if not chunk:
                raise ProtocolError("peer closed the connection mid-protocol")
            buf += chunk
        self.buffers[receiver] = buf[n:]
        return buf[:n]

    def recv(self, receiver) -> bytes:
        header = self._read_exact(receiver, 4)
        (length,) = struct.unpack("<I", header)
        return header + self._read_exact(receiver, length)

    def close(self):
        for conn in self.conns.values():
            try:
                conn.close()
            except OSError:
                pass


# ---------------------------------------------------------------------------
# joint execution
# ---------------------------------------------------------------------------

@dataclass
class BranchLedger:
    """Completed joint branches and the assembled readout distribution."""

    entries: dict  # context key -> (probability, {node: StateVector | None})
    distribution: dict

    @property
    def branch_count(self) -> int:
        return len(self.entries)


@dataclass
class DistRunReport:
    distribution: dict
    ledger: BranchLedger
    transcript: tuple[ClassicalMessage, ...]
    peak_branch_amplitudes: dict
    message_count: int


def _instance_parts(model: ModelSpec, instance):
    attrs, blocks, batch = _instance_arrays(model, instance)
    if batch != 1:
        raise ModelError("distributed execution takes a single instance")
    if attrs is not None:
        return attrs[0], (None, None)
    return None, tuple(b[0] for b in blocks)


def _assemble(model: ModelSpec, part: _Partition, node_a: QpuNode, node_b: QpuNode):
    entries = {}
    dist = np.zeros(4)
    for ctx_a, p_a, marg_a, state_a in node_a.report():
        for ctx_b, p_b, marg_b, state_b in node_b.report():
            shared = ctx_a.keys() & ctx_b.keys()
            if any(ctx_a[k] != ctx_b[k] for k in shared):
                continue
            prob = p_a * p_b
            if prob < PRUNE_TOL:
                continue
            key = tuple(sorted({**ctx_a, **ctx_b}.items()))
            entries[key] = (prob, {"A": state_a, "B": state_b})
            for i in (0, 1):
                for j in (0, 1):
                    dist[2 * i + j] += prob * marg_a[i] * marg_b[j]
    keys = model.outcome_keys()
    distribution = {k: float(dist[i]) for i, k in enumerate(keys)}
    transcript = tuple(
        sorted(
            node_a.sent + node_b.sent,
            key=lambda m: (part.meas_order_of(m), m.sequence_no),
        )
    )
    return distribution, BranchLedger(entries, distribution), transcript


def _transcript_key(part: _Partition):
    sched_pos = {
        (idx, sender): pos for pos, (idx, sender, _) in enumerate(part.message_schedule)
    }

    def key(msg: ClassicalMessage):
        # a sender's announcements for one measurement share a path length
        candidates = [
            pos for (idx, sender), pos in sched_pos.items() if sender == msg.sender
        ]
        return (min(candidates), msg.sequence_no)

    return key


def run_distributed(model: ModelSpec, params, instance, transport: str = "memory",
                    port: int = 0) -> dict:
    """Joint readout distribution from the two-node protocol."""
    return run_distributed_full(model, params, instance, transport, port).distribution


def run_distributed_full(model: ModelSpec, params, instance,
                         transport: str = "memory", port: int = 0) -> DistRunReport:
    part = _partition(model)
    attrs, blocks = _instance_parts(model, instance)

    if transport == "memory":
        chan = MemoryTransport()
        node_a = QpuNode(part.node_a, params, attrs, blocks[0], chan)
        node_b = QpuNode(part.node_b, params, attrs, blocks[1], chan)
        nodes = {"A": node_a, "B": node_b}
        for nid in part.interleave:
            nodes[nid].step_once()
    elif transport == "socket":
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind(("127.0.0.1", port))
        listener.listen(1)
        actual_port = listener.getsockname()[1]
        conn_b = socket.create_connection(("127.0.0.1", actual_port))
        conn_a, _ = listener.accept()
        listener.close()
        chan = SocketTransport(conn_a, conn_b)
        node_a = QpuNode(part.node_a, params, attrs, blocks[0], chan)
        node_b = QpuNode(part.node_b, params, attrs, blocks[1], chan)
        errors = []

        def worker(node):
            try:
                node.run()
            except Exception as exc:  # pragma: no cover - surfaced below
                errors.append(exc)

        threads = [threading.Thread(target=worker, args=(n,)) for n in (node_a, node_b)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        chan.close()
        if errors:
            raise errors[0]
    else:
        raise ModelError(f"unknown transport {transport!r}")

    # deterministic transcript: sender streams merged by schedule position
    order_of = {}
    for pos, (idx, sender, _) in enumerate(part.message_schedule):
        order_of[(sender, idx)] = pos
    all_msgs = node_a.sent + node_b.sent
    pos_by_pathlen = {}
    for nid, prog in (("A", part.node_a), ("B", part.node_b)):
        sends = [i for i in prog.context_order
                 if (i, nid) in {(s[0], s[1]) for s in part.message_schedule}]
        for idx in sends:
            pos_by_pathlen[(nid, prog.context_order.index(idx))] = order_of[(nid, idx)]
    transcript = tuple(
        sorted(
            all_msgs,
            key=lambda m: (pos_by_pathlen[(m.sender, len(m.branch_path))], m.sequence_no),
        )
    )

    entries = {}
    dist = np.zeros(model.n_outcomes)
    for ctx_a, p_a, marg_a, state_a in node_a.report():
        for ctx_b, p_b, marg_b, state_b in node_b.report():
            shared = ctx_a.keys() & ctx_b.keys()
            if any(ctx_a[k] != ctx_b[k] for k in shared):
                continue
            prob = p_a * p_b
            if prob < PRUNE_TOL or marg_a is None or marg_b is None:
                continue
            key = tuple(sorted({**ctx_a, **ctx_b}.items()))
            entries[key] = (prob, {"A": state_a, "B": state_b})
            for i in (0, 1):
                for j in (0, 1):
                    dist[2 * i + j] += prob * marg_a[i] * marg_b[j]
    distribution = dict(zip(model.outcome_keys(), (float(x) for x in dist)))
    ledger = BranchLedger(entries, distribution)
    return DistRunReport(
        distribution=distribution,
        ledger=ledger,
        transcript=transcript,
        peak_branch_amplitudes={
            "A": node_a.peak_branch_amplitudes,
            "B": node_b.peak_branch_amplitudes,
        },
        message_count=len(transcript),
    )
