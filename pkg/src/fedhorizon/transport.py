"""Coordinator <-> node wire protocol, plus a deterministic in-process twin.

Wire contract (normative byte layout)
-------------------------------------

Every message travels in one frame::

    frame    := length(u32 BE) payload
    payload  := version(u8 =1) kind(u8) round_index(u32 BE)
                id_len(u16 BE) node_id(UTF-8 bytes) body

``length`` counts the payload bytes only. Frames above the configured
cap (default 64 MiB) are a protocol error. Body per kind::

    1 JOIN          num_samples(u32 BE)            node -> coordinator
    2 GLOBAL_MODEL  reg_weight(f64 LE) params      coordinator -> node
    3 LOCAL_UPDATE  num_samples(u32 BE) params     node -> coordinator
    4 ROUND_RESULT  text_len(u32 BE) UTF-8 JSON    coordinator -> node
    5 SHUTDOWN      (empty)                        coordinator -> node
    6 ERROR         text_len(u32 BE) UTF-8 text    either direction

    params := count(u32 BE) count * f64(IEEE-754 binary64, little-endian)

Header integers are big-endian; float arrays little-endian. JOIN
announces the node's local sample count so the coordinator can hand each
node its regularizer coefficient (inside GLOBAL_MODEL) before the first
round. LOCAL_UPDATE is the only node -> coordinator kind carrying a
numeric array, and its size depends only on the model shape.

Session flow: node connects, sends JOIN; the coordinator waits for all P
distinct configured nodes, then per round sends GLOBAL_MODEL to every
node, awaits one LOCAL_UPDATE from each (barrier), aggregates, and
broadcasts ROUND_RESULT with the round digest. After the last round it
sends SHUTDOWN. Any abort is broadcast as ERROR.

The in-process twin (:class:`InProcessNodeStream` driving a
:class:`NodeSession`) exchanges the same encoded frames through memory,
strictly sequentially, so networked and simulated federations are
byte-comparable.
"""

import json
import logging
import socket
import struct
import time
from dataclasses import dataclass

import numpy as np

from fedhorizon import model
from fedhorizon.data import site_to_arrays
from fedhorizon.errors import ProtocolError
from fedhorizon.federation import RoundUpdate, derive_round_seed

log = logging.getLogger("fedhorizon.transport")

PROTOCOL_VERSION = 1

JOIN = 1
GLOBAL_MODEL = 2
LOCAL_UPDATE = 3
ROUND_RESULT = 4
SHUTDOWN = 5
ERROR = 6

KIND_NAMES = {
    JOIN: "JOIN",
    GLOBAL_MODEL: "GLOBAL_MODEL",
    LOCAL_UPDATE: "LOCAL_UPDATE",
    ROUND_RESULT: "ROUND_RESULT",
    SHUTDOWN: "SHUTDOWN",
    ERROR: "ERROR",
}

DEFAULT_MAX_FRAME = 64 * 1024 * 1024
DEFAULT_TIMEOUT = 300.0
RETRY_ATTEMPTS = 3
RETRY_BACKOFF_S = 0.5  # doubles per attempt: 0.5, 1.0, 2.0


@dataclass
class Message:
    """One protocol message; kind-specific fields are None when absent."""

    kind: int
    round_index: int = 0
    node_id: str = ""
    num_samples: int = None
    reg_weight: float = None
    params: np.ndarray = None
    text: str = None
    version: int = PROTOCOL_VERSION

    def __eq__(self, other):
        if not isinstance(other, Message):
            return NotImplemented
        if (self.version, self.kind, self.round_index, self.node_id,
                self.num_samples, self.reg_weight, self.text) != (
                other.version, other.kind, other.round_index, other.node_id,
                other.num_samples, other.reg_weight, other.text):
            return False
        if (self.params is None) != (other.params is None):
            return False
        return self.params is None or np.array_equal(self.params, other.params)


def _params_block(params):
    arr = np.ascontiguousarray(params, dtype="<f8")
    return struct.pack("!I", arr.size) + arr.tobytes()


def encode_message(msg, max_frame=DEFAULT_MAX_FRAME):
    """Serialize a Message into one frame (length prefix included)."""
    if msg.kind not in KIND_NAMES:
        raise ProtocolError("unknown_kind", f"cannot encode kind {msg.kind}")
    node_id = msg.node_id.encode("utf-8")
    if len(node_id) > 0xFFFF:
        raise ProtocolError("bad_value", "node_id longer than 65535 bytes")
    head = struct.pack("!BBIH", msg.version, msg.kind, msg.round_index, len(node_id))

    if msg.kind == JOIN:
        body = struct.pack("!I", msg.num_samples)
    elif msg.kind == GLOBAL_MODEL:
        body = struct.pack("<d", msg.reg_weight) + _params_block(msg.params)
    elif msg.kind == LOCAL_UPDATE:
        body = struct.pack("!I", msg.num_samples) + _params_block(msg.params)
    elif msg.kind in (ROUND_RESULT, ERROR):
        text = msg.text.encode("utf-8")
        body = struct.pack("!I", len(text)) + text
    else:  # SHUTDOWN
        body = b""

    payload = head + node_id + body
    if len(payload) > max_frame:
        raise ProtocolError("frame_too_large",
                            f"frame of {len(payload)} bytes exceeds cap {max_frame}")
    return struct.pack("!I", len(payload)) + payload


class _Reader:
    def __init__(self, buf, context):
        self.buf = buf
        self.pos = 0
        self.context = context

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise ProtocolError("incomplete_frame",
                                f"{self.context}: frame truncated at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def done(self):
        if self.pos != len(self.buf):
            raise ProtocolError("malformed_body",
                                f"{self.context}: {len(self.buf) - self.pos} trailing bytes")


def decode_message(frame, max_frame=DEFAULT_MAX_FRAME):
    """Parse one complete frame (inverse of :func:`encode_message`)."""
    r = _Reader(frame, "frame")
    (length,) = r.unpack("!I")
    if length > max_frame:
        raise ProtocolError("frame_too_large",
                            f"declared payload of {length} bytes exceeds cap {max_frame}")
    if length != len(frame) - 4:
        raise ProtocolError("incomplete_frame",
                            f"declared payload {length} bytes, got {len(frame) - 4}")
    version, kind, round_index, id_len = r.unpack("!BBIH")
    if version != PROTOCOL_VERSION:
        raise ProtocolError("bad_version", f"version {version}, expected {PROTOCOL_VERSION}")
    if kind not in KIND_NAMES:
        raise ProtocolError("unknown_kind", f"unknown message kind {kind}")
    node_id = r.take(id_len).decode("utf-8")
    msg = Message(kind=kind, round_index=round_index, node_id=node_id)
    r.context = KIND_NAMES[kind]

    if kind == JOIN:
        (msg.num_samples,) = r.unpack("!I")
        if msg.num_samples < 1:
            raise ProtocolError("bad_value", "JOIN announces zero samples")
    elif kind == GLOBAL_MODEL:
        (msg.reg_weight,) = r.unpack("<d")
        msg.params = _read_params(r)
    elif kind == LOCAL_UPDATE:
        (msg.num_samples,) = r.unpack("!I")
        if msg.num_samples < 1:
            raise ProtocolError("bad_value", "LOCAL_UPDATE announces zero samples")
        msg.params = _read_params(r)
    elif kind in (ROUND_RESULT, ERROR):
        (text_len,) = r.unpack("!I")
        msg.text = r.take(text_len).decode("utf-8")
    r.done()
    return msg


def _read_params(r):
    (count,) = r.unpack("!I")
    remaining = len(r.buf) - r.pos
    if count * 8 > remaining:
        raise ProtocolError(
            "length_mismatch",
            f"{r.context}: declares {count} parameters ({count * 8} bytes), "
            f"only {remaining} bytes follow",
        )
    return np.frombuffer(r.take(count * 8), dtype="<f8").astype(np.float64)


class SocketStream:
    """Blocking frame-oriented message stream over a TCP socket."""

    def __init__(self, sock, max_frame=DEFAULT_MAX_FRAME):
        self.sock = sock
        self.max_frame = max_frame

    def send(self, msg):
        self.sock.sendall(encode_message(msg, self.max_frame))

    def _recv_exact(self, n):
        chunks = []
        while n > 0:
            try:
                chunk = self.sock.recv(n)
            except socket.timeout:
                raise ProtocolError("timeout", "timed out waiting for a frame") from None
            if not chunk:
                raise ProtocolError("incomplete_frame", "connection closed mid-frame")
            chunks.append(chunk)
            n -= len(chunk)
        return b"".join(chunks)

    def recv(self, timeout=None):
        self.sock.settimeout(timeout)
        prefix = self._recv_exact(4)
        (length,) = struct.unpack("!I", prefix)
        if length > self.max_frame:
            raise ProtocolError("frame_too_large",
                                f"declared payload of {length} bytes exceeds cap")
        return decode_message(prefix + self._recv_exact(length), self.max_frame)

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


class NodeSession:
    """Node-side protocol logic as a pure message-in / messages-out machine.

    The model shape is inferred from the first GLOBAL_MODEL: with local
    feature width d and ``num_classes`` K, a parameter vector of length L
    implies hidden width ``(L - K) / (d + 1 + K)``. Never emits records,
    images, or features; the only outgoing numeric array is the locally
    trained parameter vector.
    """

    def __init__(self, node_id, dataset, hyper, num_classes=4):
        self.node_id = node_id
        self.x, self.y = site_to_arrays(dataset)
        self.hyper = hyper
        self.num_classes = num_classes
        self.spec = None
        self.done = False
        self.failed = None

    def start(self):
        return [Message(kind=JOIN, node_id=self.node_id, num_samples=self.x.shape[0])]

    def _infer_spec(self, n_params):
        d, k = self.x.shape[1], self.num_classes
        hidden, rem = divmod(n_params - k, d + 1 + k)
        if rem != 0 or hidden < 1:
            raise ProtocolError(
                "bad_value",
                f"global model of length {n_params} does not fit feature "
                f"width {d} with {k} classes",
            )
        return model.ModelSpec(input_dim=d, hidden_dim=hidden,
                               num_classes=k, dropout_rate=0.0)

    def handle(self, msg):
        """React to one coordinator message; returns messages to send."""
        if msg.version != PROTOCOL_VERSION:
            raise ProtocolError("bad_version", f"coordinator speaks version {msg.version}")
        if msg.kind == SHUTDOWN:
            self.done = True
            return []
        if msg.kind == ERROR:
            self.done = True
            self.failed = msg.text
            log.error("node %s: coordinator error: %s", self.node_id, msg.text)
            return []
        if msg.kind == ROUND_RESULT:
            log.info("node %s: round result %s", self.node_id, msg.text)
            return []
        if msg.kind != GLOBAL_MODEL:
            raise ProtocolError("unknown_kind",
                                f"unexpected {KIND_NAMES.get(msg.kind, msg.kind)} at node")
        if msg.node_id and msg.node_id != self.node_id:
            raise ProtocolError("bad_value",
                                f"model addressed to {msg.node_id!r}, this is {self.node_id!r}")
        if self.spec is None:
            self.spec = self._infer_spec(msg.params.size)
        hyper = model.Hyperparameters(
            learning_rate=self.hyper.learning_rate,
            local_epochs=self.hyper.local_epochs,
            batch_size=self.hyper.batch_size,
            reg_weight=msg.reg_weight,
            seed=derive_round_seed(self.hyper.seed, msg.round_index, self.node_id),
        )
        trained = model.train_local(self.spec, msg.params, self.x, self.y, hyper)
        return [Message(kind=LOCAL_UPDATE, round_index=msg.round_index,
                        node_id=self.node_id, num_samples=self.x.shape[0],
                        params=trained)]


class InProcessNodeStream:
    """Coordinator-side stream view of a local NodeSession.

    Frames are encoded/decoded exactly as on the wire, but handled
    synchronously: a send() runs the node logic immediately and queues
    its replies. Strictly sequential and deterministic.
    """

    def __init__(self, session, max_frame=DEFAULT_MAX_FRAME):
        self.session = session
        self.max_frame = max_frame
        self.outbox = [encode_message(m, max_frame) for m in session.start()]

    def send(self, msg):
        frame = encode_message(msg, self.max_frame)  # byte-level parity with TCP
        replies = self.session.handle(decode_message(frame, self.max_frame))
        self.outbox.extend(encode_message(m, self.max_frame) for m in replies)

    def recv(self, timeout=None):
        if not self.outbox:
            raise ProtocolError("timeout", f"node {self.session.node_id} has no reply queued")
        return decode_message(self.outbox.pop(0), self.max_frame)

    def close(self):
        pass


def _broadcast(streams, msg):
    for stream in streams.values():
        try:
            stream.send(msg)
        except (ProtocolError, OSError):
            pass


def run_coordinator(joined, engine, timeout=DEFAULT_TIMEOUT):
    """Drive the round protocol over already-joined node streams.

    ``joined`` maps node_id -> (stream, join_message). Works identically
    over TCP streams and in-process streams; returns the engine's
    TrainingHistory.
    """
    cfg = engine.cfg
    if set(joined) != set(cfg.node_ids):
        raise ProtocolError("bad_value",
                            f"joined nodes {sorted(joined)} != configured {list(cfg.node_ids)}")
    engine.register_sizes({nid: msg.num_samples for nid, (_, msg) in joined.items()})
    streams = {nid: stream for nid, (stream, _) in joined.items()}
    try:
        for r in range(cfg.num_rounds):
            started = time.monotonic()
            for nid in cfg.node_ids:
                streams[nid].send(Message(
                    kind=GLOBAL_MODEL, round_index=r, node_id=nid,
                    reg_weight=engine.reg_weight_for(nid), params=engine.params,
                ))
            updates = []
            for nid in cfg.node_ids:
                msg = streams[nid].recv(timeout)
                if msg.kind == ERROR:
                    raise ProtocolError("node_error", f"node {nid}: {msg.text}")
                if msg.kind != LOCAL_UPDATE:
                    raise ProtocolError(
                        "unknown_kind",
                        f"expected LOCAL_UPDATE from {nid}, got {KIND_NAMES.get(msg.kind)}")
                if msg.node_id != nid:
                    raise ProtocolError("bad_value",
                                        f"update on {nid}'s stream claims {msg.node_id!r}")
                if msg.round_index != r:
                    raise ProtocolError("bad_value",
                                        f"update from {nid} is for round {msg.round_index}, "
                                        f"expected {r}")
                updates.append(RoundUpdate(nid, msg.params, msg.num_samples, r))
            engine.process_round(r, updates, wall_time_s=time.monotonic() - started)
            result = json.dumps({
                "round_index": r,
                "param_digest": engine.history.records[-1].param_digest,
            })
            for nid in cfg.node_ids:
                streams[nid].send(Message(kind=ROUND_RESULT, round_index=r,
                                          node_id=nid, text=result))
        _broadcast(streams, Message(kind=SHUTDOWN))
    except Exception as exc:
        _broadcast(streams, Message(kind=ERROR, text=str(exc)))
        raise
    finally:
        for stream in streams.values():
            stream.close()
    return engine.history


def simulate_networked(engine, sites):
    """In-process federation through the full message codec."""
    sessions = {
        ds.site_id: NodeSession(ds.site_id, ds, engine.cfg.hyper_for(ds.site_id),
                                engine.spec.num_classes)
        for ds in sites
    }
    joined = {}
    for nid, session in sessions.items():
        stream = InProcessNodeStream(session)
        joined[nid] = (stream, stream.recv())
    return run_coordinator(joined, engine)


def parse_endpoint(endpoint):
    host, sep, port = endpoint.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"endpoint must be HOST:PORT, got {endpoint!r}")
    return host or "127.0.0.1", int(port)


class Coordinator:
    """TCP coordinator: bind, await P JOINs, run the round protocol."""

    def __init__(self, endpoint, engine, timeout=DEFAULT_TIMEOUT,
                 max_frame=DEFAULT_MAX_FRAME):
        self.engine = engine
        self.timeout = timeout
        self.max_frame = max_frame
        host, port = parse_endpoint(endpoint) if isinstance(endpoint, str) else endpoint
        self.listener = socket.create_server((host, port))
        self.bound_address = self.listener.getsockname()

    def serve(self):
        expected = set(self.engine.cfg.node_ids)
        joined = {}
        self.listener.settimeout(self.timeout)
        try:
            while set(joined) != expected:
                try:
                    sock, addr = self.listener.accept()
                except socket.timeout:
                    raise ProtocolError(
                        "timeout",
                        f"joined {sorted(joined)}, still waiting for "
                        f"{sorted(expected - set(joined))}") from None
                stream = SocketStream(sock, self.max_frame)
                msg = stream.recv(self.timeout)
                if msg.kind != JOIN:
                    stream.send(Message(kind=ERROR, text="expected JOIN"))
                    stream.close()
                    raise ProtocolError("bad_value",
                                        f"first message from {addr} was not JOIN")
                if msg.node_id not in expected:
                    stream.send(Message(kind=ERROR,
                                        text=f"unknown node {msg.node_id!r}"))
                    stream.close()
                    raise ProtocolError("bad_value", f"unexpected node {msg.node_id!r}")
                if msg.node_id in joined:
                    err = Message(kind=ERROR, text=f"duplicate JOIN for {msg.node_id!r}")
                    stream.send(err)
                    stream.close()
                    _broadcast({nid: s for nid, (s, _) in joined.items()}, err)
                    raise ProtocolError("bad_value", f"duplicate JOIN for {msg.node_id!r}")
                log.info("coordinator: node %s joined (%d samples)",
                         msg.node_id, msg.num_samples)
                joined[msg.node_id] = (stream, msg)
            return run_coordinator(joined, self.engine, self.timeout)
        finally:
            self.listener.close()


def coordinator_serve(endpoint, engine, timeout=DEFAULT_TIMEOUT):
    """Bind ``endpoint`` and run the federation; returns TrainingHistory."""
    return Coordinator(endpoint, engine, timeout).serve()


def node_run(endpoint, dataset, hyper, node_id, num_classes=4,
             retries=RETRY_ATTEMPTS, backoff_s=RETRY_BACKOFF_S, timeout=DEFAULT_TIMEOUT):
    """Run one node against a coordinator; returns a process exit status.

    Connection attempts follow the documented retry policy (``retries``
    attempts, backoff doubling from ``backoff_s``). 0 = clean shutdown,
    3 = connection/protocol failure.
    """
    session = NodeSession(node_id, dataset, hyper, num_classes)
    sock = None
    for attempt in range(retries):
        try:
            sock = socket.create_connection(parse_endpoint(endpoint), timeout=timeout)
            break
        except OSError as exc:
            log.warning("node %s: connect attempt %d failed: %s", node_id, attempt + 1, exc)
            if attempt + 1 < retries:
                time.sleep(backoff_s * (2 ** attempt))
    if sock is None:
        log.error("node %s: could not reach coordinator at %s", node_id, endpoint)
        return 3
    stream = SocketStream(sock)
    try:
        for msg in session.start():
            stream.send(msg)
        while not session.done:
            replies = session.handle(stream.recv(timeout))
            for reply in replies:
                stream.send(reply)
        return 3 if session.failed is not None else 0
    except ProtocolError as exc:
        log.error("node %s: protocol failure [%s]: %s", node_id, exc.code, exc)
        try:
            stream.send(Message(kind=ERROR, node_id=node_id, text=str(exc)))
        except (ProtocolError, OSError):
            pass
        return 3
    except OSError as exc:
        log.error("node %s: connection lost: %s", node_id, exc)
        return 3
    finally:
        stream.close()
