"""Wire protocol and star-topology transport for wall-clock drafting.

Frame layout (little-endian)::

    u32 payload length | u8 version | u8 kind | u64 request id | payload

Token ids inside payloads are unsigned LEB128 varints; probabilities are
IEEE-754 float64. The decoder is streaming-safe: given a partial frame it
reports how many more bytes it needs.
"""

from __future__ import annotations

import asyncio
import enum
import logging
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .drafting import Branch, Candidate, DraftRound, RoundAborted, drafter_step, fuse_step, greedy_pick
from .models import NodeFailure
from .verification import DraftTree, VerificationResult

log = logging.getLogger(__name__)

VERSION = 1
HEADER = struct.Struct("<IBBQ")
HEADER_SIZE = HEADER.size          # 14
MAX_PAYLOAD = 1 << 20
DEFAULT_TIMEOUT = 0.05             # seconds per node per round


class ProtocolError(Exception):
    pass


class VersionError(ProtocolError):
    pass


class UnknownKindError(ProtocolError):
    pass


class OversizeError(ProtocolError):
    pass


class PayloadError(ProtocolError):
    """Payload bytes do not parse as the message its kind announces."""


class NeedMoreData(Exception):
    def __init__(self, needed: int):
        super().__init__(f"need {needed} more bytes")
        self.needed = needed


class ConnectionClosed(Exception):
    pass


class Kind(enum.IntEnum):
    ROUTE_REQUEST = 1
    DRAFT_STEP = 2
    FUSED_TOKEN = 3
    DRAFT_TREE = 4
    VERIFY_RESULT = 5
    JOIN = 6
    LEAVE = 7
    HEARTBEAT = 8


@dataclass(frozen=True)
class Frame:
    kind: Kind
    request_id: int
    payload: bytes = b""
    version: int = VERSION


def encode(frame: Frame) -> bytes:
    if len(frame.payload) > MAX_PAYLOAD:
        raise OversizeError(f"payload of {len(frame.payload)} bytes exceeds {MAX_PAYLOAD}")
    if not 0 <= frame.request_id < 1 << 64:
        raise ProtocolError(f"request id {frame.request_id} does not fit in u64")
    return HEADER.pack(len(frame.payload), frame.version, int(frame.kind), frame.request_id) + bytes(frame.payload)


def decode(buf) -> tuple[Frame, int]:
    """Parse one frame from the front of ``buf``; return it with the bytes consumed."""
    buf = memoryview(bytes(buf)) if not isinstance(buf, (bytes, bytearray, memoryview)) else memoryview(buf)
    have = len(buf)
    if have < 4:
        raise NeedMoreData(HEADER_SIZE - have)
    (length,) = struct.unpack_from("<I", buf, 0)
    if length > MAX_PAYLOAD:
        raise OversizeError(f"announced payload of {length} bytes exceeds {MAX_PAYLOAD}")
    if have >= 5 and buf[4] != VERSION:
        raise VersionError(f"unsupported protocol version {buf[4]}")
    if have >= 6 and buf[5] not in Kind._value2member_map_:
        raise UnknownKindError(f"unknown frame kind {buf[5]}")
    total = HEADER_SIZE + length
    if have < total:
        raise NeedMoreData(total - have)
    _, version, kind, rid = HEADER.unpack_from(buf, 0)
    return Frame(Kind(kind), rid, bytes(buf[HEADER_SIZE:total]), version), total


class FrameDecoder:
    """Accumulates stream bytes and yields complete frames."""

    def __init__(self):
        self.buf = bytearray()

    def feed(self, data: bytes) -> list[Frame]:
        self.buf.extend(data)
        frames = []
        while True:
            try:
                frame, used = decode(self.buf)
            except NeedMoreData:
                return frames
            del self.buf[:used]
            frames.append(frame)


# ---------- payload primitives ----------

class Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def varint(self, n: int):
        if n < 0:
            raise ProtocolError(f"varint cannot encode negative {n}")
        out = bytearray()
        while True:
            byte = n & 0x7F
            n >>= 7
            if n:
                out.append(byte | 0x80)
            else:
                out.append(byte)
                break
        self.parts.append(bytes(out))
        return self

    def f64(self, x: float):
        self.parts.append(struct.pack("<d", x))
        return self

    def u8(self, x: int):
        self.parts.append(bytes([x]))
        return self

    def tokens(self, ids):
        self.varint(len(ids))
        for t in ids:
            self.varint(int(t))
        return self

    def vector(self, vec):
        if vec is None:
            return self.u8(0)
        arr = np.asarray(vec, dtype="<f8")
        self.u8(1).varint(arr.size)
        self.parts.append(arr.tobytes())
        return self

    def text(self, s: str):
        raw = s.encode()
        self.varint(len(raw))
        self.parts.append(raw)
        return self

    def bytes(self) -> bytes:
        return b"".join(self.parts)


class Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def _take(self, n: int) -> memoryview:
        if self.pos + n > len(self.data):
            raise PayloadError(f"payload truncated at byte {self.pos} (wanted {n} more)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def varint(self) -> int:
        n = shift = 0
        while True:
            byte = self._take(1)[0]
            n |= (byte & 0x7F) << shift
            if not byte & 0x80:
                return n
            shift += 7
            if shift > 63:
                raise PayloadError("varint longer than 64 bits")

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def u8(self) -> int:
        return self._take(1)[0]

    def tokens(self) -> tuple:
        n = self.varint()
        if n > len(self.data):
            raise PayloadError(f"token count {n} exceeds payload size")
        return tuple(self.varint() for _ in range(n))

    def vector(self):
        flag = self.u8()
        if flag == 0:
            return None
        if flag != 1:
            raise PayloadError(f"bad vector flag {flag}")
        n = self.varint()
        arr = np.frombuffer(self._take(8 * n), dtype="<f8").astype(np.float64)
        return arr

    def text(self) -> str:
        n = self.varint()
        try:
            return bytes(self._take(n)).decode()
        except UnicodeDecodeError as exc:
            raise PayloadError(str(exc)) from None

    def done(self):
        if self.pos != len(self.data):
            raise PayloadError(f"{len(self.data) - self.pos} trailing payload bytes")


# ---------- messages ----------

@dataclass
class RouteRequest:
    prefix: tuple
    K: int
    KIND = Kind.ROUTE_REQUEST

    def write(self, w):
        w.varint(self.K).tokens(self.prefix)

    @classmethod
    def read(cls, r):
        K = r.varint()
        return cls(r.tokens(), K)


@dataclass
class DraftStep:
    step: int
    node: int
    own_token: int
    own_conf: float
    own_dist: object
    fused_token: int
    fused_conf: float
    fused_dist: object
    KIND = Kind.DRAFT_STEP

    def write(self, w):
        w.varint(self.step).varint(self.node)
        w.varint(self.own_token).f64(self.own_conf).vector(self.own_dist)
        w.varint(self.fused_token).f64(self.fused_conf).vector(self.fused_dist)

    @classmethod
    def read(cls, r):
        step, node = r.varint(), r.varint()
        own = (r.varint(), r.f64(), r.vector())
        fused = (r.varint(), r.f64(), r.vector())
        return cls(step, node, *own, *fused)

    def __eq__(self, other):
        return (isinstance(other, DraftStep)
                and (self.step, self.node, self.own_token, self.fused_token) ==
                (other.step, other.node, other.own_token, other.fused_token)
                and _same_float(self.own_conf, other.own_conf)
                and _same_float(self.fused_conf, other.fused_conf)
                and _same_vec(self.own_dist, other.own_dist)
                and _same_vec(self.fused_dist, other.fused_dist))


@dataclass
class FusedToken:
    step: int
    token: int
    node: int
    conf: float
    KIND = Kind.FUSED_TOKEN

    def write(self, w):
        w.varint(self.step).varint(self.token).varint(self.node).f64(self.conf)

    @classmethod
    def read(cls, r):
        return cls(r.varint(), r.varint(), r.varint(), r.f64())

    def __eq__(self, other):
        return (isinstance(other, FusedToken)
                and (self.step, self.token, self.node) == (other.step, other.token, other.node)
                and _same_float(self.conf, other.conf))


@dataclass
class DraftTreeMsg:
    tree: DraftTree
    KIND = Kind.DRAFT_TREE

    def write(self, w):
        t = self.tree
        root = t.nodes[0].token
        w.u8(1 if t.sampled else 0).varint(root + 1).varint(len(t))
        for n in t.nodes[1:]:
            w.varint(n.parent).varint(n.token).varint(n.drafter).f64(n.prob).vector(n.dist)

    @classmethod
    def read(cls, r):
        sampled = r.u8()
        if sampled > 1:
            raise PayloadError(f"bad sampled flag {sampled}")
        root = r.varint() - 1
        tree = DraftTree(None if root < 0 else root, sampled=bool(sampled))
        count = r.varint()
        for i in range(count):
            parent, token, drafter, prob, dist = r.varint(), r.varint(), r.varint(), r.f64(), r.vector()
            if parent > i:
                raise PayloadError(f"node {i + 1} refers to later parent {parent}")
            try:
                tree.add(parent, token, prob, drafter, dist)
            except ValueError as exc:
                raise PayloadError(str(exc)) from None
        return cls(tree)

    def __eq__(self, other):
        if not isinstance(other, DraftTreeMsg):
            return False
        a, b = self.tree, other.tree
        if a.sampled != b.sampled or len(a.nodes) != len(b.nodes) or a.nodes[0].token != b.nodes[0].token:
            return False
        return all((x.parent, x.token, x.drafter) == (y.parent, y.token, y.drafter)
                   and _same_float(x.prob, y.prob) and _same_vec(x.dist, y.dist)
                   for x, y in zip(a.nodes[1:], b.nodes[1:]))


@dataclass
class VerifyResultMsg:
    accepted: tuple
    accept_len: int
    rejected_at: int | None = None
    KIND = Kind.VERIFY_RESULT

    def write(self, w):
        w.tokens(self.accepted).varint(self.accept_len)
        w.varint(0 if self.rejected_at is None else self.rejected_at + 1)

    @classmethod
    def read(cls, r):
        acc, n, rej = r.tokens(), r.varint(), r.varint()
        return cls(acc, n, None if rej == 0 else rej - 1)

    @classmethod
    def from_result(cls, res: VerificationResult):
        return cls(tuple(res.accepted), res.accept_len, res.rejected_at)


@dataclass
class Join:
    node: int
    name: str = ""
    KIND = Kind.JOIN

    def write(self, w):
        w.varint(self.node).text(self.name)

    @classmethod
    def read(cls, r):
        return cls(r.varint(), r.text())


@dataclass
class Leave:
    node: int
    KIND = Kind.LEAVE

    def write(self, w):
        w.varint(self.node)

    @classmethod
    def read(cls, r):
        return cls(r.varint())


@dataclass
class Heartbeat:
    KIND = Kind.HEARTBEAT

    def write(self, w):
        pass

    @classmethod
    def read(cls, r):
        return cls()


MESSAGES = {m.KIND: m for m in (RouteRequest, DraftStep, FusedToken, DraftTreeMsg,
                                VerifyResultMsg, Join, Leave, Heartbeat)}


def _same_float(a, b) -> bool:
    return struct.pack("<d", a) == struct.pack("<d", b)


def _same_vec(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return np.asarray(a, "<f8").tobytes() == np.asarray(b, "<f8").tobytes()


def pack(msg, request_id: int = 0) -> Frame:
    w = Writer()
    msg.write(w)
    return Frame(msg.KIND, request_id, w.bytes())


def unpack(frame: Frame):
    r = Reader(frame.payload)
    try:
        msg = MESSAGES[frame.kind].read(r)
    except (ValueError, OverflowError) as exc:
        raise PayloadError(str(exc)) from None
    r.done()
    return msg


# ---------- transports ----------

class LoopbackConnection:
    """In-process byte pipe; frames still go through encode/decode."""

    def __init__(self):
        self.inbox: asyncio.Queue = asyncio.Queue()
        self.peer: LoopbackConnection | None = None
        self.decoder = FrameDecoder()
        self.ready: list[Frame] = []
        self.closed = False

    @classmethod
    def pair(cls):
        a, b = cls(), cls()
        a.peer, b.peer = b, a
        return a, b

    async def send(self, frame: Frame):
        if self.closed or self.peer.closed:
            raise ConnectionClosed("loopback peer closed")
        self.peer.inbox.put_nowait(encode(frame))

    async def recv(self) -> Frame:
        while not self.ready:
            data = await self.inbox.get()
            if data is None:
                raise ConnectionClosed("loopback closed")
            self.ready.extend(self.decoder.feed(data))
        return self.ready.pop(0)

    async def close(self):
        if not self.closed:
            self.closed = True
            self.inbox.put_nowait(None)
            if self.peer and not self.peer.closed:
                self.peer.inbox.put_nowait(None)


class StreamConnection:
    """Frames over an asyncio byte stream (TCP)."""

    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        self.reader = reader
        self.writer = writer
        self.decoder = FrameDecoder()
        self.ready: list[Frame] = []

    async def send(self, frame: Frame):
        self.writer.write(encode(frame))
        await self.writer.drain()

    async def recv(self) -> Frame:
        while not self.ready:
            data = await self.reader.read(65536)
            if not data:
                raise ConnectionClosed("stream closed")
            self.ready.extend(self.decoder.feed(data))
        return self.ready.pop(0)

    async def close(self):
        self.writer.close()
        try:
            await self.writer.wait_closed()
        except (ConnectionError, OSError):
            pass


# ---------- drafter node ----------

async def drafter_worker(conn, node: int, model, name: str = ""):
    """Serve drafting rounds until the connection closes or the model fails."""
    await conn.send(pack(Join(node, name)))
    rid = prefix = None
    K = 0
    own: list[int] = []
    fused: list[int] = []

    async def step():
        q_own, q_fused = drafter_step(model, prefix, own, fused)
        ot, oc = greedy_pick(q_own)
        ft, fc = greedy_pick(q_fused)
        msg = DraftStep(len(fused), node, ot, oc, q_own, ft, fc, q_fused)
        await conn.send(pack(msg, rid))
        return ot

    pending_own = None
    while True:
        try:
            frame = await conn.recv()
            msg = unpack(frame)
        except ConnectionClosed:
            return
        try:
            if isinstance(msg, RouteRequest):
                rid, prefix, K = frame.request_id, msg.prefix, msg.K
                own, fused = [], []
                pending_own = await step()
            elif isinstance(msg, FusedToken):
                if frame.request_id != rid or msg.step != len(fused):
                    continue
                own.append(pending_own)
                fused.append(msg.token)
                if len(fused) < K:
                    pending_own = await step()
            elif isinstance(msg, Leave):
                return
        except NodeFailure:
            log.warning("drafter %d failed; leaving", node)
            try:
                await conn.send(pack(Leave(node)))
            except ConnectionClosed:
                pass
            return
        except ConnectionClosed:
            return


# ---------- coordinator ----------

@dataclass
class _Peer:
    conn: object
    inbox: asyncio.Queue = field(default_factory=asyncio.Queue)
    alive: bool = True
    task: asyncio.Task | None = None


class Coordinator:
    """Central node of the star: routes rounds, fuses tokens, drops stragglers."""

    def __init__(self, timeout: float = DEFAULT_TIMEOUT):
        self.timeout = timeout
        self.peers: dict[int, _Peer] = {}

    async def attach(self, conn, expected_node: int | None = None) -> int:
        """Read the node's Join frame and start its connection handler."""
        frame = await conn.recv()
        msg = unpack(frame)
        if not isinstance(msg, Join):
            raise ProtocolError(f"expected Join, got {frame.kind.name}")
        if expected_node is not None and msg.node != expected_node:
            raise ProtocolError(f"node announced id {msg.node}, expected {expected_node}")
        peer = _Peer(conn)
        peer.task = asyncio.ensure_future(self._pump(msg.node, peer))
        self.peers[msg.node] = peer
        return msg.node

    async def _pump(self, node: int, peer: _Peer):
        while True:
            try:
                frame = await peer.conn.recv()
                msg = unpack(frame)
            except (ConnectionClosed, ProtocolError):
                peer.alive = False
                peer.inbox.put_nowait(None)
                return
            if isinstance(msg, Heartbeat):
                continue
            if isinstance(msg, Leave):
                peer.alive = False
                peer.inbox.put_nowait(None)
                return
            peer.inbox.put_nowait((frame.request_id, msg))

    async def _collect(self, node: int, request_id: int, step: int):
        peer = self.peers.get(node)
        if peer is None or not peer.alive:
            return None
        while True:
            item = await peer.inbox.get()
            if item is None:
                return None
            rid, msg = item
            if rid == request_id and isinstance(msg, DraftStep) and msg.step == step:
                return msg

    async def coordinator_round(self, request_id: int, route, step: int):
        """Collect one DraftStep per routed node, fuse, broadcast the winner.

        Returns ``(winner, steps)`` where ``steps`` maps each node that
        answered in time to its DraftStep.
        """
        async def one(n):
            try:
                return n, await asyncio.wait_for(self._collect(n, request_id, step), self.timeout)
            except asyncio.TimeoutError:
                log.info("node %d timed out on request %d step %d", n, request_id, step)
                return n, None

        answers = await asyncio.gather(*(one(n) for n in route))
        steps = {n: m for n, m in answers if m is not None}
        if not steps:
            raise RoundAborted(f"no drafter answered step {step} of request {request_id}")
        win = fuse_step([(n, m.fused_token, m.fused_conf) for n, m in sorted(steps.items())])
        fused = pack(FusedToken(step, win.token, win.node, win.conf), request_id)
        for n in sorted(steps):
            try:
                await self.peers[n].conn.send(fused)
            except ConnectionClosed:
                self.peers[n].alive = False
        return win, steps

    async def generate(self, request_id: int, route, prefix, K: int) -> DraftRound:
        rnd = DraftRound(tuple(prefix), K)
        active = []
        for n in sorted(route):
            peer = self.peers.get(n)
            if peer is None or not peer.alive:
                rnd.dropped.append(n)
                continue
            try:
                await peer.conn.send(pack(RouteRequest(tuple(prefix), K), request_id))
                active.append(n)
            except ConnectionClosed:
                peer.alive = False
                rnd.dropped.append(n)
        for n in active:
            rnd.own[n] = Branch()
            rnd.fused_cand[n] = Branch()
        for step in range(K):
            if not active:
                raise RoundAborted(f"all routed drafters left request {request_id}")
            win, steps = await self.coordinator_round(request_id, active, step)
            for n in list(active):
                if n not in steps:
                    active.remove(n)
                    rnd.own.pop(n)
                    rnd.fused_cand.pop(n)
                    rnd.dropped.append(n)
                    continue
                m = steps[n]
                rnd.own[n].push(m.own_token, m.own_conf, m.own_dist)
                rnd.fused_cand[n].push(m.fused_token, m.fused_conf, m.fused_dist)
            rnd.fused.append(Candidate(win.node, win.token, win.conf))
            rnd.fused_dists.append(steps[win.node].fused_dist)
        return rnd

    async def shutdown(self):
        for n, peer in self.peers.items():
            if peer.alive:
                try:
                    await peer.conn.send(pack(Leave(n)))
                except ConnectionClosed:
                    pass
            await peer.conn.close()
            if peer.task:
                peer.task.cancel()


class NetworkCluster:
    """Drafting backend running drafter workers behind a real transport.

    A private event loop on a background thread hosts the coordinator and
    one worker task per drafter, connected by loopback pipes or TCP
    sockets on 127.0.0.1. ``generate`` blocks until the round finishes.
    """

    def __init__(self, models: dict, transport: str = "loopback", timeout: float = DEFAULT_TIMEOUT):
        if transport not in ("loopback", "tcp"):
            raise ValueError(f"unknown transport {transport!r}")
        self.loop = asyncio.new_event_loop()
        self.thread = threading.Thread(target=self.loop.run_forever, daemon=True)
        self.thread.start()
        self.coordinator = None
        self.server = None
        self.workers = []
        self._call(self._start(models, transport, timeout))

    def _call(self, coro, timeout=None):
        return asyncio.run_coroutine_threadsafe(coro, self.loop).result(timeout)

    async def _start(self, models, transport, timeout):
        self.coordinator = Coordinator(timeout)
        if transport == "loopback":
            for n, model in sorted(models.items()):
                near, far = LoopbackConnection.pair()
                self.workers.append(asyncio.ensure_future(drafter_worker(far, n, model)))
                await self.coordinator.attach(near, n)
            return
        joined = asyncio.Queue()

        async def on_connect(reader, writer):
            await joined.put(StreamConnection(reader, writer))

        self.server = await asyncio.start_server(on_connect, "127.0.0.1", 0)
        port = self.server.sockets[0].getsockname()[1]
        for n, model in sorted(models.items()):
            reader, writer = await asyncio.open_connection("127.0.0.1", port)
            self.workers.append(asyncio.ensure_future(
                drafter_worker(StreamConnection(reader, writer), n, model)))
        for _ in models:
            await self.coordinator.attach(await joined.get())

    def generate(self, request_id, nodes, prefix, K) -> DraftRound:
        return self._call(self.coordinator.generate(request_id, nodes, prefix, K))

    def close(self):
        if not self.loop.is_running():
            return

        async def stop():
            await self.coordinator.shutdown()
            for w in self.workers:
                w.cancel()
            if self.server is not None:
                self.server.close()
                await self.server.wait_closed()

        try:
            self._call(stop(), timeout=5)
        finally:
            self.loop.call_soon_threadsafe(self.loop.stop)
            self.thread.join(timeout=5)
            self.loop.close()
