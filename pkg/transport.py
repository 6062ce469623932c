"""
Coordinator <-> plant communication: binary framing, message codec, and the
session protocol over an in-process or TCP backend.

Frame layout (little-endian):

    magic "FPL1" | msg_type u8 | payload_len u32 | payload

Both backends move encoded frames, so a federated run produces the same bytes
whichever backend carries it.
"""

import asyncio
import logging
import struct
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import IntEnum
from typing import ClassVar, Dict, Optional, Protocol, Tuple, Type, Union

from errors import ConfigError, ContractError, FedPlantError, FrameError, ProtocolFailure
from secure_aggregation import (
    MaskedUpdate,
    QuantizationSpec,
    decode_masked_update,
    encode_masked_update,
)

logger = logging.getLogger(__name__)

MAGIC = b"FPL1"
HEADER = struct.Struct("<4sBI")
DEFAULT_PHASE_TIMEOUT = 60.0
WEIGHTS_MODES = ("fedavg", "adaptive")


class MsgType(IntEnum):
    JOIN_REQUEST = 1
    JOIN_ACCEPT = 2
    GLOBAL_MODEL = 3
    LOCAL_UPDATE_PLAIN = 4
    LOCAL_UPDATE_MASKED = 5
    EVAL_REQUEST = 6
    EVAL_REPORT = 7
    ROUND_ACK = 8
    SHUTDOWN = 9
    PROTOCOL_ERROR = 10


class ErrorCode(IntEnum):
    BAD_MAGIC = 1
    UNKNOWN_TYPE = 2
    TRUNCATED = 3
    LENGTH_MISMATCH = 4
    ROUND_REGRESSION = 5
    ARCH_MISMATCH = 6
    UNKNOWN_PLANT = 7
    DUPLICATE_PLANT = 8
    TIMEOUT = 9
    UNEXPECTED_MESSAGE = 10
    CONNECTION_LOST = 11
    ABORTED = 12


class _Reader:
    """Cursor over a payload; running past the end is a length lie."""

    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, fmt: str) -> tuple:
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.payload):
            raise FrameError(
                "payload shorter than its fields", ErrorCode.LENGTH_MISMATCH
            )
        values = struct.unpack_from(fmt, self.payload, self.offset)
        self.offset += size
        return values

    def raw(self, size: int) -> bytes:
        if self.offset + size > len(self.payload):
            raise FrameError(
                "payload shorter than its fields", ErrorCode.LENGTH_MISMATCH
            )
        chunk = self.payload[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def params_blob(self) -> bytes:
        (count,) = self.take("<I")
        return struct.pack("<I", count) + self.raw(8 * count)

    def masked_update(self) -> MaskedUpdate:
        try:
            update, self.offset = decode_masked_update(self.payload, self.offset)
        except ContractError as e:
            raise FrameError(str(e), ErrorCode.LENGTH_MISMATCH) from e
        return update

    def rest(self) -> bytes:
        return self.raw(len(self.payload) - self.offset)

    def finish(self) -> None:
        if self.offset != len(self.payload):
            raise FrameError(
                f"{len(self.payload) - self.offset} unexpected trailing payload bytes",
                ErrorCode.LENGTH_MISMATCH,
            )


@dataclass(frozen=True)
class JoinRequest:
    msg_type: ClassVar[MsgType] = MsgType.JOIN_REQUEST
    plant_id: int
    arch_hash: bytes

    def pack(self) -> bytes:
        if len(self.arch_hash) != 32:
            raise ContractError("arch_hash must be 32 bytes")
        return struct.pack("<I", self.plant_id) + self.arch_hash

    @classmethod
    def unpack(cls, r: _Reader) -> "JoinRequest":
        (plant_id,) = r.take("<I")
        return cls(plant_id, r.raw(32))


@dataclass(frozen=True)
class JoinAccept:
    msg_type: ClassVar[MsgType] = MsgType.JOIN_ACCEPT
    round_count: int
    q: int
    quant_spec: QuantizationSpec
    peer_ids: Tuple[int, ...]
    weights_mode: str
    secure: bool

    def pack(self) -> bytes:
        head = struct.pack(
            "<IIBdBBI",
            self.round_count,
            self.q,
            self.quant_spec.scale_bits,
            self.quant_spec.clip_range,
            WEIGHTS_MODES.index(self.weights_mode),
            int(self.secure),
            len(self.peer_ids),
        )
        return head + struct.pack(f"<{len(self.peer_ids)}I", *self.peer_ids)

    @classmethod
    def unpack(cls, r: _Reader) -> "JoinAccept":
        rounds, q, bits, clip, mode, secure, n = r.take("<IIBdBBI")
        if mode >= len(WEIGHTS_MODES) or bits < 8 or bits > 40 or clip <= 0:
            raise FrameError("invalid JoinAccept fields", ErrorCode.LENGTH_MISMATCH)
        peers = r.take(f"<{n}I")
        return cls(
            round_count=rounds,
            q=q,
            quant_spec=QuantizationSpec(scale_bits=bits, clip_range=clip),
            peer_ids=tuple(peers),
            weights_mode=WEIGHTS_MODES[mode],
            secure=bool(secure),
        )


@dataclass(frozen=True)
class GlobalModel:
    msg_type: ClassVar[MsgType] = MsgType.GLOBAL_MODEL
    t: int
    params: bytes
    weights: Dict[int, float] = field(default_factory=dict)

    def pack(self) -> bytes:
        parts = [struct.pack("<II", self.t, len(self.weights))]
        for plant_id in sorted(self.weights):
            parts.append(struct.pack("<Id", plant_id, self.weights[plant_id]))
        parts.append(self.params)
        return b"".join(parts)

    @classmethod
    def unpack(cls, r: _Reader) -> "GlobalModel":
        t, n = r.take("<II")
        weights = {}
        for _ in range(n):
            plant_id, w = r.take("<Id")
            weights[plant_id] = w
        return cls(t, r.params_blob(), weights)


@dataclass(frozen=True)
class LocalUpdatePlain:
    msg_type: ClassVar[MsgType] = MsgType.LOCAL_UPDATE_PLAIN
    t: int
    plant_id: int
    n_samples: int
    train_loss: float
    params: bytes

    def pack(self) -> bytes:
        return (
            struct.pack("<IIQd", self.t, self.plant_id, self.n_samples, self.train_loss)
            + self.params
        )

    @classmethod
    def unpack(cls, r: _Reader) -> "LocalUpdatePlain":
        t, plant_id, n, loss = r.take("<IIQd")
        return cls(t, plant_id, n, loss, r.params_blob())


@dataclass(frozen=True)
class LocalUpdateMasked:
    msg_type: ClassVar[MsgType] = MsgType.LOCAL_UPDATE_MASKED
    t: int
    masked: MaskedUpdate
    n_samples: int
    train_loss: float

    @property
    def plant_id(self) -> int:
        return self.masked.plant_id

    def pack(self) -> bytes:
        return (
            struct.pack("<I", self.t)
            + encode_masked_update(self.masked)
            + struct.pack("<Qd", self.n_samples, self.train_loss)
        )

    @classmethod
    def unpack(cls, r: _Reader) -> "LocalUpdateMasked":
        (t,) = r.take("<I")
        masked = r.masked_update()
        n, loss = r.take("<Qd")
        return cls(t, masked, n, loss)


@dataclass(frozen=True)
class EvalRequest:
    msg_type: ClassVar[MsgType] = MsgType.EVAL_REQUEST
    t: int
    params: bytes

    def pack(self) -> bytes:
        return struct.pack("<I", self.t) + self.params

    @classmethod
    def unpack(cls, r: _Reader) -> "EvalRequest":
        (t,) = r.take("<I")
        return cls(t, r.params_blob())


@dataclass(frozen=True)
class EvalReport:
    """Scalar scores of one model on one plant. No sample ever travels."""

    msg_type: ClassVar[MsgType] = MsgType.EVAL_REPORT
    _FORMAT: ClassVar[str] = "<IIQQddddd"
    t: int
    plant_id: int
    n_train: int
    n_test: int
    train_mse: float
    train_mse_normalized: float
    test_mse: float
    test_mae: float
    test_r2: float

    def pack(self) -> bytes:
        return struct.pack(
            self._FORMAT,
            self.t,
            self.plant_id,
            self.n_train,
            self.n_test,
            self.train_mse,
            self.train_mse_normalized,
            self.test_mse,
            self.test_mae,
            self.test_r2,
        )

    @classmethod
    def unpack(cls, r: _Reader) -> "EvalReport":
        return cls(*r.take(cls._FORMAT))


@dataclass(frozen=True)
class RoundAck:
    msg_type: ClassVar[MsgType] = MsgType.ROUND_ACK
    t: int

    def pack(self) -> bytes:
        return struct.pack("<I", self.t)

    @classmethod
    def unpack(cls, r: _Reader) -> "RoundAck":
        return cls(*r.take("<I"))


@dataclass(frozen=True)
class Shutdown:
    msg_type: ClassVar[MsgType] = MsgType.SHUTDOWN

    def pack(self) -> bytes:
        return b""

    @classmethod
    def unpack(cls, r: _Reader) -> "Shutdown":
        return cls()


@dataclass(frozen=True)
class ProtocolError:
    msg_type: ClassVar[MsgType] = MsgType.PROTOCOL_ERROR
    code: int
    text: str

    def pack(self) -> bytes:
        return struct.pack("<H", self.code) + self.text.encode("utf-8")

    @classmethod
    def unpack(cls, r: _Reader) -> "ProtocolError":
        (code,) = r.take("<H")
        return cls(code, r.rest().decode("utf-8", errors="replace"))


Message = Union[
    JoinRequest,
    JoinAccept,
    GlobalModel,
    LocalUpdatePlain,
    LocalUpdateMasked,
    EvalRequest,
    EvalReport,
    RoundAck,
    Shutdown,
    ProtocolError,
]

MESSAGE_TYPES: Dict[int, Type] = {
    cls.msg_type: cls
    for cls in (
        JoinRequest,
        JoinAccept,
        GlobalModel,
        LocalUpdatePlain,
        LocalUpdateMasked,
        EvalRequest,
        EvalReport,
        RoundAck,
        Shutdown,
        ProtocolError,
    )
}


def encode(msg: Message) -> bytes:
    payload = msg.pack()
    return HEADER.pack(MAGIC, int(msg.msg_type), len(payload)) + payload


def parse_header(header: bytes) -> Tuple[int, int]:
    """Validate a 9-byte header and return (msg_type, payload_len)."""
    if len(header) < HEADER.size:
        raise FrameError("frame shorter than its header", ErrorCode.TRUNCATED)
    magic, msg_type, length = HEADER.unpack_from(header, 0)
    if magic != MAGIC:
        raise FrameError(f"bad magic {magic!r}", ErrorCode.BAD_MAGIC)
    if msg_type not in MESSAGE_TYPES:
        raise FrameError(f"unknown message type {msg_type}", ErrorCode.UNKNOWN_TYPE)
    return msg_type, length


def decode(frame: bytes) -> Message:
    msg_type, length = parse_header(frame)
    body = frame[HEADER.size :]
    if len(body) < length:
        raise FrameError(
            f"frame declares {length} payload bytes, carries {len(body)}",
            ErrorCode.TRUNCATED,
        )
    if len(body) > length:
        raise FrameError(
            f"frame declares {length} payload bytes, carries {len(body)}",
            ErrorCode.LENGTH_MISMATCH,
        )
    reader = _Reader(body)
    msg = MESSAGE_TYPES[msg_type].unpack(reader)
    reader.finish()
    return msg


def ensure_round_advances(last_acked: int, t: int) -> None:
    if t <= last_acked:
        raise ProtocolFailure(
            f"received round {t} after acknowledging round {last_acked}",
            ErrorCode.ROUND_REGRESSION,
        )


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


class Connection(ABC):
    def __init__(self):
        self.bytes_sent = 0
        self.bytes_received = 0

    @abstractmethod
    async def _send_frame(self, frame: bytes) -> None: ...

    @abstractmethod
    async def _recv_frame(self) -> bytes: ...

    @abstractmethod
    async def close(self) -> None: ...

    async def send(self, msg: Message) -> None:
        frame = encode(msg)
        await self._send_frame(frame)
        self.bytes_sent += len(frame)

    async def recv(self, timeout: Optional[float] = None) -> Message:
        try:
            frame = await asyncio.wait_for(self._recv_frame(), timeout)
        except asyncio.TimeoutError:
            raise ProtocolFailure(
                f"no message within {timeout} s", ErrorCode.TIMEOUT
            ) from None
        self.bytes_received += len(frame)
        return decode(frame)


class InprocConnection(Connection):
    """One end of a pair of asyncio queues carrying encoded frames."""

    def __init__(self, inbox: asyncio.Queue, outbox: asyncio.Queue):
        super().__init__()
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    async def _send_frame(self, frame: bytes) -> None:
        if self._closed:
            raise ProtocolFailure("send on closed connection", ErrorCode.CONNECTION_LOST)
        await self._outbox.put(frame)

    async def _recv_frame(self) -> bytes:
        frame = await self._inbox.get()
        if frame is None:
            raise ProtocolFailure("peer closed the connection", ErrorCode.CONNECTION_LOST)
        return frame

    async def close(self) -> None:
        if not self._closed:
            self._closed = True
            await self._outbox.put(None)


class StreamConnection(Connection):
    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        super().__init__()
        self._reader = reader
        self._writer = writer

    async def _send_frame(self, frame: bytes) -> None:
        try:
            self._writer.write(frame)
            await self._writer.drain()
        except (ConnectionError, OSError) as e:
            raise ProtocolFailure(f"connection lost: {e}", ErrorCode.CONNECTION_LOST) from e

    async def _recv_frame(self) -> bytes:
        try:
            header = await self._reader.readexactly(HEADER.size)
            _, length = parse_header(header)
            return header + await self._reader.readexactly(length)
        except asyncio.IncompleteReadError as e:
            raise ProtocolFailure(
                "connection closed mid-frame" if e.partial else "connection closed",
                ErrorCode.CONNECTION_LOST,
            ) from e
        except (ConnectionError, OSError) as e:
            raise ProtocolFailure(f"connection lost: {e}", ErrorCode.CONNECTION_LOST) from e

    async def close(self) -> None:
        self._writer.close()
        try:
            await self._writer.wait_closed()
        except (ConnectionError, OSError):
            pass


def parse_endpoint(endpoint: str) -> Tuple[str, str, int]:
    """'inproc:<name>' -> ('inproc', name, 0); 'host:port' -> ('tcp', host, port)."""
    if endpoint.startswith("inproc:"):
        name = endpoint[len("inproc:") :]
        if not name:
            raise ConfigError("inproc endpoint needs a name")
        return "inproc", name, 0
    host, sep, port = endpoint.rpartition(":")
    if not sep or not host or not port.isdigit() or int(port) > 65535:
        raise ConfigError(f"endpoint must be 'host:port' or 'inproc:<name>', got '{endpoint}'")
    return "tcp", host, int(port)


_INPROC_LISTENERS: Dict[str, "Listener"] = {}


class Listener:
    def __init__(self, endpoint: str, server: Optional[asyncio.AbstractServer] = None):
        self.endpoint = endpoint
        self._server = server
        self._pending: asyncio.Queue = asyncio.Queue()

    async def accept(self, timeout: Optional[float] = None) -> Connection:
        try:
            return await asyncio.wait_for(self._pending.get(), timeout)
        except asyncio.TimeoutError:
            raise ProtocolFailure(
                f"no plant connected within {timeout} s", ErrorCode.TIMEOUT
            ) from None

    async def close(self) -> None:
        kind, name, _ = parse_endpoint(self.endpoint)
        if kind == "inproc":
            _INPROC_LISTENERS.pop(name, None)
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()


async def open_listener(endpoint: str) -> Listener:
    kind, host, port = parse_endpoint(endpoint)
    if kind == "inproc":
        if host in _INPROC_LISTENERS:
            raise ConfigError(f"in-process endpoint '{endpoint}' is already in use")
        listener = Listener(endpoint)
        _INPROC_LISTENERS[host] = listener
        return listener

    pending: asyncio.Queue = asyncio.Queue()

    async def _on_client(reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        await pending.put(StreamConnection(reader, writer))

    try:
        server = await asyncio.start_server(_on_client, host, port)
    except OSError as e:
        raise ProtocolFailure(f"cannot listen on {endpoint}: {e}") from e
    bound_port = server.sockets[0].getsockname()[1]
    listener = Listener(f"{host}:{bound_port}", server)
    listener._pending = pending
    logger.info("listening on %s", listener.endpoint)
    return listener


async def open_connection(endpoint: str) -> Connection:
    kind, host, port = parse_endpoint(endpoint)
    if kind == "inproc":
        listener = _INPROC_LISTENERS.get(host)
        if listener is None:
            raise ProtocolFailure(
                f"nothing listening on {endpoint}", ErrorCode.CONNECTION_LOST
            )
        to_server: asyncio.Queue = asyncio.Queue()
        to_client: asyncio.Queue = asyncio.Queue()
        await listener._pending.put(InprocConnection(to_server, to_client))
        return InprocConnection(to_client, to_server)
    try:
        reader, writer = await asyncio.open_connection(host, port)
    except OSError as e:
        raise ProtocolFailure(
            f"cannot connect to {endpoint}: {e}", ErrorCode.CONNECTION_LOST
        ) from e
    return StreamConnection(reader, writer)


# ---------------------------------------------------------------------------
# Sessions
# ---------------------------------------------------------------------------


class CoordinatorCallbacks(Protocol):
    def on_join(self, request: JoinRequest) -> Union[JoinAccept, ProtocolError]: ...


class PlantCallbacks(Protocol):
    plant_id: int

    def join_request(self) -> JoinRequest: ...

    async def on_accept(self, accept: JoinAccept) -> None: ...

    async def on_global_model(
        self, msg: GlobalModel
    ) -> Union[LocalUpdatePlain, LocalUpdateMasked]: ...

    async def on_evaluate(self, msg: EvalRequest) -> EvalReport: ...


@dataclass
class ServerSession:
    """Server-side view of one plant's connection."""

    plant_id: int
    connection: Connection
    timeout: float = DEFAULT_PHASE_TIMEOUT

    async def request(self, msg: Message, expect: Tuple[Type, ...]) -> Message:
        await self.connection.send(msg)
        reply = await self.connection.recv(self.timeout)
        if isinstance(reply, ProtocolError):
            raise ProtocolFailure(
                f"plant {self.plant_id} reported: {reply.text}", reply.code
            )
        if not isinstance(reply, expect):
            raise ProtocolFailure(
                f"plant {self.plant_id} sent {type(reply).__name__}, "
                f"expected {'/'.join(c.__name__ for c in expect)}",
                ErrorCode.UNEXPECTED_MESSAGE,
            )
        if getattr(reply, "t", None) != getattr(msg, "t", None):
            raise ProtocolFailure(
                f"plant {self.plant_id} answered round {reply.t} "
                f"to round {msg.t}",
                ErrorCode.UNEXPECTED_MESSAGE,
            )
        if getattr(reply, "plant_id", self.plant_id) != self.plant_id:
            raise ProtocolFailure(
                f"session of plant {self.plant_id} sent data for plant {reply.plant_id}",
                ErrorCode.UNEXPECTED_MESSAGE,
            )
        return reply

    async def notify(self, msg: Message) -> None:
        await self.connection.send(msg)

    async def close(self) -> None:
        await self.connection.close()


class FederationServer:
    def __init__(self, listener: Listener, callbacks: CoordinatorCallbacks, timeout: float):
        self.listener = listener
        self.callbacks = callbacks
        self.timeout = timeout
        self.rejected = 0

    @property
    def endpoint(self) -> str:
        return self.listener.endpoint

    async def _reject(self, conn: Connection, code: int, text: str) -> None:
        self.rejected += 1
        logger.warning("rejected plant connection: %s", text)
        try:
            await conn.send(ProtocolError(code, text))
        except ProtocolFailure:
            pass
        await conn.close()

    async def wait_for_plants(
        self, expected: int, join_timeout: Optional[float] = None
    ) -> Dict[int, ServerSession]:
        """Accept connections until `expected` plants have joined."""
        if expected < 1:
            raise ConfigError("a federation needs at least one plant")
        sessions: Dict[int, ServerSession] = {}
        deadline = None if join_timeout is None else time.monotonic() + join_timeout
        while len(sessions) < expected:
            remaining = None if deadline is None else max(deadline - time.monotonic(), 0.0)
            conn = await self.listener.accept(remaining)
            try:
                request = await conn.recv(self.timeout)
            except ProtocolFailure as exc:
                await self._reject(conn, exc.code or ErrorCode.UNEXPECTED_MESSAGE, str(exc))
                continue
            if not isinstance(request, JoinRequest):
                await self._reject(
                    conn, ErrorCode.UNEXPECTED_MESSAGE, "first message must be JoinRequest"
                )
                continue
            if request.plant_id in sessions:
                await self._reject(
                    conn, ErrorCode.DUPLICATE_PLANT, f"plant {request.plant_id} already joined"
                )
                continue
            reply = self.callbacks.on_join(request)
            if isinstance(reply, ProtocolError):
                await self._reject(conn, reply.code, reply.text)
                continue
            await conn.send(reply)
            sessions[request.plant_id] = ServerSession(request.plant_id, conn, self.timeout)
            logger.info("plant %d joined (%d/%d)", request.plant_id, len(sessions), expected)
        return dict(sorted(sessions.items()))

    async def close(self) -> None:
        await self.listener.close()


async def serve(
    endpoint: str,
    callbacks: CoordinatorCallbacks,
    timeout: float = DEFAULT_PHASE_TIMEOUT,
) -> FederationServer:
    return FederationServer(await open_listener(endpoint), callbacks, timeout)


async def connect(
    endpoint: str,
    callbacks: PlantCallbacks,
    timeout: float = DEFAULT_PHASE_TIMEOUT,
) -> int:
    """
    Run one plant's session until Shutdown.

    Returns:
        The number of acknowledged rounds.
    """
    conn = await open_connection(endpoint)
    try:
        await conn.send(callbacks.join_request())
        reply = await conn.recv(timeout)
        if isinstance(reply, ProtocolError):
            raise ProtocolFailure(f"join rejected: {reply.text}", reply.code)
        if not isinstance(reply, JoinAccept):
            raise ProtocolFailure(
                f"expected JoinAccept, got {type(reply).__name__}",
                ErrorCode.UNEXPECTED_MESSAGE,
            )
        await callbacks.on_accept(reply)

        last_acked = 0
        rounds_done = 0
        while True:
            # the server may spend several phases on other plants between messages
            msg = await conn.recv()
            try:
                if isinstance(msg, GlobalModel):
                    ensure_round_advances(last_acked, msg.t)
                    await conn.send(await callbacks.on_global_model(msg))
                elif isinstance(msg, EvalRequest):
                    await conn.send(await callbacks.on_evaluate(msg))
                elif isinstance(msg, RoundAck):
                    last_acked = msg.t
                    rounds_done += 1
                elif isinstance(msg, Shutdown):
                    return rounds_done
                elif isinstance(msg, ProtocolError):
                    raise ProtocolFailure(f"server aborted: {msg.text}", msg.code)
                else:
                    raise ProtocolFailure(
                        f"unexpected {type(msg).__name__} from server",
                        ErrorCode.UNEXPECTED_MESSAGE,
                    )
            except FedPlantError as exc:
                if not (isinstance(msg, ProtocolError)):
                    code = getattr(exc, "code", None) or ErrorCode.ABORTED
                    try:
                        await conn.send(ProtocolError(int(code), str(exc)))
                    except ProtocolFailure:
                        pass
                raise
    finally:
        await conn.close()
