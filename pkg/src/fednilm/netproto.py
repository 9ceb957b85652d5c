"""Length-prefixed binary transport for running the federation across processes.

Frame layout (little-endian)::

    "FNLM" | version u8 | msg_type u8 | payload_len u32 | payload | crc32(payload) u32

Parameter blocks inside payloads are ``spec_hash u64 | count u64 | count x f32``,
the same bytes as a checkpoint body.
"""
from __future__ import annotations

import logging
import queue
import socket
import struct
import threading
import time
import zlib
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import ConfigError, ProtocolError, SpecHashMismatch, TrainingAborted
from .fedavg import (
    ClientState,
    ClientUpdate,
    FederationConfig,
    RoundRecord,
    aggregate,
    append_jsonl,
    local_update,
    params_digest,
)
from .model import ParameterVector, check_params, decode_params_body, encode_params_body, init_params
from .optim import lr_schedule

log = logging.getLogger(__name__)

MAGIC = b"FNLM"
VERSION = 0x01
HEADER = struct.Struct("<4sBBI")
HEADER_LEN = HEADER.size  # 10
CRC_LEN = 4
MAX_PAYLOAD = 1 << 30  # decoder guard; the encoder limit is the u32 field itself

MSG_HELLO = 1
MSG_GLOBAL = 2
MSG_UPDATE = 3
MSG_ROUND_DONE = 4
MSG_SHUTDOWN = 5

SHUTDOWN_DONE = 0
SHUTDOWN_ABORTED = 1
SHUTDOWN_BAD_SPEC = 2
SHUTDOWN_DUPLICATE_ID = 3
SHUTDOWN_PROTOCOL = 4


class FrameError(ProtocolError):
    """A corrupt frame; fatal for the connection."""


class BadMagic(FrameError):
    pass


class BadVersion(FrameError):
    pass


class UnknownMessageType(FrameError):
    pass


class ChecksumError(FrameError):
    pass


class MalformedPayload(FrameError):
    pass


class FrameTooLarge(FrameError):
    pass


class NeedMoreBytes(Exception):
    """The buffer holds only part of a frame; read more and retry."""

    def __init__(self, needed: int):
        self.needed = needed
        super().__init__(f"need at least {needed} bytes")


class ProtocolViolation(ProtocolError):
    pass


@dataclass(frozen=True)
class Hello:
    client_id: int
    n_k: int
    spec_hash: int


@dataclass(frozen=True)
class Global:
    round: int
    lr: float
    params: ParameterVector


@dataclass(frozen=True)
class Update:
    round: int
    client_id: int
    n_k: int
    mean_train_loss: float
    params: ParameterVector


@dataclass(frozen=True)
class RoundDone:
    round: int
    global_digest: int


@dataclass(frozen=True)
class Shutdown:
    reason_code: int


Message = Union[Hello, Global, Update, RoundDone, Shutdown]

_HELLO = struct.Struct("<IQQ")
_GLOBAL = struct.Struct("<Id")
_UPDATE = struct.Struct("<IIQd")
_ROUND_DONE = struct.Struct("<IQ")
_SHUTDOWN = struct.Struct("<I")

_TYPE_OF = {Hello: MSG_HELLO, Global: MSG_GLOBAL, Update: MSG_UPDATE, RoundDone: MSG_ROUND_DONE, Shutdown: MSG_SHUTDOWN}


def _payload(msg: Message) -> bytes:
    if isinstance(msg, Hello):
        return _HELLO.pack(msg.client_id, msg.n_k, msg.spec_hash)
    if isinstance(msg, Global):
        return _GLOBAL.pack(msg.round, msg.lr) + encode_params_body(msg.params)
    if isinstance(msg, Update):
        return _UPDATE.pack(msg.round, msg.client_id, msg.n_k, msg.mean_train_loss) + encode_params_body(msg.params)
    if isinstance(msg, RoundDone):
        return _ROUND_DONE.pack(msg.round, msg.global_digest)
    if isinstance(msg, Shutdown):
        return _SHUTDOWN.pack(msg.reason_code)
    raise TypeError(f"not a protocol message: {msg!r}")


def encode_frame(msg: Message) -> bytes:
    try:
        payload = _payload(msg)
    except struct.error as exc:
        raise ProtocolError(f"field out of range in {type(msg).__name__}: {exc}") from None
    if len(payload) > 0xFFFFFFFF:
        raise ProtocolError("payload exceeds 2**32 - 1 bytes")
    head = HEADER.pack(MAGIC, VERSION, _TYPE_OF[type(msg)], len(payload))
    return head + payload + struct.pack("<I", zlib.crc32(payload))


def _params_exact(payload: bytes, offset: int) -> ParameterVector:
    try:
        params, end = decode_params_body(payload, offset)
    except Exception as exc:
        raise MalformedPayload(str(exc)) from None
    if end != len(payload):
        raise MalformedPayload(f"{len(payload) - end} unexpected bytes after parameter block")
    return params


def _decode_payload(msg_type: int, payload: bytes) -> Message:
    def fixed(st: struct.Struct):
        if len(payload) != st.size:
            raise MalformedPayload(f"type {msg_type} payload must be {st.size} bytes, got {len(payload)}")
        return st.unpack(payload)

    if msg_type == MSG_HELLO:
        return Hello(*fixed(_HELLO))
    if msg_type == MSG_ROUND_DONE:
        return RoundDone(*fixed(_ROUND_DONE))
    if msg_type == MSG_SHUTDOWN:
        return Shutdown(*fixed(_SHUTDOWN))
    if msg_type == MSG_GLOBAL:
        if len(payload) < _GLOBAL.size:
            raise MalformedPayload("short GLOBAL payload")
        rnd, lr = _GLOBAL.unpack_from(payload)
        if not np.isfinite(lr) or lr < 0:
            raise MalformedPayload(f"invalid learning rate {lr}")
        return Global(rnd, lr, _params_exact(payload, _GLOBAL.size))
    if msg_type == MSG_UPDATE:
        if len(payload) < _UPDATE.size:
            raise MalformedPayload("short UPDATE payload")
        rnd, cid, n_k, loss = _UPDATE.unpack_from(payload)
        return Update(rnd, cid, n_k, loss, _params_exact(payload, _UPDATE.size))
    raise UnknownMessageType(f"unknown message type {msg_type}")


def decode_frame(buf: bytes, max_payload: int = MAX_PAYLOAD) -> tuple[Message, int]:
    """Decode one frame from the start of ``buf``.

    Returns ``(message, bytes_consumed)``.  Raises NeedMoreBytes when the frame
    is incomplete and a FrameError subclass when it is corrupt.
    """
    buf = memoryview(buf).tobytes() if not isinstance(buf, bytes) else buf
    head = min(len(buf), 4)
    if buf[:head] != MAGIC[:head]:
        raise BadMagic(f"bad magic {buf[:4]!r}")
    if len(buf) < HEADER_LEN:
        raise NeedMoreBytes(HEADER_LEN)
    _, version, msg_type, length = HEADER.unpack_from(buf)
    if version != VERSION:
        raise BadVersion(f"unsupported version {version}")
    if msg_type not in _TYPE_OF.values():
        raise UnknownMessageType(f"unknown message type {msg_type}")
    if length > max_payload:
        raise FrameTooLarge(f"declared payload of {length} bytes exceeds limit {max_payload}")
    total = HEADER_LEN + length + CRC_LEN
    if len(buf) < total:
        raise NeedMoreBytes(total)
    payload = buf[HEADER_LEN : HEADER_LEN + length]
    (crc,) = struct.unpack_from("<I", buf, HEADER_LEN + length)
    if zlib.crc32(payload) != crc:
        raise ChecksumError("payload checksum mismatch")
    return _decode_payload(msg_type, payload), total


class Connection:
    """Frame-level wrapper around a connected stream socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.buf = bytearray()
        self.bytes_sent = 0
        self.bytes_received = 0

    def send(self, msg: Message) -> int:
        data = encode_frame(msg)
        self.sock.sendall(data)
        self.bytes_sent += len(data)
        return len(data)

    def _fill(self, needed: int) -> None:
        while len(self.buf) < needed:
            chunk = self.sock.recv(max(1 << 16, needed - len(self.buf)))
            if not chunk:
                raise ConnectionError("peer closed the connection")
            self.buf += chunk
            self.bytes_received += len(chunk)

    def recv(self) -> Message:
        while True:
            try:
                msg, used = decode_frame(self.buf)
            except NeedMoreBytes as more:
                self._fill(more.needed)
                continue
            del self.buf[:used]
            return msg

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


def parse_address(address) -> tuple[str, int]:
    if isinstance(address, tuple):
        return address[0], int(address[1])
    host, _, port = str(address).rpartition(":")
    return host or "127.0.0.1", int(port)


# --- coordinator ------------------------------------------------------------------


class Coordinator:
    """Holds the global model only; never touches load data.

    One reader thread per client pushes ``(client_id, message | exception)``
    onto a single queue consumed by the aggregation loop.
    """

    def __init__(self, cfg: FederationConfig, bind_address, expected_clients: int | None = None,
                 hello_timeout: float = 60.0, round_timeout: float | None = None):
        self.cfg = cfg
        self.K = expected_clients or cfg.K
        self.hello_timeout = hello_timeout
        self.round_timeout = round_timeout
        host, port = parse_address(bind_address)
        self.listener = socket.create_server((host, port))
        self.address = self.listener.getsockname()[:2]
        self.conns: dict[int, Connection] = {}
        self.n_k: dict[int, int] = {}
        self.inbox: queue.Queue = queue.Queue()
        self.params: Optional[ParameterVector] = None

    def _reader(self, cid: int, conn: Connection) -> None:
        while True:
            try:
                msg = conn.recv()
            except Exception as exc:  # disconnect or corrupt frame
                self.inbox.put((cid, exc))
                return
            self.inbox.put((cid, msg))
            if isinstance(msg, Shutdown):
                return

    def _admit(self) -> None:
        deadline = time.monotonic() + self.hello_timeout
        spec_hash = self.cfg.arch.spec_hash
        while len(self.conns) < self.K:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TrainingAborted(f"only {len(self.conns)} of {self.K} clients joined")
            self.listener.settimeout(remaining)
            try:
                sock, _ = self.listener.accept()
            except socket.timeout:
                continue
            sock.settimeout(self.hello_timeout)
            conn = Connection(sock)
            try:
                hello = conn.recv()
            except Exception as exc:
                log.warning("dropping connection without a valid HELLO: %s", exc)
                conn.close()
                continue
            sock.settimeout(None)
            reason = None
            if not isinstance(hello, Hello):
                reason = SHUTDOWN_PROTOCOL
            elif hello.spec_hash != spec_hash:
                reason = SHUTDOWN_BAD_SPEC
            elif hello.client_id in self.conns:
                reason = SHUTDOWN_DUPLICATE_ID
            elif hello.n_k < 1:
                reason = SHUTDOWN_PROTOCOL
            if reason is not None:
                log.warning("rejecting client (%r): reason %d", hello, reason)
                try:
                    conn.send(Shutdown(reason))
                finally:
                    conn.close()
                continue
            self.conns[hello.client_id] = conn
            self.n_k[hello.client_id] = hello.n_k
        for cid, conn in self.conns.items():
            threading.Thread(target=self._reader, args=(cid, conn), daemon=True).start()

    def _broadcast(self, msg: Message) -> None:
        for cid in sorted(self.conns):
            try:
                self.conns[cid].send(msg)
            except OSError as exc:
                raise TrainingAborted(f"client {cid} unreachable: {exc}") from None

    def _collect(self, rnd: int) -> list[ClientUpdate]:
        got: dict[int, ClientUpdate] = {}
        while len(got) < self.K:
            try:
                cid, item = self.inbox.get(timeout=self.round_timeout)
            except queue.Empty:
                raise TrainingAborted(f"round {rnd}: timed out waiting for updates") from None
            if isinstance(item, Exception):
                raise TrainingAborted(f"round {rnd}: client {cid} failed: {item}")
            if not isinstance(item, Update):
                raise TrainingAborted(f"round {rnd}: client {cid} sent {type(item).__name__} instead of UPDATE")
            if item.round != rnd or item.client_id != cid or cid in got:
                raise TrainingAborted(f"round {rnd}: out-of-order update from client {cid}")
            if item.n_k != self.n_k[cid]:
                raise TrainingAborted(f"client {cid} changed n_k from {self.n_k[cid]} to {item.n_k}")
            if item.params.spec_hash != self.cfg.arch.spec_hash or item.params.count != self.cfg.arch.param_count:
                raise TrainingAborted(f"client {cid} sent parameters for a different architecture")
            got[cid] = ClientUpdate(cid, item.params, item.n_k, item.mean_train_loss)
        return [got[c] for c in sorted(got)]

    def _bytes(self) -> tuple[int, int]:
        return (sum(c.bytes_sent for c in self.conns.values()), sum(c.bytes_received for c in self.conns.values()))

    def run(self, init: ParameterVector | None = None, log_path=None) -> list[RoundRecord]:
        cfg = self.cfg
        params = init if init is not None else init_params(cfg.arch, cfg.seed)
        check_params(cfg.arch, params)
        if params.dtype != np.float32:
            raise ConfigError("networked federation carries float32 parameters only")
        records = []
        try:
            self._admit()
            for rnd in range(cfg.R):
                t0 = time.perf_counter()
                sent0, recv0 = self._bytes()
                lr = lr_schedule(rnd, cfg.hyper)
                self._broadcast(Global(rnd, lr, params))
                updates = self._collect(rnd)
                params = aggregate(updates)
                digest = params_digest(params)
                self._broadcast(RoundDone(rnd, digest))
                sent1, recv1 = self._bytes()
                rec = RoundRecord(
                    rnd,
                    lr,
                    [{"client_id": u.client_id, "n_k": u.n_k, "mean_train_loss": u.mean_train_loss} for u in updates],
                    digest,
                    None,
                    int(1000 * (time.perf_counter() - t0)),
                    sent1 - sent0,
                    recv1 - recv0,
                )
                records.append(rec)
                if log_path is not None:
                    append_jsonl(log_path, {"kind": "round", **rec.to_dict()})
            self._broadcast(Shutdown(SHUTDOWN_DONE))
        except BaseException:
            for conn in self.conns.values():
                try:
                    conn.send(Shutdown(SHUTDOWN_ABORTED))
                except OSError:
                    pass
            raise
        finally:
            self.params = params
            for conn in self.conns.values():
                conn.close()
            self.listener.close()
        return records


def serve(cfg: FederationConfig, bind_address, expected_clients: int | None = None,
          init: ParameterVector | None = None, log_path=None, **kwargs) -> tuple[ParameterVector, list[RoundRecord]]:
    """Run a coordinator to completion; returns the final global params and the run log."""
    coord = Coordinator(cfg, bind_address, expected_clients, **kwargs)
    records = coord.run(init, log_path)
    return coord.params, records


# --- client -----------------------------------------------------------------------

EXIT_OK = 0
EXIT_PROTOCOL = 4
EXIT_ABORTED = 5


def client_run(connect_address, client: ClientState, cfg: FederationConfig, connect_timeout: float = 30.0) -> int:
    """Join a coordinator and train on request until told to stop.

    Returns 0 on a normal SHUTDOWN; raises ProtocolViolation or ConnectionError
    on misbehaviour, and returns a nonzero status if the coordinator rejects or
    aborts.
    """
    host, port = parse_address(connect_address)
    deadline = time.monotonic() + connect_timeout
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=connect_timeout)
            break
        except OSError:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.05)
    sock.settimeout(None)
    conn = Connection(sock)
    try:
        conn.send(Hello(client.client_id, client.n_k, cfg.arch.spec_hash))
        expected = 0
        trained = None
        while True:
            msg = conn.recv()
            if isinstance(msg, Shutdown):
                if msg.reason_code == SHUTDOWN_DONE:
                    return EXIT_OK
                log.warning("coordinator stopped us with reason %d", msg.reason_code)
                return EXIT_ABORTED if msg.reason_code == SHUTDOWN_ABORTED else EXIT_PROTOCOL
            if isinstance(msg, Global):
                if msg.round != expected:
                    raise ProtocolViolation(f"expected GLOBAL for round {expected}, got {msg.round}")
                if msg.params.spec_hash != cfg.arch.spec_hash:
                    raise SpecHashMismatch("coordinator sent parameters for a different architecture")
                client, loss = local_update(client, msg.params, cfg.E, msg.round, cfg, lr=msg.lr)
                conn.send(Update(msg.round, client.client_id, client.n_k, loss, client.params))
                trained = msg.round
                expected += 1
            elif isinstance(msg, RoundDone):
                if msg.round != trained:
                    raise ProtocolViolation(f"ROUND_DONE for round {msg.round} but last trained {trained}")
            else:
                raise ProtocolViolation(f"unexpected {type(msg).__name__} from coordinator")
    finally:
        conn.close()
