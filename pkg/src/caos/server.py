"""Honest-but-curious store server.

The server holds N fixed-size ciphertext slots and a two-position lock
table; it never sees a key, a block id, or a plaintext. A read of two
positions locks them under one fresh token until the matching write
arrives or the lock times out; conflicting requests fail fast with a
LOCKED error instead of queueing. Every served read/write appends its
position pair to an access log, which doubles as the adversary's
observation channel for the offline analyses in `caos.sim`.

Slot-pair writes go through a small journal (fsynced before the slots are
touched) so that a crash between the two slot writes recovers to either
both old or both new ciphertexts, never a mix.
"""

from __future__ import annotations

import os
import struct
import threading
import time
import zlib

from .errors import CaosError, ConfigError, ProtocolError
from . import wire
from .wire import (
    BulkInit, Err, ErrCode, InfoReq, InfoResp, Message,
    ReadReq, ReadResp, WriteAck, WriteReq,
)

STORE_MAGIC = b"CAOSSTR1"
STORE_VERSION = 1
_STORE_HEADER = struct.Struct("<8sHQIB")  # magic, version, N, ct_size, initialized

_JOURNAL_MAGIC = 0x4C4A4143  # "CAJL"
_JOURNAL_HEAD = struct.Struct("<IQQI")  # magic, p1, p2, ct_size

DEFAULT_LOCK_TIMEOUT_MS = 5000


class CrashInjected(Exception):
    """Raised by a fail-point to abandon a write mid-flight (tests only)."""


class FailPoints:
    """Crash injection hooks for write_pair.

    `stage` names a point in the commit sequence; `journal_bytes` limits how
    much of the journal record hits the file before the crash when stage is
    "journal_partial".
    """

    def __init__(self, stage: str | None = None, journal_bytes: int = 0):
        self.stage = stage
        self.journal_bytes = journal_bytes

    def hit(self, stage: str) -> None:
        if self.stage == stage:
            raise CrashInjected(stage)


class _MemorySlots:
    """In-memory slot backend for the simulator: same interface, no files."""

    def __init__(self, N: int, ct_size: int):
        self.N = N
        self.ct_size = ct_size
        self.initialized = False
        self.slots: list[bytes | None] = [None] * N

    def read_slot(self, p: int) -> bytes:
        s = self.slots[p]
        assert s is not None, "read before init"
        return s

    def write_slot(self, p: int, ct: bytes) -> None:
        self.slots[p] = ct

    def write_pair(self, p1: int, c1: bytes, p2: int, c2: bytes, failpoints=None) -> None:
        self.slots[p1] = c1
        self.slots[p2] = c2

    def set_initialized(self) -> None:
        self.initialized = True

    def close(self) -> None:
        pass


class SlotFile:
    """File-backed slot array with journaled pair writes.

    Layout: header | N slots of ct_size bytes. A pair write appends one
    journal record (crc-protected) to `<path>.journal`, fsyncs it, writes
    both slots, fsyncs the store, then truncates the journal. Recovery on
    open replays a complete journal record and discards a torn one.
    """

    def __init__(self, path: str, N: int | None = None, ct_size: int | None = None):
        self.path = str(path)
        self.journal_path = self.path + ".journal"
        exists = os.path.exists(self.path)
        if not exists:
            if N is None or ct_size is None:
                raise ConfigError(f"store file {path} does not exist; N and ct_size required to create it")
            self.N, self.ct_size, self.initialized = N, ct_size, False
            self._fd = os.open(self.path, os.O_RDWR | os.O_CREAT, 0o600)
            self._write_header()
            os.ftruncate(self._fd, self._header_size() + N * ct_size)
            os.fsync(self._fd)
        else:
            self._fd = os.open(self.path, os.O_RDWR)
            self._read_header()
            if N is not None and N != self.N:
                raise ConfigError(f"store file has N={self.N}, configured N={N}")
            if ct_size is not None and ct_size != self.ct_size:
                raise ConfigError(f"store file has ct_size={self.ct_size}, configured {ct_size}")
            expected = self._header_size() + self.N * self.ct_size
            if os.fstat(self._fd).st_size != expected:
                raise CaosError(f"store file length {os.fstat(self._fd).st_size}, expected {expected}")
            self._recover()

    @staticmethod
    def _header_size() -> int:
        return _STORE_HEADER.size

    def _write_header(self) -> None:
        hdr = _STORE_HEADER.pack(STORE_MAGIC, STORE_VERSION, self.N, self.ct_size, int(self.initialized))
        os.pwrite(self._fd, hdr, 0)

    def _read_header(self) -> None:
        raw = os.pread(self._fd, _STORE_HEADER.size, 0)
        if len(raw) != _STORE_HEADER.size:
            raise CaosError("store file truncated before header")
        magic, version, self.N, self.ct_size, init = _STORE_HEADER.unpack(raw)
        if magic != STORE_MAGIC:
            raise CaosError("bad store file magic")
        if version != STORE_VERSION:
            raise CaosError(f"unsupported store file version {version}")
        self.initialized = bool(init)

    def _slot_off(self, p: int) -> int:
        return self._header_size() + p * self.ct_size

    def read_slot(self, p: int) -> bytes:
        raw = os.pread(self._fd, self.ct_size, self._slot_off(p))
        if len(raw) != self.ct_size:
            raise CaosError(f"short read at slot {p}")
        return raw

    def write_slot(self, p: int, ct: bytes) -> None:
        assert len(ct) == self.ct_size
        os.pwrite(self._fd, ct, self._slot_off(p))

    def set_initialized(self) -> None:
        self.initialized = True
        self._write_header()
        os.fsync(self._fd)

    # -- journaled pair write ---------------------------------------------

    def _journal_record(self, p1: int, c1: bytes, p2: int, c2: bytes) -> bytes:
        body = _JOURNAL_HEAD.pack(_JOURNAL_MAGIC, p1, p2, self.ct_size) + c1 + c2
        return body + struct.pack("<I", zlib.crc32(body))

    def write_pair(self, p1: int, c1: bytes, p2: int, c2: bytes, failpoints: FailPoints | None = None) -> None:
        fp = failpoints or FailPoints()
        record = self._journal_record(p1, c1, p2, c2)
        jfd = os.open(self.journal_path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        try:
            if fp.stage == "journal_partial":
                os.write(jfd, record[: fp.journal_bytes])
                os.fsync(jfd)
                raise CrashInjected("journal_partial")
            os.write(jfd, record)
            os.fsync(jfd)
        finally:
            os.close(jfd)
        fp.hit("journal")
        self.write_slot(p1, c1)
        fp.hit("slot1")
        self.write_slot(p2, c2)
        fp.hit("slot2")
        os.fsync(self._fd)
        fp.hit("sync")
        self._clear_journal()

    def _clear_journal(self) -> None:
        if os.path.exists(self.journal_path):
            os.unlink(self.journal_path)

    def _recover(self) -> None:
        if not os.path.exists(self.journal_path):
            return
        with open(self.journal_path, "rb") as f:
            raw = f.read()
        expected = _JOURNAL_HEAD.size + 2 * self.ct_size + 4
        if len(raw) == expected:
            body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
            magic, p1, p2, ct_size = _JOURNAL_HEAD.unpack_from(body, 0)
            if magic == _JOURNAL_MAGIC and ct_size == self.ct_size and crc == zlib.crc32(body):
                c1 = body[_JOURNAL_HEAD.size : _JOURNAL_HEAD.size + ct_size]
                c2 = body[_JOURNAL_HEAD.size + ct_size :]
                self.write_slot(p1, c1)
                self.write_slot(p2, c2)
                os.fsync(self._fd)
        # torn or alien record: the pair write never committed, drop it
        self._clear_journal()

    def close(self) -> None:
        os.close(self._fd)


class LockTable:
    """Two-position locks with expiry; expired entries count as absent."""

    def __init__(self):
        self._locks: dict[int, tuple[int, int]] = {}  # position -> (token, expiry)
        self._tokens: dict[int, tuple[int, int, int]] = {}  # token -> (p1, p2, expiry)
        self._next_token = 1

    def _gc(self, now: int) -> None:
        dead = [t for t, (_, _, exp) in self._tokens.items() if exp <= now]
        for t in dead:
            p1, p2, _ = self._tokens.pop(t)
            for p in (p1, p2):
                held = self._locks.get(p)
                if held and held[0] == t:
                    del self._locks[p]

    def live(self, p: int, now: int) -> bool:
        held = self._locks.get(p)
        return held is not None and held[1] > now

    def acquire(self, p1: int, p2: int, now: int, timeout_ms: int) -> int | None:
        """Lock both positions under one fresh token, or None if either is held."""
        self._gc(now)
        if self.live(p1, now) or self.live(p2, now):
            return None
        token = self._next_token
        self._next_token += 1
        expiry = now + timeout_ms
        self._locks[p1] = (token, expiry)
        self._locks[p2] = (token, expiry)
        self._tokens[token] = (p1, p2, expiry)
        return token

    def take_for_write(self, token: int, p1: int, p2: int, now: int) -> bool:
        """Consume a live token covering exactly {p1, p2}; False if stale."""
        self._gc(now)
        held = self._tokens.get(token)
        if held is None or held[2] <= now:
            return False
        if {held[0], held[1]} != {p1, p2}:
            return False
        self._tokens.pop(token)
        for p in (held[0], held[1]):
            if self._locks.get(p, (None,))[0] == token:
                del self._locks[p]
        return True

    def live_tokens(self, now: int) -> dict[int, tuple[int, int]]:
        self._gc(now)
        return {t: (p1, p2) for t, (p1, p2, exp) in self._tokens.items() if exp > now}


class StoreServer:
    """Message-level request handling over a slot backend.

    `now_fn` supplies milliseconds (virtual in the simulator, wall clock in
    the TCP daemon). `handle` is safe for concurrent callers: the whole
    check-and-act step for a request runs under one mutex, so lock
    acquisition is atomic and conflicting requests fail fast.
    """

    def __init__(self, slots, lock_timeout_ms: int = DEFAULT_LOCK_TIMEOUT_MS,
                 now_fn=None, log_path: str | None = None):
        self.slots = slots
        self.lock_timeout_ms = lock_timeout_ms
        self.now_fn = now_fn if now_fn is not None else lambda: int(time.time() * 1000)
        self.locks = LockTable()
        self.access_log: list[tuple[int, str, int, int, int]] = []
        self._log_seq = 0
        self._log_file = open(log_path, "a", buffering=1) if log_path else None
        self._mutex = threading.Lock()
        self._init_seen: set[int] = set()
        self.failpoints: FailPoints | None = None  # armed by crash tests

    # -- logging ------------------------------------------------------------

    def _log(self, direction: str, p1: int, p2: int, now: int) -> None:
        rec = (self._log_seq, direction, p1, p2, now)
        self._log_seq += 1
        self.access_log.append(rec)
        if self._log_file:
            self._log_file.write(f"{rec[0]} {direction} {p1} {p2} {now}\n")

    # -- request handling ----------------------------------------------------

    def handle(self, msg: Message) -> Message:
        with self._mutex:
            now = self.now_fn()
            if isinstance(msg, InfoReq):
                return self.serve_info()
            if isinstance(msg, ReadReq):
                return self.serve_read(msg.p1, msg.p2, now)
            if isinstance(msg, WriteReq):
                return self.serve_write(msg.token, msg.p1, msg.sealed1, msg.p2, msg.sealed2, now)
            if isinstance(msg, BulkInit):
                return self.serve_bulk_init(msg)
            return Err(ErrCode.BAD_POSITION)

    def serve_info(self) -> Message:
        from .codec import NONCE_BYTES, TAG_BYTES, META_BYTES

        block_size = self.slots.ct_size - NONCE_BYTES - TAG_BYTES - META_BYTES
        return InfoResp(self.slots.N, self.slots.ct_size, block_size)

    def _bad_position(self, *ps: int) -> bool:
        return any(p < 0 or p >= self.slots.N for p in ps)

    def serve_read(self, p1: int, p2: int, now: int) -> Message:
        if not self.slots.initialized:
            return Err(ErrCode.NOT_INITIALIZED)
        if p1 == p2 or self._bad_position(p1, p2):
            return Err(ErrCode.BAD_POSITION)
        token = self.locks.acquire(p1, p2, now, self.lock_timeout_ms)
        if token is None:
            return Err(ErrCode.LOCKED)
        self._log("R", p1, p2, now)
        return ReadResp(token, self.slots.read_slot(p1), self.slots.read_slot(p2))

    def serve_write(self, token: int, p1: int, c1: bytes, p2: int, c2: bytes, now: int) -> Message:
        if not self.slots.initialized:
            return Err(ErrCode.NOT_INITIALIZED)
        if self._bad_position(p1, p2) or len(c1) != self.slots.ct_size or len(c2) != self.slots.ct_size:
            return Err(ErrCode.BAD_POSITION)
        if not self.locks.take_for_write(token, p1, p2, now):
            return Err(ErrCode.STALE_TOKEN)
        self.slots.write_pair(p1, c1, p2, c2, self.failpoints)
        self._log("W", p1, p2, now)
        return WriteAck()

    def serve_bulk_init(self, msg: BulkInit) -> Message:
        if self.slots.initialized:
            return Err(ErrCode.NOT_INITIALIZED)  # re-init refused
        p = msg.start_p
        if self._bad_position(p, p + len(msg.sealed) - 1):
            return Err(ErrCode.BAD_POSITION)
        if any(len(s) != self.slots.ct_size for s in msg.sealed):
            return Err(ErrCode.BAD_POSITION)
        for i, sealed in enumerate(msg.sealed):
            self.slots.write_slot(p + i, sealed)
            self._init_seen.add(p + i)
        if len(self._init_seen) == self.slots.N:
            self.slots.set_initialized()
        return WriteAck()


def memory_server(N: int, ct_size: int, lock_timeout_ms: int = DEFAULT_LOCK_TIMEOUT_MS,
                  now_fn=None) -> StoreServer:
    return StoreServer(_MemorySlots(N, ct_size), lock_timeout_ms, now_fn)


# -- TCP front end -----------------------------------------------------------


def _recv_exact(sock, n: int) -> bytes:
    data = bytearray()
    while len(data) < n:
        chunk = sock.recv(n - len(data))
        if not chunk:
            raise ConnectionError("peer closed")
        data.extend(chunk)
    return bytes(data)


def serve_tcp(server: StoreServer, host: str, port: int, ready_event=None):
    """Blocking request loop; one thread per connection, one frame at a time."""
    import socketserver

    class Handler(socketserver.BaseRequestHandler):
        def handle(self):
            sock = self.request
            while True:
                try:
                    frame = wire.read_frame(lambda n: _recv_exact(sock, n))
                except (ConnectionError, OSError):
                    return
                try:
                    msg = wire.decode_message(frame)
                    resp = server.handle(msg)
                except ProtocolError:
                    resp = Err(ErrCode.BAD_POSITION)
                sock.sendall(wire.encode_message(resp))

    class Srv(socketserver.ThreadingTCPServer):
        allow_reuse_address = True
        daemon_threads = True

    with Srv((host, port), Handler) as srv:
        if ready_event is not None:
            srv_port = srv.server_address[1]
            ready_event.port = srv_port
            ready_event.set()
        srv.serve_forever()
