"""Domain types shared by clients, server and simulator.

A store is N fixed-size encrypted slots addressed by position; clients
track where each block id lives through a local map that they maintain
independently and reconcile from block metadata (consolidation counter
`cns`, timestamp `ts`). Everything in this module is a pure value type:
no I/O, no crypto.

Position sets inside a map entry (`psns`, `vf`) are kept as ascending
lists so that serialization and seeded tests are reproducible.
"""

from __future__ import annotations

import struct
from bisect import insort
from dataclasses import dataclass, field
from enum import IntEnum

from .errors import CodecError, MapLookupError

# Block id reserved for slots whose content is reclaimable. Never a map key.
FREE_BID = (1 << 64) - 1

_U64_MAX = (1 << 64) - 1


class Role(IntEnum):
    READ_WRITE = 0
    READ_ONLY = 1
    OBFUSCATION = 2


def hlc_next(last: int, wall_ms: int) -> int:
    """Next hybrid timestamp: wall-clock milliseconds, bumped past `last`.

    Strictly increasing per issuing clock regardless of wall-clock stalls
    or regressions.
    """
    return wall_ms if wall_ms > last else last + 1


class HybridClock:
    """Stateful wrapper around hlc_next bound to a wall-clock source."""

    __slots__ = ("last", "_wall_fn")

    def __init__(self, wall_fn, last: int = 0):
        self.last = last
        self._wall_fn = wall_fn

    def next(self) -> int:
        self.last = hlc_next(self.last, self._wall_fn())
        return self.last


class BlockPlain:
    """Decrypted store block: id, consolidation count, timestamp, payload."""

    __slots__ = ("bid", "cns", "ts", "data")

    def __init__(self, bid: int, cns: int, ts: int, data: bytes):
        self.bid = bid
        self.cns = cns
        self.ts = ts
        self.data = data

    @property
    def is_free(self) -> bool:
        return self.bid == FREE_BID

    def copy(self) -> "BlockPlain":
        return BlockPlain(self.bid, self.cns, self.ts, self.data)

    def __eq__(self, other):
        return (
            isinstance(other, BlockPlain)
            and self.bid == other.bid
            and self.cns == other.cns
            and self.ts == other.ts
            and self.data == other.data
        )

    def __repr__(self):
        bid = "FREE" if self.is_free else self.bid
        return f"BlockPlain(bid={bid}, cns={self.cns}, ts={self.ts}, |data|={len(self.data)})"


def free_block(ts: int, cns: int, block_size: int, data: bytes | None = None) -> BlockPlain:
    return BlockPlain(FREE_BID, cns, ts, data if data is not None else bytes(block_size))


class MapEntry:
    """Per-block-id record: known positions, newest timestamp, verified positions.

    `vf` is always a subset of `psns`: a position enters `vf` only when the
    client has observed the block there carrying cns equal to the client
    count, and leaves together with its `psns` membership.
    """

    __slots__ = ("psns", "ts", "vf")

    def __init__(self, psns=(), ts: int = 0, vf=()):
        self.psns = sorted(psns)
        self.ts = ts
        self.vf = sorted(vf)

    def copy(self) -> "MapEntry":
        e = MapEntry.__new__(MapEntry)
        e.psns = list(self.psns)
        e.ts = self.ts
        e.vf = list(self.vf)
        return e

    def drop_position(self, p: int) -> None:
        if p in self.psns:
            self.psns.remove(p)
        if p in self.vf:
            self.vf.remove(p)

    def __repr__(self):
        return f"MapEntry(psns={self.psns}, ts={self.ts}, vf={self.vf})"


@dataclass
class AccessPattern:
    """Positions touched by one store access, in transmitted order."""

    reads: list[int]
    writes: list[int]
    seq: int = 0


MAP_MAGIC = b"CAOSMAP1"
MAP_VERSION = 1
_MAP_HEADER = struct.Struct("<8sHQQHHB")


class ClientMap:
    """A client's view of where every block id can be retrieved.

    Invariants maintained by the mutators here:
      * no position is listed under two different block ids;
      * vf is a subset of psns for every entry;
      * exactly n entries, never keyed by the FREE sentinel.

    `cns_clamped` and `sync_anomalies` are runtime diagnostics counters
    (not persisted): occurrences of consolidation counts that would have
    run past the client count, and of verified-position insertions whose
    position was unexpectedly missing from psns.
    """

    __slots__ = (
        "entries",
        "n",
        "N",
        "client_count",
        "client_id",
        "role",
        "cns_clamped",
        "sync_anomalies",
    )

    def __init__(self, n: int, N: int, client_count: int, client_id: int, role: Role):
        self.entries: dict[int, MapEntry] = {}
        self.n = n
        self.N = N
        self.client_count = client_count
        self.client_id = client_id
        self.role = Role(role)
        self.cns_clamped = 0
        self.sync_anomalies = 0

    # -- lookups -----------------------------------------------------------

    def entry(self, bid: int) -> MapEntry:
        try:
            return self.entries[bid]
        except KeyError:
            raise MapLookupError(f"block id {bid} not in client map") from None

    def owner_of(self, p: int) -> int | None:
        """Block id currently listing position p, if any (linear scan)."""
        for bid, e in self.entries.items():
            if p in e.psns:
                return bid
        return None

    # -- mutators ----------------------------------------------------------

    def move_position(self, p: int, from_bid: int, to_bid: int) -> None:
        """Relocate p between entries; p must currently be listed under from_bid."""
        src = self.entry(from_bid)
        assert p in src.psns, f"position {p} not listed under bid {from_bid}"
        src.drop_position(p)
        dst = self.entry(to_bid)
        if p not in dst.psns:
            insort(dst.psns, p)

    def adopt(self, other: "ClientMap") -> None:
        """Commit a staged copy of this map (same identity fields)."""
        self.entries = other.entries
        self.cns_clamped = other.cns_clamped
        self.sync_anomalies = other.sync_anomalies

    def clone(self) -> "ClientMap":
        m = ClientMap(self.n, self.N, self.client_count, self.client_id, self.role)
        m.entries = {bid: e.copy() for bid, e in self.entries.items()}
        m.cns_clamped = self.cns_clamped
        m.sync_anomalies = self.sync_anomalies
        return m

    # -- serialization -----------------------------------------------------

    def to_bytes(self) -> bytes:
        out = [
            _MAP_HEADER.pack(
                MAP_MAGIC, MAP_VERSION, self.n, self.N,
                self.client_count, self.client_id, int(self.role),
            )
        ]
        for bid in sorted(self.entries):
            e = self.entries[bid]
            out.append(struct.pack("<QQ", bid, e.ts))
            out.append(struct.pack("<I", len(e.psns)))
            out.append(struct.pack(f"<{len(e.psns)}Q", *e.psns) if e.psns else b"")
            out.append(struct.pack("<I", len(e.vf)))
            out.append(struct.pack(f"<{len(e.vf)}Q", *e.vf) if e.vf else b"")
        return b"".join(out)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ClientMap":
        if len(raw) < _MAP_HEADER.size:
            raise CodecError("map file truncated before header")
        magic, version, n, N, client_count, client_id, role = _MAP_HEADER.unpack_from(raw, 0)
        if magic != MAP_MAGIC:
            raise CodecError("bad map file magic")
        if version != MAP_VERSION:
            raise CodecError(f"unsupported map file version {version}")
        m = cls(n, N, client_count, client_id, Role(role))
        off = _MAP_HEADER.size
        for _ in range(n):
            try:
                bid, ts = struct.unpack_from("<QQ", raw, off)
                off += 16
                (cnt,) = struct.unpack_from("<I", raw, off)
                off += 4
                psns = struct.unpack_from(f"<{cnt}Q", raw, off)
                off += 8 * cnt
                (cnt,) = struct.unpack_from("<I", raw, off)
                off += 4
                vf = struct.unpack_from(f"<{cnt}Q", raw, off)
                off += 8 * cnt
            except struct.error:
                raise CodecError(f"map file truncated at offset {off}") from None
            if bid == FREE_BID:
                raise CodecError("map file lists the FREE sentinel as a block id")
            m.entries[bid] = MapEntry(psns, ts, vf)
        if off != len(raw):
            raise CodecError(f"{len(raw) - off} trailing bytes after map records")
        return m

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ClientMap":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def map_move_position(cmap: ClientMap, p: int, from_bid: int, to_bid: int) -> ClientMap:
    """Module-level spelling of ClientMap.move_position; mutates and returns cmap."""
    cmap.move_position(p, from_bid, to_bid)
    return cmap
