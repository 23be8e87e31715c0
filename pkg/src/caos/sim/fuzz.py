"""Interleaved multi-client fuzzing with invariant checks and read verification.

The scheduler interleaves client accesses at message granularity: each step
delivers one read or write request for one randomly chosen client, so lock
conflicts arise naturally, and with a small probability the virtual clock
jumps past the lock timeout while a client is mid-access, forcing its write
to be rejected as stale. At every quiescent point (no access in flight, no
live lock) the consolidation and availability invariants are checked
against a decrypted snapshot.

A shadow ledger of committed writes (serialized through the single
read-write client) defines correctness for reads:

  * every returned payload must be byte-identical to the committed version
    carrying the returned timestamp (no torn or phantom data);
  * the read-write client must always see its own newest committed write;
  * no client may travel back in time on a block it already observed.

Read-only clients may legitimately return a version older than the global
newest — their map simply has not caught up — so "latest" is judged
against what each client can know.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field

from ..client import OP_READ, OP_WRITE
from ..core import Role
from ..errors import CaosError
from .checkers import CheckerView, Violation, check_all
from .world import SealedWorld, SimClient

SCHEMA_VERSION = 1


class ShadowLedger:
    """Committed versions per bid, in commit order."""

    def __init__(self, n: int, init_ts: int, payloads: list[bytes]):
        self.versions: dict[int, list[tuple[int, bytes]]] = {
            bid: [(init_ts, payloads[bid])] for bid in range(n)
        }

    def record(self, bid: int, ts: int, data: bytes) -> None:
        self.versions[bid].append((ts, data))

    def latest_ts(self, bid: int) -> int:
        return self.versions[bid][-1][0]

    def current_ts_map(self) -> dict[int, int]:
        return {bid: vs[-1][0] for bid, vs in self.versions.items()}

    def payload_at(self, bid: int, ts: int) -> bytes | None:
        for vts, data in self.versions[bid]:
            if vts == ts:
                return data
        return None


@dataclass
class FuzzReport:
    schema: int
    seed: int
    steps: int
    accesses: int
    reads_verified: int
    writes_committed: int
    retries: int
    locked: int
    stale: int
    wrong_block: int
    forced_timeouts: int
    quiescent_checks: int
    violations: list[dict] = field(default_factory=list)
    read_failures: list[str] = field(default_factory=list)
    trace_sha256: str = ""
    empty_entry_checks: int = 0  # quiescent checks that saw a transiently emptied entry
    max_empty_entries: int = 0

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    @property
    def clean(self) -> bool:
        return not self.violations and not self.read_failures


def run_interleaved_fuzz(n: int = 16, N: int = 64, steps: int = 20_000, seed: int = 0,
                         block_size: int = 32, timeout_prob: float = 0.01,
                         roles=(Role.READ_WRITE, Role.READ_ONLY, Role.OBFUSCATION),
                         check_invariants: bool = True) -> FuzzReport:
    roles = list(roles)
    C = len(roles)
    world = SealedWorld(n, N, C, roles, block_size, seed=seed)
    sched = random.Random(seed ^ 0x5EED5EED)
    ledger = ShadowLedger(n, world.init_ts, world.initial_payloads)
    trace = hashlib.sha256()

    report = FuzzReport(
        schema=SCHEMA_VERSION, seed=seed, steps=steps, accesses=0,
        reads_verified=0, writes_committed=0, retries=0, locked=0, stale=0,
        wrong_block=0, forced_timeouts=0, quiescent_checks=0,
    )
    empty_entry_checks = [0, 0]  # checks with at least one emptied entry, max seen
    last_seen: dict[tuple[int, int], int] = {}

    def verify_read(c: SimClient, bid: int, res) -> None:
        data = ledger.payload_at(bid, res.ret_ts)
        if data is None:
            report.read_failures.append(
                f"client {c.client_id} read bid {bid} at unknown ts {res.ret_ts}"
            )
            return
        if data != res.out:
            report.read_failures.append(
                f"client {c.client_id} read bid {bid} ts {res.ret_ts}: payload mismatch"
            )
            return
        if c.role == Role.READ_WRITE and res.ret_ts != ledger.latest_ts(bid):
            report.read_failures.append(
                f"read-write client missed its own write of bid {bid}: "
                f"returned ts {res.ret_ts}, newest {ledger.latest_ts(bid)}"
            )
            return
        prev = last_seen.get((c.client_id, bid))
        if prev is not None and res.ret_ts < prev:
            report.read_failures.append(
                f"client {c.client_id} went back in time on bid {bid}: {res.ret_ts} < {prev}"
            )
            return
        last_seen[(c.client_id, bid)] = res.ret_ts
        report.reads_verified += 1

    def run_checkers() -> None:
        report.quiescent_checks += 1
        view = CheckerView(
            blocks=world.decrypted_slots(),
            maps=[c.cmap for c in world.clients],
            current_ts=ledger.current_ts_map(),
        )
        violations, empty_entries = check_all(view)
        for v in violations:
            report.violations.append({"invariant": v.invariant, "detail": v.detail})
        if empty_entries:
            empty_entry_checks[0] += 1
            empty_entry_checks[1] = max(empty_entry_checks[1], empty_entries)

    payload_rng = random.Random(seed ^ 0xDA7A)
    for step in range(steps):
        c = world.clients[sched.randrange(len(world.clients))]
        if c.idle:
            if c.role == Role.OBFUSCATION:
                world.start_access(c, "oc", None, None)
            else:
                bid = sched.randrange(n)
                if c.role == Role.READ_WRITE and sched.random() < 0.5:
                    world.start_access(c, OP_WRITE, bid, payload_rng.randbytes(block_size))
                else:
                    world.start_access(c, OP_READ, bid)
        else:
            # mid-access: maybe force the lock to expire before the write lands
            if c._pending[0] == "write" and sched.random() < timeout_prob:
                world.clock.advance(world.server.lock_timeout_ms + 1)
                report.forced_timeouts += 1

        world.clock.advance(1)
        res = world.step_client(c)
        if res is None:
            continue
        acc = dict(c._access) if c._access else None
        done = world.finish_attempt(c, res)
        if done is None:
            report.retries += 1
            continue

        report.accesses += 1
        if done.pattern:
            trace.update(
                f"{c.client_id}:{done.pattern.reads}:{done.pattern.writes}".encode()
            )
        if done.wrote is not None:
            ledger.record(*done.wrote)
            report.writes_committed += 1
        elif acc and acc["op"] == OP_READ:
            verify_read(c, acc["bid"], done)

        if check_invariants and world.quiescent:
            run_checkers()

    report.empty_entry_checks = empty_entry_checks[0]
    report.max_empty_entries = empty_entry_checks[1]
    report.locked = sum(c.stats.locked for c in world.clients)
    report.stale = sum(c.stats.stale for c in world.clients)
    report.wrong_block = sum(c.stats.wrong_block for c in world.clients)
    report.trace_sha256 = trace.hexdigest()
    return report
