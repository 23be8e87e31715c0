"""Runtime invariant checkers over a quiescent world snapshot.

Consolidation accounting (the first invariant). A block copy's cns field
counts the clients that have touched exactly that copy: whoever wrote it
plus every client whose sync has since discovered it. A client "knows" the
copy at position p when its map lists p under the block's id with a
matching timestamp.

Exact equality between cns and the knower count is not an invariant of the
running system: a position can be reassigned away from a block and later
receive a fresh same-version copy of it back, and clients that never
observed the interlude still (correctly) list the position while the fresh
copy's counter restarted at one. What does hold, and what the reassignment
safety argument actually needs, is one-sided:

  * every copy's counter stays within [1, client_count];
  * on copies of a block's current version, the counter never exceeds the
    number of knowing clients — each increment belongs to a distinct
    client that listed the position when it touched the copy and has had
    no reason to delist it since;
  * a current copy whose counter reached client_count is known to every
    client (this corollary is what licenses reassigning verified
    positions).

The second invariant is availability: no write may ever be lost, and no
client that is up to date on a block may lose its way to it. Two checkable
clauses:

  * existence — for every block id, some store position holds its current
    version (the committed data physically survives all shuffling);
  * converged availability — every client whose map timestamp for a block
    equals the block's current version lists at least one position that
    really holds that current version. Reassignments are consolidation-
    gated, so an up-to-date client can never be stripped of its last
    current position.

Clients lagging behind the current version are exempt from the second
clause: a newer write deliberately invalidates their position sets, and a
freed position can be reused for another block before they notice, so
their listings may rot until an access heals them (stale copies still
serve them consistent reads, and recovery is exercised end to end by the
fuzzer's read verification). In workloads without data writes nobody can
lag, and the clause binds every client — that is exactly the regime the
redundancy argument guarantees. A map entry whose position list was
emptied by corrections is reported separately as a transient, not as a
violation.

Checks only make sense at quiescent points (no locks held): mid-access the
accounting is transiently violated by design.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..core import BlockPlain, ClientMap


@dataclass
class Violation:
    invariant: str
    detail: str


@dataclass
class CheckerView:
    """God's-eye snapshot: decrypted slots, all client maps, current versions.

    `current_ts[bid]` is the timestamp of the newest committed version of the
    block (from the write ledger, or the initialization stamp).
    """

    blocks: list[BlockPlain]
    maps: list[ClientMap]
    current_ts: dict[int, int]


def _knowers(view: CheckerView, p: int, blk: BlockPlain) -> list[int]:
    out = []
    for cmap in view.maps:
        e = cmap.entries.get(blk.bid)
        if e is not None and e.ts == blk.ts and p in e.psns:
            out.append(cmap.client_id)
    return out


def check_inv1(view: CheckerView) -> list[Violation]:
    """Consolidation accounting at every position holding a real block."""
    violations = []
    client_count = len(view.maps)
    for p, blk in enumerate(view.blocks):
        if blk.is_free:
            continue
        if not 1 <= blk.cns <= client_count:
            violations.append(Violation(
                "INV-1",
                f"position {p}: bid {blk.bid} has cns={blk.cns} outside [1, {client_count}]",
            ))
            continue
        if blk.ts != view.current_ts.get(blk.bid):
            continue  # superseded copy: knowers drift away without decrements
        know = _knowers(view, p, blk)
        if blk.cns > len(know):
            violations.append(Violation(
                "INV-1",
                f"position {p}: current copy of bid {blk.bid} has cns={blk.cns} "
                f"exceeding its {len(know)} knowing clients {know}",
            ))
        if blk.cns == client_count and len(know) != client_count:
            violations.append(Violation(
                "INV-1'",
                f"position {p}: bid {blk.bid} fully consolidated but clients "
                f"{sorted(set(range(client_count)) - set(know))} do not know it",
            ))
    return violations


def check_inv2(view: CheckerView) -> tuple[list[Violation], int]:
    """Existence and serviceability; returns (violations, empty-entry count)."""
    violations = []
    empty_entries = 0
    positions_of: dict[int, list[int]] = {}
    for p, blk in enumerate(view.blocks):
        if not blk.is_free:
            positions_of.setdefault(blk.bid, []).append(p)

    for bid, want_ts in view.current_ts.items():
        if not any(view.blocks[p].ts == want_ts for p in positions_of.get(bid, ())):
            violations.append(Violation(
                "INV-2", f"bid {bid}: no store position holds its current version (ts {want_ts})"
            ))

    for cmap in view.maps:
        for bid, entry in cmap.entries.items():
            if not entry.psns:
                empty_entries += 1
            want_ts = view.current_ts[bid]
            if entry.ts != want_ts:
                continue  # lagging client: heals on contact, reads stay consistent
            if not entry.psns:
                violations.append(Violation(
                    "INV-2",
                    f"client {cmap.client_id}, bid {bid}: up to date (ts {want_ts}) "
                    f"but no position listed",
                ))
                continue
            ok = any(
                view.blocks[p].bid == bid and view.blocks[p].ts == want_ts
                for p in entry.psns
            )
            if not ok:
                violations.append(Violation(
                    "INV-2",
                    f"client {cmap.client_id}, bid {bid}: up to date (ts {want_ts}) but "
                    f"none of the listed positions {entry.psns} holds the current version",
                ))
    return violations, empty_entries


def positions_known_to_all(view: CheckerView, bid: int) -> list[int]:
    """Current-version positions of bid listed by every client (diagnostic)."""
    want_ts = view.current_ts[bid]
    return [
        p for p, blk in enumerate(view.blocks)
        if blk.bid == bid and blk.ts == want_ts
        and all(p in m.entries[bid].psns for m in view.maps)
    ]


def check_all(view: CheckerView) -> tuple[list[Violation], int]:
    """All invariant violations plus the transient empty-entry count."""
    inv2, empty_entries = check_inv2(view)
    return check_inv1(view) + inv2, empty_entries
