"""Operator binaries: store server, client tool, obfuscation daemon, lab runner.

Configuration comes from a flat key=value file plus flags; flags win.
Exit codes: 0 ok, 2 configuration error, 3 protocol error, 4 integrity error.
"""

from __future__ import annotations

import json
import os
import random
import sys
import time
from dataclasses import dataclass

import click

from . import __version__, codec
from .client import (
    OP_READ, OP_WRITE, access_rw, connect, init_store, retry_cap_for,
)
from .core import ClientMap, HybridClock, Role
from .errors import (
    AccessError, CaosError, ConfigError, IntegrityError, LockedError,
    ProtocolError, ServerError, StaleTokenError,
)
from .oc import access_oc, init_oc
from .server import DEFAULT_LOCK_TIMEOUT_MS, SlotFile, StoreServer, serve_tcp

EXIT_CONFIG = 2
EXIT_PROTOCOL = 3
EXIT_INTEGRITY = 4


@dataclass
class DeploymentConfig:
    server: str = "127.0.0.1:4640"
    store: str = "store.caos"
    N: int = 0
    block_size: int = 0
    redundancy: int = 2
    client_count: int = 2
    lock_timeout_ms: int = DEFAULT_LOCK_TIMEOUT_MS
    key: str = "store.key"
    map: str = "client.map"
    role: str = "rw"

    def validate(self, n: int | None = None) -> None:
        if self.block_size <= 0:
            raise ConfigError(f"block_size must be positive, got {self.block_size}")
        if self.redundancy < self.client_count:
            raise ConfigError(
                f"redundancy {self.redundancy} below client_count {self.client_count}"
            )
        if n is not None and self.N < self.redundancy * n:
            raise ConfigError(
                f"N={self.N} below redundancy*blocks={self.redundancy * n}"
            )
        if self.lock_timeout_ms <= 0:
            raise ConfigError(f"lock_timeout_ms must be positive, got {self.lock_timeout_ms}")


_INT_FIELDS = {"N", "block_size", "redundancy", "client_count", "lock_timeout_ms"}


def load_config(path: str | None, overrides: dict) -> DeploymentConfig:
    """Parse key=value lines, apply non-None overrides on top."""
    cfg = DeploymentConfig()
    if path:
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, _, val = line.partition("=")
                key = key.strip()
                val = val.strip()
                if not hasattr(cfg, key):
                    raise ConfigError(f"{path}:{lineno}: unknown field {key!r}")
                setattr(cfg, key, int(val) if key in _INT_FIELDS else val)
    for key, val in overrides.items():
        if val is not None:
            setattr(cfg, key, val)
    return cfg


def _exit_code(exc: CaosError) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, IntegrityError):
        return EXIT_INTEGRITY
    return EXIT_PROTOCOL


def _run(cli) -> None:
    try:
        cli(standalone_mode=False)
    except click.ClickException as e:
        e.show()
        sys.exit(EXIT_CONFIG)
    except click.Abort:
        sys.exit(EXIT_CONFIG)
    except CaosError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(_exit_code(e))


def _parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError(f"bad address {addr!r}, expected host:port")
    return host, int(port)


def _wall_ms() -> int:
    return int(time.time() * 1000)


# -- caos-server ---------------------------------------------------------------


@click.command(name="caos-server")
@click.version_option(__version__)
@click.option("--listen", default=None, help="host:port to serve on")
@click.option("--store", default=None, help="store file path")
@click.option("--lock-timeout-ms", type=int, default=None)
@click.option("--positions", type=int, default=None, help="N, required to create a new store file")
@click.option("--block-size", type=int, default=None, help="payload bytes, required to create a new store file")
@click.option("--config", "config_path", default=None, help="key=value config file")
@click.option("--access-log", default=None, help="append access log lines here")
def server_cli(listen, store, lock_timeout_ms, positions, block_size, config_path, access_log):
    """Serve a position-addressed encrypted block store over TCP."""
    cfg = load_config(config_path, {
        "server": listen, "store": store, "lock_timeout_ms": lock_timeout_ms,
        "N": positions, "block_size": block_size,
    })
    if cfg.lock_timeout_ms <= 0:
        raise ConfigError(f"lock_timeout_ms must be positive, got {cfg.lock_timeout_ms}")
    host, port = _parse_addr(cfg.server)
    if os.path.exists(cfg.store):
        slots = SlotFile(cfg.store)
    else:
        if cfg.N <= 0 or cfg.block_size <= 0:
            raise ConfigError("creating a store file requires --positions and --block-size")
        slots = SlotFile(cfg.store, N=cfg.N, ct_size=codec.sealed_size(cfg.block_size))
    server = StoreServer(slots, cfg.lock_timeout_ms, now_fn=_wall_ms, log_path=access_log)
    click.echo(f"serving {cfg.store} (N={slots.N}, ct_size={slots.ct_size}) on {host}:{port}")
    serve_tcp(server, host, port)


def server_main():
    _run(server_cli)


# -- caos-client ---------------------------------------------------------------


@click.group(name="caos-client")
@click.version_option(__version__)
@click.option("--map", "map_path", default=None, help="client map file")
@click.option("--key", "key_path", default=None, help="store key file")
@click.option("--server", default=None, help="host:port of the store server")
@click.option("--config", "config_path", default=None)
@click.option("--client-id", type=int, default=None, help="override the map file's client id")
@click.pass_context
def client_cli(ctx, map_path, key_path, server, config_path, client_id):
    """Read-write / read-only client for a store."""
    ctx.obj = {
        "cfg": load_config(config_path, {"map": map_path, "key": key_path, "server": server}),
        "client_id": client_id,
    }


def _open_session(cfg: DeploymentConfig, rng=None):
    key = codec.load_key(cfg.key)
    host, port = _parse_addr(cfg.server)
    return connect(host, port, key, rng=rng)


def _load_map(cfg: DeploymentConfig, client_id: int | None) -> ClientMap:
    cmap = ClientMap.load(cfg.map)
    if client_id is not None:
        if not 0 <= client_id < cmap.client_count:
            raise ConfigError(f"client-id {client_id} outside [0, {cmap.client_count})")
        cmap.client_id = client_id
    return cmap


@client_cli.command()
@click.option("--db", "db_dir", required=True, help="directory of payload files, one block each, sorted name order")
@click.option("--redundancy", "-C", type=int, default=None)
@click.option("--positions", "-N", type=int, default=None)
@click.option("--block-size", type=int, default=None)
@click.option("--client-count", type=int, default=None)
@click.pass_context
def init(ctx, db_dir, redundancy, positions, block_size, client_count):
    """Key-gen, seal and upload a database; writes the key and map files."""
    cfg: DeploymentConfig = ctx.obj["cfg"]
    for field, val in (("redundancy", redundancy), ("N", positions),
                       ("block_size", block_size), ("client_count", client_count)):
        if val is not None:
            setattr(cfg, field, val)
    names = sorted(
        f for f in os.listdir(db_dir) if os.path.isfile(os.path.join(db_dir, f))
    )
    if not names:
        raise ConfigError(f"no payload files in {db_dir}")
    cfg.validate(n=len(names))
    payloads = []
    for name in names:
        with open(os.path.join(db_dir, name), "rb") as f:
            raw = f.read()
        if len(raw) > cfg.block_size:
            raise ConfigError(f"{name} is {len(raw)} bytes, exceeds block_size {cfg.block_size}")
        payloads.append(raw.ljust(cfg.block_size, b"\0"))

    key = codec.keygen()
    codec.save_key(cfg.key, key)
    host, port = _parse_addr(cfg.server)
    session, transport = connect(host, port, key, block_size=cfg.block_size)
    try:
        clock = HybridClock(_wall_ms)
        cmap = init_store(payloads, cfg.N, cfg.redundancy, cfg.client_count,
                          clock, random.SystemRandom(), session)
        cmap.save(cfg.map)
    finally:
        transport.close()
    click.echo(f"initialized {len(payloads)} blocks over {cfg.N} positions; "
               f"map -> {cfg.map}, key -> {cfg.key}")


@client_cli.command()
@click.argument("bid", type=int)
@click.option("--out", "out_path", default=None)
@click.pass_context
def get(ctx, bid, out_path):
    """Read one block; prints to stdout or writes --out."""
    cfg: DeploymentConfig = ctx.obj["cfg"]
    cmap = _load_map(cfg, ctx.obj["client_id"])
    session, transport = _open_session(cfg)
    try:
        outcome = access_rw(bid, OP_READ, None, session, cmap,
                            HybridClock(_wall_ms), random.SystemRandom())
        cmap.save(cfg.map)
    finally:
        transport.close()
    if out_path:
        with open(out_path, "wb") as f:
            f.write(outcome.result)
    else:
        sys.stdout.buffer.write(outcome.result)


@client_cli.command()
@click.argument("bid", type=int)
@click.option("--in", "in_path", required=True)
@click.pass_context
def put(ctx, bid, in_path):
    """Write one block from a file (zero-padded to the block size)."""
    cfg: DeploymentConfig = ctx.obj["cfg"]
    cmap = _load_map(cfg, ctx.obj["client_id"])
    session, transport = _open_session(cfg)
    try:
        bs = session.block_size
        with open(in_path, "rb") as f:
            raw = f.read()
        if len(raw) > bs:
            raise ConfigError(f"payload is {len(raw)} bytes, block size is {bs}")
        outcome = access_rw(bid, OP_WRITE, raw.ljust(bs, b"\0"), session, cmap,
                            HybridClock(_wall_ms), random.SystemRandom())
        cmap.save(cfg.map)
    finally:
        transport.close()
    click.echo(f"wrote bid {bid} ({outcome.retried} retries)")


@client_cli.command()
@click.option("--ops", type=int, default=100)
@click.option("--parallel", type=int, default=1, help="concurrent sessions on disjoint blocks")
@click.pass_context
def bench(ctx, ops, parallel):
    """Drive random reads/writes and report throughput and bytes moved."""
    cfg: DeploymentConfig = ctx.obj["cfg"]
    cmap = _load_map(cfg, ctx.obj["client_id"])
    report = cmd_bench(cfg, cmap, ops, parallel)
    click.echo(json.dumps(report, indent=2, sort_keys=True))


def cmd_bench(cfg: DeploymentConfig, cmap: ClientMap, ops: int, parallel: int) -> dict:
    """Random accesses over `parallel` sessions on disjoint block ranges.

    Every committed access moves exactly two sealed records each way;
    retried attempts are counted separately so the byte accounting stays
    exact.
    """
    import threading

    if parallel < 1:
        raise ConfigError("parallel must be >= 1")
    key = codec.load_key(cfg.key)
    host, port = _parse_addr(cfg.server)
    n = cmap.n
    if parallel > n:
        raise ConfigError(f"parallel={parallel} exceeds {n} blocks")

    lanes = [list(range(lane, n, parallel)) for lane in range(parallel)]
    share = [ops // parallel + (1 if i < ops % parallel else 0) for i in range(parallel)]
    map_lock = threading.Lock()
    results = []
    errors = []

    def worker(lane: int):
        rng = random.Random(0xBE7C + lane)
        session, transport = connect(host, port, key, rng=rng)
        clock = HybridClock(_wall_ms)
        done = retried = 0
        t0 = time.perf_counter()
        try:
            for i in range(share[lane]):
                bid = lanes[lane][i % len(lanes[lane])]
                op = OP_WRITE if (cmap.role == Role.READ_WRITE and rng.random() < 0.5) else OP_READ
                data = rng.randbytes(session.block_size) if op == OP_WRITE else None
                with map_lock:
                    outcome = access_rw(bid, op, data, session, cmap, clock, rng)
                done += 1
                retried += outcome.retried
            results.append({
                "lane": lane, "ops": done, "retried": retried,
                "seconds": time.perf_counter() - t0,
                "bytes_up": transport.bytes_up, "bytes_down": transport.bytes_down,
            })
        except CaosError as e:
            errors.append(f"lane {lane}: {e}")
        finally:
            transport.close()

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(parallel)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise AccessError("; ".join(errors))

    seconds = max(r["seconds"] for r in results)
    total_ops = sum(r["ops"] for r in results)
    return {
        "ops": total_ops,
        "retried": sum(r["retried"] for r in results),
        "parallel": parallel,
        "seconds": seconds,
        "blocks_per_s": total_ops / seconds if seconds else 0.0,
        "bytes_up": sum(r["bytes_up"] for r in results),
        "bytes_down": sum(r["bytes_down"] for r in results),
        "lanes": results,
    }


def client_main():
    _run(client_cli)


# -- caos-oc -------------------------------------------------------------------


@click.command(name="caos-oc")
@click.version_option(__version__)
@click.option("--map", "map_path", required=True)
@click.option("--key", "key_path", required=True)
@click.option("--server", required=True)
@click.option("--buffer", "buffer_s", type=int, required=True, help="buffer capacity in blocks")
@click.option("--rounds", type=int, required=True)
@click.option("--rate", type=float, default=None, help="rounds per second cap")
@click.option("--client-id", type=int, default=None)
def oc_cli(map_path, key_path, server, buffer_s, rounds, rate, client_id):
    """Run obfuscation rounds: rewrite two random positions per round from a
    local buffer."""
    cmap = ClientMap.load(map_path)
    if client_id is not None:
        cmap.client_id = client_id
    cmap.role = Role.OBFUSCATION
    key = codec.load_key(key_path)
    host, port = _parse_addr(server)
    rng = random.SystemRandom()
    session, transport = connect(host, port, key, rng=None)
    try:
        clock = HybridClock(_wall_ms)
        buf = init_oc(session, cmap, buffer_s, clock, rng)
        interval = 1.0 / rate if rate else 0.0
        for i in range(rounds):
            t0 = time.perf_counter()
            access_oc(buf, session, cmap, clock, rng)
            if interval:
                time.sleep(max(0.0, interval - (time.perf_counter() - t0)))
        cmap.save(map_path)
    finally:
        transport.close()
    click.echo(f"ran {rounds} obfuscation rounds (buffer {buffer_s})")


def oc_main():
    _run(oc_cli)


# -- caos-lab ------------------------------------------------------------------


def _emit(records, json_path):
    lines = [json.dumps(r, sort_keys=True) for r in records]
    if json_path:
        with open(json_path, "w") as f:
            f.write("\n".join(lines) + "\n")
    for line in lines:
        click.echo(line)


@click.group(name="caos-lab")
@click.version_option(__version__)
def lab_cli():
    """Deterministic simulation lab: fuzzing, privacy game, mixing, coverage."""


@lab_cli.command()
@click.option("--seed", type=int, default=0)
@click.option("--steps", type=int, default=20_000)
@click.option("--blocks", "n", type=int, default=16)
@click.option("--positions", "N", type=int, default=64)
@click.option("--json", "json_path", default=None)
def fuzz(seed, steps, n, N, json_path):
    """Interleave one RW, one RO and one OC client; check invariants."""
    report = run_fuzz_entry(n=n, N=N, steps=steps, seed=seed)
    _emit([{"schema": SCHEMA, "kind": "fuzz", **report.__dict__}], json_path)
    if not report.clean:
        raise ProtocolError(f"fuzz found {len(report.violations)} violations (seed {seed})")


@lab_cli.command()
@click.option("--seed", type=int, default=0)
@click.option("--rounds", "r", type=int, default=None, help="obfuscation rounds per query; defaults to the analysis bound")
@click.option("--queries", "q", type=int, default=16)
@click.option("--trials", type=int, default=200)
@click.option("--json", "json_path", default=None)
def game(seed, r, q, trials, json_path):
    """Estimate adversary advantage in the privacy experiment."""
    from .sim.game import BUILTIN_ADVERSARIES, GameConfig, run_game_multi
    from .sim.stats import obfuscation_rounds_bound

    cfg = GameConfig(r=r if r is not None else obfuscation_rounds_bound(8, 4, 32),
                     q=q, trials=trials)
    reports = run_game_multi(cfg, [cls() for cls in BUILTIN_ADVERSARIES], seed=seed)
    _emit([
        {"schema": SCHEMA, "kind": "game", "adversary": name, "r": cfg.r,
         **{k: v for k, v in rep.__dict__.items() if k != "adversary"}}
        for name, rep in reports.items()
    ], json_path)


@lab_cli.command()
@click.option("--seed", type=int, default=0)
@click.option("--cards", "n", type=int, default=32)
@click.option("--buffer", "s", type=int, default=8)
@click.option("--rounds", type=int, default=None)
@click.option("--trials", type=int, default=500)
@click.option("--json", "json_path", default=None)
def mixing(seed, n, s, rounds, trials, json_path):
    """Buffer-shuffle mixing: eviction-stream TV distance and tracked card."""
    from .sim.stats import eq_buffer_bound, simulate_obs_shuffle

    rounds = rounds if rounds is not None else max(1, int(eq_buffer_bound(n, s)))
    rep = simulate_obs_shuffle(n, s, rounds, trials, random.Random(seed),
                               tracked_trials=trials)
    _emit([{
        "schema": SCHEMA, "kind": "mixing", "n": n, "s": s, "rounds": rounds,
        "trials": trials, "tv_between_windows": rep.tv_between_windows,
        "tracked_mean": rep.tracked_mean, "tracked_std": rep.tracked_std,
        "tracked_bound": rep.tracked_bound,
    }], json_path)


@lab_cli.command()
@click.option("--seed", type=int, default=0)
@click.option("--positions", "N", type=int, default=50)
@click.option("--rounds", "r", type=int, default=None, help="evaluate survival at this round count")
@click.option("--trials", type=int, default=10_000)
@click.option("--json", "json_path", default=None)
def survive(seed, N, r, trials, json_path):
    """Overwrite coverage: exact survival probability vs Monte Carlo."""
    from .sim.stats import p_survive, simulate_overwrite_rounds

    marks = (r,) if r is not None else (N, 3 * N, 8 * N)
    stats = simulate_overwrite_rounds(N, trials, random.Random(seed), survive_at=marks)
    _emit([{
        "schema": SCHEMA, "kind": "survive", "N": N, "trials": trials,
        "mean_rounds": stats.mean, "exact_mean": stats.exact_mean,
        "reported_bound": stats.reported_bound,
        "survival": {str(k): {"empirical": v, "exact": p_survive(N, k)}
                     for k, v in stats.survive_fraction.items()},
    }], json_path)


SCHEMA = 1


def run_fuzz_entry(**kw):
    from .sim.fuzz import run_interleaved_fuzz

    return run_interleaved_fuzz(**kw)


def lab_main():
    _run(lab_cli)
