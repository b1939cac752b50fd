"""Distributed runtime: parameter server, block workers, transports.

The server owns every chain's global state; workers own their blocks and
receive sub-parameters by value each round. Within a chain, rounds are
barrier-synchronized; chains never exchange state, so their trajectories
are independent given their seeds.

Wire protocol (socket transport): frame = 4-byte little-endian length +
payload; payload = tag byte (1=RoundRequest, 2=RoundReply, 3=Shutdown,
4=Error) followed by the message fields in declared order. Reals are
8-byte little-endian IEEE-754, counts/indices 8-byte little-endian
unsigned, matrices row-major with a (rows, cols) prefix.
"""

from __future__ import annotations

import socket
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .core import ChainState, ModelConfig, RatingsBlock, bias_corrector, distributed_corrector
from .evaluation import RunningPredictive, predict_pairs, rmse
from .partition import PartitionPlan, schedule_round
from .samplers import DivergenceError, NoiseSource, StepSchedule, gibbs_sample_precisions, minibatch_sweep, step_size

MSG_ROUND_REQUEST = 1
MSG_ROUND_REPLY = 2
MSG_SHUTDOWN = 3
MSG_ERROR = 4

ERR_DIVERGENCE = 1
ERR_PROTOCOL = 2
ERR_INTERNAL = 3

# Stream ids pack (chain, block slot, round) into one integer; the top
# slot values are reserved for server-side draws.
_STREAM_FIELD = 1 << 20
_INIT_SLOT = _STREAM_FIELD - 1
_HYPER_SLOT = _STREAM_FIELD - 2
_EVAL_SLOT = _STREAM_FIELD - 3


def make_stream(chain_id: int, block_slot: int, round_index: int) -> int:
    if not (0 <= chain_id < _STREAM_FIELD and 0 <= block_slot < _STREAM_FIELD):
        raise ValueError("chain or block id out of stream range")
    if not 0 <= round_index < _STREAM_FIELD:
        raise ValueError("round index out of stream range")
    return (chain_id * _STREAM_FIELD + block_slot) * _STREAM_FIELD + round_index


class WorkerFailure(RuntimeError):
    """A worker failed or a round could not complete."""

    def __init__(self, message, round_index=None, worker_id=None):
        super().__init__(message)
        self.round_index = round_index
        self.worker_id = worker_id


class ProtocolError(RuntimeError):
    pass


@dataclass
class RoundRequest:
    chain_id: int
    user_rows: np.ndarray
    item_rows: np.ndarray
    user_bias: np.ndarray
    item_bias: np.ndarray
    prec_user: np.ndarray
    prec_item: np.ndarray
    prec_user_bias: float
    prec_item_bias: float
    eps: float
    round_length: int
    minibatch_size: int
    v_s: float
    noise_seed: int
    noise_stream: int
    block_id: int = -1  # routing only; not part of the wire format


@dataclass
class RoundReply:
    chain_id: int
    user_rows: np.ndarray
    item_rows: np.ndarray
    user_bias: np.ndarray
    item_bias: np.ndarray
    iterations: int
    train_rmse: float
    block_id: int = -1


@dataclass
class WorkerHandle:
    worker_id: int
    block_id: int
    mailbox: object


@dataclass
class SampleStore:
    """Thinned post-burn-in snapshots, kept per chain."""

    samples: dict[int, list[tuple[int, ChainState]]] = field(default_factory=dict)
    burn_in_complete: bool = False

    def add(self, chain_id: int, round_index: int, state: ChainState) -> None:
        self.samples.setdefault(chain_id, []).append((round_index, state))

    def count(self, chain_id=None) -> int:
        if chain_id is not None:
            return len(self.samples.get(chain_id, []))
        return sum(len(v) for v in self.samples.values())

    def all_snapshots(self):
        for chain_id in sorted(self.samples):
            for round_index, snap in self.samples[chain_id]:
                yield round_index, snap


def check_burn_in(chain_rmses, threshold: float) -> bool:
    """True once the arithmetic mean of per-chain RMSE is at or below the
    threshold; the comparison absorbs float rounding at the boundary."""
    values = list(chain_rmses)
    if not values:
        raise ValueError("need at least one RMSE estimate")
    slack = 1e-12 * max(1.0, abs(threshold))
    return float(np.mean(values)) <= threshold + slack


class BurnInMonitor:
    """Latching wrapper around ``check_burn_in``."""

    def __init__(self, threshold: float):
        self.threshold = threshold
        self.complete = False

    def update(self, chain_rmses) -> bool:
        if not self.complete and check_burn_in(chain_rmses, self.threshold):
            self.complete = True
        return self.complete


def collect_sample(store: SampleStore, chain_id: int, state: ChainState,
                   round_index: int, thin: int) -> None:
    """Deep-snapshot the state iff the round index is a thinning multiple."""
    if thin < 1:
        raise ValueError("thin must be >= 1")
    if round_index % thin == 0:
        store.add(chain_id, round_index, state.copy())


def compute_bias_correctors(plan: PartitionPlan, m: int, n_users: int, n_items: int):
    """Schedule-weighted inclusion probabilities for every user and item.

    For each parameter, the relevant alternatives are one block per
    orthogonal group (groups rotate uniformly); groups whose blocks never
    touch the parameter, or where it has no ratings, contribute zero.
    """
    g = plan.n_groups
    rate = 1.0 / g
    h_user = np.zeros(n_users)
    h_item = np.zeros(n_items)
    user_parts = {u: [] for u in range(n_users)}
    item_parts = {i: [] for i in range(n_items)}
    for group in plan.groups:
        covered_users = {}
        covered_items = {}
        for bid in group.block_ids:
            blk = plan.blocks[bid]
            for u, cnt in blk.user_counts.items():
                covered_users[u] = bias_corrector(cnt, blk.n, m) if blk.n else 0.0
            for i, cnt in blk.item_counts.items():
                covered_items[i] = bias_corrector(cnt, blk.n, m) if blk.n else 0.0
        for u in range(n_users):
            user_parts[u].append((rate, covered_users.get(u, 0.0)))
        for i in range(n_items):
            item_parts[i].append((rate, covered_items.get(i, 0.0)))
    for u in range(n_users):
        h_user[u] = distributed_corrector(user_parts[u])
    for i in range(n_items):
        h_item[i] = distributed_corrector(item_parts[i])
    return h_user, h_item


class BlockWorker:
    """Owns one block and runs minibatch rounds against it."""

    def __init__(self, worker_id: int, block: RatingsBlock, h_user: np.ndarray,
                 h_item: np.ndarray, tau: float, langevin: bool = True):
        self.worker_id = worker_id
        self.block = block
        self.tau = tau
        self.langevin = langevin
        r0, _ = block.row_range
        c0, _ = block.col_range
        self._users_local = block.users - r0
        self._items_local = block.items - c0
        # corrector slices aligned with the sub-parameter rows
        self.h_user = np.asarray(h_user, dtype=np.float64)
        self.h_item = np.asarray(h_item, dtype=np.float64)

    def worker_round(self, request: RoundRequest) -> RoundReply:
        blk = self.block
        rows = blk.row_range[1] - blk.row_range[0]
        cols = blk.col_range[1] - blk.col_range[0]
        d = request.user_rows.shape[1] if request.user_rows.ndim == 2 else 0
        if request.user_rows.shape != (rows, d) or request.item_rows.shape != (cols, d):
            raise ProtocolError(
                f"sub-parameter shapes {request.user_rows.shape}/{request.item_rows.shape} "
                f"do not match block ranges ({rows}, {cols})"
            )
        if request.user_bias.shape != (rows,) or request.item_bias.shape != (cols,):
            raise ProtocolError("bias slice shapes do not match block ranges")

        u = request.user_rows.copy()
        v = request.item_rows.copy()
        a = request.user_bias.copy()
        b = request.item_bias.copy()
        noise = NoiseSource(request.noise_seed, request.noise_stream)

        if blk.n > 0:
            n_eff = blk.n / request.v_s
            for _ in range(request.round_length):
                batch_idx = noise.integers(blk.n, size=request.minibatch_size)
                minibatch_sweep(
                    u, v, a, b,
                    request.prec_user, request.prec_item,
                    request.prec_user_bias, request.prec_item_bias,
                    self._users_local, self._items_local, blk.ratings,
                    batch_idx, self.tau, n_eff,
                    self.h_user, self.h_item,
                    request.eps, noise, langevin=self.langevin,
                )
        preds = (
            np.einsum("nd,nd->n", u[self._users_local], v[self._items_local])
            + a[self._users_local]
            + b[self._items_local]
        ) if blk.n else np.empty(0)
        local_rmse = rmse(preds, blk.ratings) if blk.n else float("nan")
        return RoundReply(
            chain_id=request.chain_id,
            user_rows=u,
            item_rows=v,
            user_bias=a,
            item_bias=b,
            iterations=request.round_length,
            train_rmse=local_rmse,
            block_id=self.worker_id,
        )


# ---------------------------------------------------------------------------
# Wire codec


def _pack_mat(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f8")
    return struct.pack("<QQ", a.shape[0], a.shape[1]) + a.tobytes()


def _pack_vec(v: np.ndarray) -> bytes:
    v = np.ascontiguousarray(v, dtype="<f8")
    return struct.pack("<Q", v.shape[0]) + v.tobytes()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def u8(self) -> int:
        (val,) = struct.unpack_from("<B", self.buf, self.off)
        self.off += 1
        return val

    def u64(self) -> int:
        (val,) = struct.unpack_from("<Q", self.buf, self.off)
        self.off += 8
        return val

    def f64(self) -> float:
        (val,) = struct.unpack_from("<d", self.buf, self.off)
        self.off += 8
        return val

    def mat(self) -> np.ndarray:
        rows, cols = struct.unpack_from("<QQ", self.buf, self.off)
        self.off += 16
        n = rows * cols * 8
        arr = np.frombuffer(self.buf, dtype="<f8", count=rows * cols, offset=self.off)
        self.off += n
        return arr.reshape(rows, cols).copy()

    def vec(self) -> np.ndarray:
        (n,) = struct.unpack_from("<Q", self.buf, self.off)
        self.off += 8
        arr = np.frombuffer(self.buf, dtype="<f8", count=n, offset=self.off)
        self.off += n * 8
        return arr.copy()

    def raw(self, n: int) -> bytes:
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out


def encode_request(req: RoundRequest) -> bytes:
    return (
        struct.pack("<B", MSG_ROUND_REQUEST)
        + struct.pack("<Q", req.chain_id)
        + _pack_mat(req.user_rows)
        + _pack_mat(req.item_rows)
        + _pack_vec(req.user_bias)
        + _pack_vec(req.item_bias)
        + _pack_vec(req.prec_user)
        + _pack_vec(req.prec_item)
        + struct.pack("<dddd", req.prec_user_bias, req.prec_item_bias, req.eps, req.v_s)
        + struct.pack("<QQ", req.round_length, req.minibatch_size)
        + struct.pack("<QQ", req.noise_seed, req.noise_stream)
    )


def decode_request(payload: bytes, block_id: int = -1) -> RoundRequest:
    r = _Reader(payload)
    tag = r.u8()
    if tag != MSG_ROUND_REQUEST:
        raise ProtocolError(f"expected request tag, got {tag}")
    chain_id = r.u64()
    user_rows = r.mat()
    item_rows = r.mat()
    user_bias = r.vec()
    item_bias = r.vec()
    prec_user = r.vec()
    prec_item = r.vec()
    pub, pib, eps, v_s = struct.unpack_from("<dddd", r.buf, r.off)
    r.off += 32
    round_length = r.u64()
    minibatch_size = r.u64()
    noise_seed = r.u64()
    noise_stream = r.u64()
    return RoundRequest(
        chain_id=chain_id,
        user_rows=user_rows,
        item_rows=item_rows,
        user_bias=user_bias,
        item_bias=item_bias,
        prec_user=prec_user,
        prec_item=prec_item,
        prec_user_bias=pub,
        prec_item_bias=pib,
        eps=eps,
        round_length=round_length,
        minibatch_size=minibatch_size,
        v_s=v_s,
        noise_seed=noise_seed,
        noise_stream=noise_stream,
        block_id=block_id,
    )


def encode_reply(rep: RoundReply) -> bytes:
    return (
        struct.pack("<B", MSG_ROUND_REPLY)
        + struct.pack("<Q", rep.chain_id)
        + _pack_mat(rep.user_rows)
        + _pack_mat(rep.item_rows)
        + _pack_vec(rep.user_bias)
        + _pack_vec(rep.item_bias)
        + struct.pack("<Q", rep.iterations)
        + struct.pack("<d", rep.train_rmse)
    )


def decode_reply(payload: bytes, block_id: int = -1) -> RoundReply:
    r = _Reader(payload)
    tag = r.u8()
    if tag != MSG_ROUND_REPLY:
        raise ProtocolError(f"expected reply tag, got {tag}")
    return RoundReply(
        chain_id=r.u64(),
        user_rows=r.mat(),
        item_rows=r.mat(),
        user_bias=r.vec(),
        item_bias=r.vec(),
        iterations=r.u64(),
        train_rmse=r.f64(),
        block_id=block_id,
    )


def encode_error(kind: int, message: str) -> bytes:
    data = message.encode("utf-8")
    return struct.pack("<BB", MSG_ERROR, kind) + struct.pack("<Q", len(data)) + data


def decode_error(payload: bytes) -> tuple[int, str]:
    r = _Reader(payload)
    tag = r.u8()
    if tag != MSG_ERROR:
        raise ProtocolError(f"expected error tag, got {tag}")
    kind = r.u8()
    n = r.u64()
    return kind, r.raw(n).decode("utf-8")


def write_frame(sock, payload: bytes) -> None:
    sock.sendall(struct.pack("<I", len(payload)) + payload)


def read_frame(sock) -> bytes:
    header = _read_exact(sock, 4)
    (n,) = struct.unpack("<I", header)
    return _read_exact(sock, n)


def _read_exact(sock, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(n - got)
        if not chunk:
            raise WorkerFailure("connection closed mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


# ---------------------------------------------------------------------------
# Transports


class InProcessTransport:
    """Deterministic transport: workers are called synchronously in
    ascending block order. Per-round cost is the max of per-block compute
    times, modelling one worker per block running in parallel."""

    def __init__(self, workers: dict[int, BlockWorker]):
        self.workers = workers
        self.handles = [
            WorkerHandle(worker_id=wid, block_id=wid, mailbox=w) for wid, w in sorted(workers.items())
        ]

    def exchange(self, requests: list[RoundRequest]) -> tuple[list[RoundReply], float]:
        replies = []
        costs = []
        for req in sorted(requests, key=lambda r: r.block_id):
            worker = self.workers[req.block_id]
            t0 = time.perf_counter()
            replies.append(worker.worker_round(req))
            costs.append(time.perf_counter() - t0)
        return replies, max(costs) if costs else 0.0

    def shutdown(self):
        pass


class SocketWorkerServer:
    """Serves one block over a TCP socket in a background thread."""

    def __init__(self, worker: BlockWorker, host: str = "127.0.0.1", port: int = 0):
        self.worker = worker
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(1)
        self.address = self._listener.getsockname()
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self._thread.start()

    def _serve(self):
        conn, _ = self._listener.accept()
        try:
            while True:
                payload = read_frame(conn)
                tag = payload[0]
                if tag == MSG_SHUTDOWN:
                    break
                if tag != MSG_ROUND_REQUEST:
                    write_frame(conn, encode_error(ERR_PROTOCOL, f"unexpected tag {tag}"))
                    continue
                try:
                    request = decode_request(payload, block_id=self.worker.worker_id)
                    reply = self.worker.worker_round(request)
                    write_frame(conn, encode_reply(reply))
                except DivergenceError as exc:
                    write_frame(conn, encode_error(ERR_DIVERGENCE, str(exc)))
                except ProtocolError as exc:
                    write_frame(conn, encode_error(ERR_PROTOCOL, str(exc)))
                except Exception as exc:  # noqa: BLE001 - forwarded to the server
                    write_frame(conn, encode_error(ERR_INTERNAL, f"{type(exc).__name__}: {exc}"))
        except WorkerFailure:
            pass
        finally:
            conn.close()
            self._listener.close()

    def join(self, timeout=5.0):
        self._thread.join(timeout)


class SocketTransport:
    """Length-prefixed binary protocol over TCP, one connection per block."""

    def __init__(self, endpoints: dict[int, tuple[str, int]], timeout: float = 120.0):
        self.socks = {}
        self.handles = []
        for bid, addr in sorted(endpoints.items()):
            sock = socket.create_connection(addr, timeout=timeout)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self.socks[bid] = sock
            self.handles.append(WorkerHandle(worker_id=bid, block_id=bid, mailbox=addr))

    def exchange(self, requests: list[RoundRequest]) -> tuple[list[RoundReply], float]:
        t0 = time.perf_counter()
        ordered = sorted(requests, key=lambda r: r.block_id)
        try:
            for req in ordered:
                write_frame(self.socks[req.block_id], encode_request(req))
            replies = []
            failure = None
            # every socket owes exactly one frame; drain them all before
            # raising so a failed round leaves no stale replies buffered
            for req in ordered:
                payload = read_frame(self.socks[req.block_id])
                tag = payload[0]
                if tag == MSG_ERROR:
                    if failure is None:
                        failure = (req, *decode_error(payload))
                    continue
                replies.append(decode_reply(payload, block_id=req.block_id))
        except OSError as exc:
            raise WorkerFailure(f"transport error: {exc}") from exc
        if failure is not None:
            req, kind, message = failure
            if kind == ERR_DIVERGENCE:
                raise DivergenceError(message, chain_id=req.chain_id)
            raise WorkerFailure(message, worker_id=req.block_id)
        return replies, time.perf_counter() - t0

    def shutdown(self):
        for sock in self.socks.values():
            try:
                write_frame(sock, struct.pack("<B", MSG_SHUTDOWN))
                sock.close()
            except OSError:
                pass


# ---------------------------------------------------------------------------
# Parameter server


@dataclass
class ServerSettings:
    model: ModelConfig
    schedule: StepSchedule
    round_length: int = 50
    thin: int = 10
    hyper_interval: int = 50
    burn_in_threshold: float = 0.85
    max_rounds: int = 100
    max_seconds: float | None = None
    seed: int = 0
    eval_fraction: float = 1.0
    langevin: bool = True
    collect_samples: bool = True
    init_precision: float = 2.0
    init_scale: float = 0.1
    clock: str = "virtual"  # 'virtual' (measured) or 'logical' (round count)


@dataclass
class RunStats:
    block_rounds: dict[int, int] = field(default_factory=dict)
    chain_clock: dict[int, float] = field(default_factory=dict)
    diverged: dict[int, tuple[int, str]] = field(default_factory=dict)
    rounds_completed: int = 0
    burn_in_round: int | None = None


def init_chain_state(model: ModelConfig, n_users: int, n_items: int, chain_id: int,
                     seed: int, init_precision: float = 2.0, init_scale: float = 0.1) -> ChainState:
    """Fresh chain: small Gaussian factors, zero biases, fixed precisions."""
    rng = NoiseSource(seed, make_stream(chain_id, _INIT_SLOT, 0))
    d = model.n_factors
    return ChainState(
        user_factors=init_scale * rng.standard_normal((n_users, d)),
        item_factors=init_scale * rng.standard_normal((n_items, d)),
        user_bias=np.zeros(n_users),
        item_bias=np.zeros(n_items),
        prec_user=np.full(d, init_precision),
        prec_item=np.full(d, init_precision),
        prec_user_bias=init_precision,
        prec_item_bias=init_precision,
        chain_id=chain_id,
    )


def build_workers(plan: PartitionPlan, model: ModelConfig, n_users: int, n_items: int,
                  langevin: bool = True) -> dict[int, BlockWorker]:
    h_user, h_item = compute_bias_correctors(plan, model.minibatch_size, n_users, n_items)
    workers = {}
    for bid, blk in plan.blocks.items():
        r0, r1 = blk.row_range
        c0, c1 = blk.col_range
        workers[bid] = BlockWorker(
            worker_id=bid,
            block=blk,
            h_user=h_user[r0:r1],
            h_item=h_item[c0:c1],
            tau=model.tau,
            langevin=langevin,
        )
    return workers


class ParameterServer:
    """Runs multiple chains over a block plan and collects thinned samples."""

    def __init__(self, settings: ServerSettings, plan: PartitionPlan, dataset,
                 transport=None, metrics_hook=None):
        self.settings = settings
        self.plan = plan
        self.dataset = dataset
        self.metrics_hook = metrics_hook
        if transport is None:
            workers = build_workers(
                plan, settings.model, dataset.n_users, dataset.n_items,
                langevin=settings.langevin,
            )
            transport = InProcessTransport(workers)
        self.transport = transport
        self.stats = RunStats()
        self._eval = self._build_eval_subset()

    def _build_eval_subset(self):
        test = self.dataset.test
        if len(test) == 0:
            return None
        n = len(test)
        k = max(1, int(round(self.settings.eval_fraction * n)))
        idx = np.arange(n)
        if k < n:
            rng = NoiseSource(self.settings.seed, make_stream(0, _EVAL_SLOT, 0))
            idx = np.sort(rng.integers(n, size=k))
        return (
            test[idx, 0].astype(np.int64),
            test[idx, 1].astype(np.int64),
            test[idx, 2],
        )

    def _chain_rmse(self, state: ChainState) -> float:
        if self._eval is None:
            return float("nan")
        users, items, targets = self._eval
        return rmse(predict_pairs(state, users, items), targets)

    def run(self, chains: int) -> SampleStore:
        s = self.settings
        if chains > self.plan.n_groups:
            raise ValueError(
                f"chains ({chains}) cannot exceed orthogonal group count ({self.plan.n_groups})"
            )
        states = {
            c: init_chain_state(
                s.model, self.dataset.n_users, self.dataset.n_items, c, s.seed,
                s.init_precision, s.init_scale,
            )
            for c in range(chains)
        }
        store = SampleStore()
        monitor = BurnInMonitor(s.burn_in_threshold)
        ensemble = (
            RunningPredictive(
                self.dataset.test[:, 0].astype(np.int64),
                self.dataset.test[:, 1].astype(np.int64),
                self.dataset.test[:, 2],
            )
            if len(self.dataset.test)
            else None
        )
        clocks = {c: 0.0 for c in states}
        self.stats.block_rounds = {c: 0 for c in states}
        alive = set(states)

        for t in range(s.max_rounds):
            round_index = t + 1
            eps = step_size(s.schedule, t)
            assignment = schedule_round(self.plan, chains, t)
            chain_rmses = {}
            for c in sorted(assignment):
                if c not in alive:
                    continue
                group = assignment[c]
                state = states[c]
                requests = [
                    self._build_request(state, bid, eps, t) for bid in group.block_ids
                ]
                try:
                    replies, cost = self.transport.exchange(requests)
                except DivergenceError as exc:
                    self.stats.diverged[c] = (round_index, str(exc))
                    alive.discard(c)
                    continue
                except WorkerFailure as exc:
                    raise WorkerFailure(
                        f"round {round_index} chain {c}: {exc}",
                        round_index=round_index,
                        worker_id=exc.worker_id,
                    ) from exc
                self._install(state, replies, group)
                state.iteration += s.round_length
                self.stats.block_rounds[c] += len(group.block_ids)
                clocks[c] += cost if s.clock == "virtual" else 1.0
                chain_rmses[c] = self._chain_rmse(state)
                self._emit_chain_row(c, round_index, replies, chain_rmses[c], eps, clocks, store)

            if not alive:
                break
            if chain_rmses and self._eval is not None:
                monitor.update(chain_rmses.values())
            elif self._eval is None:
                monitor.complete = True
            if monitor.complete and self.stats.burn_in_round is None:
                self.stats.burn_in_round = round_index
            store.burn_in_complete = monitor.complete

            if monitor.complete and s.collect_samples:
                for c in sorted(alive):
                    before = store.count(c)
                    collect_sample(store, c, states[c], round_index, s.thin)
                    if ensemble is not None and store.count(c) > before:
                        ensemble.add_snapshot(states[c])
                if round_index % s.hyper_interval == 0:
                    for c in sorted(alive):
                        self._resample_precisions(states[c], t)
                if ensemble is not None and ensemble.count > 0:
                    self._emit_ensemble_row(round_index, ensemble, eps, clocks, store)

            self.stats.rounds_completed = round_index
            if s.max_seconds is not None and max(clocks.values()) >= s.max_seconds:
                break

        self.stats.chain_clock = clocks
        return store

    def _build_request(self, state: ChainState, block_id: int, eps: float, t: int) -> RoundRequest:
        blk = self.plan.blocks[block_id]
        r0, r1 = blk.row_range
        c0, c1 = blk.col_range
        s = self.settings
        return RoundRequest(
            chain_id=state.chain_id,
            user_rows=state.user_factors[r0:r1].copy(),
            item_rows=state.item_factors[c0:c1].copy(),
            user_bias=state.user_bias[r0:r1].copy(),
            item_bias=state.item_bias[c0:c1].copy(),
            prec_user=state.prec_user.copy(),
            prec_item=state.prec_item.copy(),
            prec_user_bias=state.prec_user_bias,
            prec_item_bias=state.prec_item_bias,
            eps=eps,
            round_length=s.round_length,
            minibatch_size=s.model.minibatch_size,
            v_s=self.plan.block_visit_rate(block_id),
            noise_seed=s.seed,
            noise_stream=make_stream(state.chain_id, block_id, t),
            block_id=block_id,
        )

    def _install(self, state: ChainState, replies: list[RoundReply], group) -> None:
        written_rows = []
        written_cols = []
        for rep in replies:
            blk = self.plan.blocks[rep.block_id]
            r0, r1 = blk.row_range
            c0, c1 = blk.col_range
            for lo, hi in written_rows:
                if not (r1 <= lo or hi <= r0):
                    raise WorkerFailure("two replies write overlapping user rows")
            for lo, hi in written_cols:
                if not (c1 <= lo or hi <= c0):
                    raise WorkerFailure("two replies write overlapping item rows")
            written_rows.append((r0, r1))
            written_cols.append((c0, c1))
            state.user_factors[r0:r1] = rep.user_rows
            state.item_factors[c0:c1] = rep.item_rows
            state.user_bias[r0:r1] = rep.user_bias
            state.item_bias[c0:c1] = rep.item_bias

    def _resample_precisions(self, state: ChainState, t: int) -> None:
        noise = NoiseSource(self.settings.seed, make_stream(state.chain_id, _HYPER_SLOT, t))
        draw = gibbs_sample_precisions(state, self.settings.model, noise)
        state.prec_user = draw.prec_user
        state.prec_item = draw.prec_item
        state.prec_user_bias = draw.prec_user_bias
        state.prec_item_bias = draw.prec_item_bias

    def _merge_train_rmse(self, replies) -> float:
        total_sq = 0.0
        total_n = 0
        for rep in replies:
            n = self.plan.blocks[rep.block_id].n
            if n and np.isfinite(rep.train_rmse):
                total_sq += n * rep.train_rmse**2
                total_n += n
        return float(np.sqrt(total_sq / total_n)) if total_n else float("nan")

    def _emit_chain_row(self, chain_id, round_index, replies, test_rmse, eps, clocks, store):
        if self.metrics_hook is None:
            return
        self.metrics_hook(
            {
                "wall_clock_s": max(clocks.values()),
                "round": round_index,
                "chain_id": chain_id,
                "train_rmse": self._merge_train_rmse(replies),
                "test_rmse": test_rmse,
                "samples_collected": store.count(chain_id),
                "eps_current": eps,
            }
        )

    def _emit_ensemble_row(self, round_index, ensemble, eps, clocks, store):
        if self.metrics_hook is None:
            return
        self.metrics_hook(
            {
                "wall_clock_s": max(clocks.values()),
                "round": round_index,
                "chain_id": "ensemble",
                "train_rmse": float("nan"),
                "test_rmse": ensemble.rmse(),
                "samples_collected": store.count(),
                "eps_current": eps,
            }
        )


def run_server(settings: ServerSettings, plan: PartitionPlan, dataset, chains: int,
               transport=None, metrics_hook=None) -> SampleStore:
    """Build a server, run it, and return the sample store."""
    server = ParameterServer(settings, plan, dataset, transport=transport, metrics_hook=metrics_hook)
    try:
        return server.run(chains)
    finally:
        server.transport.shutdown()
