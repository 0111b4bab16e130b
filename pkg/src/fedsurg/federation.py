"""Federated round orchestration: FedAvg, FedProx and SCAFFOLD.

The coordinator and site workers speak only wire messages, so the same
code runs over in-process queues (deterministic tests) and TCP sockets
(one process per site). Full participation every round; aggregation
iterates clients in sorted id order so results are independent of
arrival order.
"""

from __future__ import annotations

import threading
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .cohort import Cohort, OUTCOME_NAMES
from .model import (ArchConfig, ModelParams, arch_fingerprint, init_params,
                    local_train, predict)
from .preprocess import Preprocessor, merge_scaler_stats
from .wire import (ChannelClosed, ClientUpdate, GlobalModel, GlobalScaler,
                   Hello, RoundAck, ScalerStats, Shutdown, quantize32)

ALGORITHMS = ("fedavg", "fedprox", "scaffold")


class FederationError(RuntimeError):
    pass


class HandshakeError(FederationError):
    pass


class ClientFailure(FederationError):
    def __init__(self, client_id: str, cause: Exception):
        super().__init__(f"client {client_id!r} failed: {cause}")
        self.client_id = client_id
        self.cause = cause


@dataclass
class TrainConfig:
    lr: float = 0.1
    local_epochs: int = 1
    batch_size: int = 256
    rounds: int = 50
    server_lr: float = 1.0
    mu: float = 0.0
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.server_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")
        if self.rounds < 1 or self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("rounds, local_epochs and batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


def zeros_like_params(params: ModelParams) -> ModelParams:
    return {k: np.zeros_like(v) for k, v in params.items()}


def _check_layouts(updates: list[ClientUpdate]) -> None:
    keys = list(updates[0].params.keys())
    for u in updates[1:]:
        if list(u.params.keys()) != keys:
            raise FederationError(
                f"parameter layout mismatch from client {u.client_id!r}")


def fedavg_aggregate(updates: list[ClientUpdate]) -> ModelParams:
    """Sample-size weighted elementwise average of client weights."""
    if not updates:
        raise FederationError("no updates to aggregate")
    _check_layouts(updates)
    ordered = sorted(updates, key=lambda u: u.client_id)
    total = sum(u.n_samples for u in ordered)
    out = zeros_like_params(ordered[0].params)
    for u in ordered:
        w = u.n_samples / total
        for k in out:
            out[k] = out[k] + w * u.params[k]
    return out


def scaffold_local_step(w: ModelParams, g: ModelParams, c: ModelParams,
                        c_i: ModelParams, lr: float) -> ModelParams:
    """w - lr * (g - c_i + c), elementwise."""
    if not (w.keys() == g.keys() == c.keys() == c_i.keys()):
        raise FederationError("scaffold step operand layouts differ")
    return {k: w[k] - lr * (g[k] - c_i[k] + c[k]) for k in w}


def scaffold_client_finalize(c_i: ModelParams, c: ModelParams,
                             x_global: ModelParams, y_local: ModelParams,
                             steps: int, lr: float) -> ModelParams:
    """Gradient-free control refresh: c_i - c + (x - y) / (K * lr)."""
    if steps < 1:
        raise FederationError("control update needs at least one local step")
    inv = 1.0 / (steps * lr)
    return {k: c_i[k] - c[k] + (x_global[k] - y_local[k]) * inv for k in c_i}


@dataclass
class ScaffoldState:
    server_control: ModelParams
    client_controls: dict[str, ModelParams]

    @classmethod
    def zeros(cls, template: ModelParams, client_ids) -> "ScaffoldState":
        return cls(zeros_like_params(template),
                   {cid: zeros_like_params(template) for cid in sorted(client_ids)})

    def control_gap(self) -> float:
        """max |c - mean_i(c_i)| over all parameters."""
        gap = 0.0
        n = len(self.client_controls)
        for k in self.server_control:
            mean = sum(ctrl[k] for ctrl in self.client_controls.values()) / n
            gap = max(gap, float(np.abs(self.server_control[k] - mean).max()))
        return gap


def scaffold_server_update(state: ScaffoldState, x: ModelParams,
                           updates: list[ClientUpdate],
                           server_lr: float) -> ModelParams:
    """x + eta_g * mean(y_i - x); controls advance by the mean client delta.

    Requires full participation: every registered client must report.
    """
    present = {u.client_id for u in updates}
    registered = set(state.client_controls)
    if present != registered:
        raise FederationError(
            f"participation error: missing {sorted(registered - present)}, "
            f"unknown {sorted(present - registered)}")
    _check_layouts(updates)
    ordered = sorted(updates, key=lambda u: u.client_id)
    n = len(ordered)
    new_x = dict(x)
    for k in x:
        drift = sum(u.params[k] - x[k] for u in ordered) / n
        new_x[k] = x[k] + server_lr * drift
    frac = len(ordered) / len(registered)
    for k in state.server_control:
        mean_delta = sum(u.control_delta[k] for u in ordered) / n
        state.server_control[k] = state.server_control[k] + frac * mean_delta
    for u in ordered:
        ctrl = state.client_controls[u.client_id]
        state.client_controls[u.client_id] = {
            k: ctrl[k] + u.control_delta[k] for k in ctrl}
    return new_x


# --- coordinator ----------------------------------------------------------

@dataclass
class RoundRecord:
    round: int
    val_auroc: tuple[float, ...]        # per outcome, mean over clients
    train_loss: dict[str, float]        # per client
    mean_val: float


@dataclass
class FederationResult:
    best_params: ModelParams
    best_round: int
    best_score: float
    final_params: ModelParams
    history: list[RoundRecord]
    scaffold: ScaffoldState | None
    params_trace: list[ModelParams] = field(default_factory=list)
    global_scaler: tuple[np.ndarray, np.ndarray] | None = None


class Coordinator:
    """Server side of one federated training run."""

    def __init__(self, arch: ArchConfig, algo: str, cfg: TrainConfig,
                 channels: list, expected_clients: list[str],
                 record_params: bool = False):
        if algo not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {algo!r}")
        self.arch = arch
        self.algo = algo
        self.cfg = cfg
        self.channels = channels
        self.expected = sorted(expected_clients)
        self.record_params = record_params

    def _handshake(self) -> dict[str, object]:
        fingerprint = arch_fingerprint(self.arch)
        by_id: dict[str, object] = {}
        for chan in self.channels:
            msg = chan.recv()
            if not isinstance(msg, Hello):
                raise HandshakeError(f"expected Hello, got {type(msg).__name__}")
            if msg.arch_fingerprint != fingerprint:
                chan.send(Shutdown())
                raise HandshakeError(
                    f"client {msg.client_id!r} has architecture fingerprint "
                    f"{msg.arch_fingerprint}, federation uses {fingerprint}")
            if msg.client_id in by_id:
                chan.send(Shutdown())
                raise HandshakeError(f"duplicate client id {msg.client_id!r}")
            if msg.client_id not in self.expected:
                chan.send(Shutdown())
                raise HandshakeError(f"unknown client id {msg.client_id!r}")
            by_id[msg.client_id] = chan
            chan.send(RoundAck(0))
        missing = set(self.expected) - set(by_id)
        if missing:
            raise HandshakeError(f"clients never connected: {sorted(missing)}")
        return by_id

    def _recv_from(self, by_id, cid: str):
        try:
            return by_id[cid].recv()
        except (ChannelClosed, OSError) as exc:
            raise ClientFailure(cid, exc)

    def run(self) -> FederationResult:
        by_id = self._handshake()

        stats = []
        for cid in self.expected:
            msg = self._recv_from(by_id, cid)
            if not isinstance(msg, ScalerStats):
                raise FederationError(f"expected ScalerStats from {cid!r}")
            stats.append((msg.mins, msg.maxs))
        gmins, gmaxs = merge_scaler_stats(stats)
        for cid in self.expected:
            by_id[cid].send(GlobalScaler(gmins, gmaxs))

        params = init_params(self.arch, self.cfg.seed)
        scaffold = (ScaffoldState.zeros(params, self.expected)
                    if self.algo == "scaffold" else None)
        history: list[RoundRecord] = []
        trace: list[ModelParams] = []
        best_params = dict(params)
        best_score = -np.inf
        best_round = -1
        since_best = 0

        for t in range(self.cfg.rounds):
            control = scaffold.server_control if scaffold else None
            for cid in self.expected:
                by_id[cid].send(GlobalModel(t, params, control))
            updates = []
            for cid in self.expected:
                msg = self._recv_from(by_id, cid)
                if not isinstance(msg, ClientUpdate) or msg.round != t:
                    raise FederationError(
                        f"client {cid!r} replied out of protocol at round {t}")
                updates.append(msg)

            val = np.mean([u.val_auroc for u in updates], axis=0)
            mean_val = float(val.mean())
            history.append(RoundRecord(
                t, tuple(float(v) for v in val),
                {u.client_id: float(u.train_loss) for u in updates}, mean_val))
            if mean_val > best_score:
                best_score = mean_val
                best_params = dict(params)  # the model the clients just scored
                best_round = t
                since_best = 0
            else:
                since_best += 1

            if self.algo == "scaffold":
                params = scaffold_server_update(
                    scaffold, params, updates, self.cfg.server_lr)
            else:
                params = fedavg_aggregate(updates)
            if self.record_params:
                trace.append(dict(params))
            if since_best >= self.cfg.patience:
                break

        for cid in self.expected:
            by_id[cid].send(Shutdown())
        return FederationResult(best_params, best_round, best_score, params,
                                history, scaffold, trace, (gmins, gmaxs))


# --- site worker ----------------------------------------------------------

def client_rng(seed: int, client_id: str, round_index: int) -> np.random.Generator:
    """Per-(seed, client, round) RNG stream, independent of scheduling."""
    return np.random.default_rng([seed, zlib.crc32(client_id.encode()), round_index])


def _val_auroc(probs: np.ndarray, labels: np.ndarray) -> tuple[float, ...]:
    out = []
    for k in range(labels.shape[1]):
        try:
            out.append(metrics.auroc(probs[:, k], labels[:, k]))
        except metrics.DegenerateLabelsError:
            out.append(0.5)
    return tuple(out)


class SiteWorker:
    """Client side: local preprocessing, local training, control variates."""

    def __init__(self, site_name: str, train: Cohort, val: Cohort,
                 arch: ArchConfig, algo: str, cfg: TrainConfig,
                 surgeon_vocab_size: int = 0):
        if algo not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {algo!r}")
        self.site_name = site_name
        self.train = train
        self.val = val
        self.arch = arch
        self.algo = algo
        self.cfg = cfg
        self.surgeon_vocab_size = surgeon_vocab_size

    def run(self, channel) -> None:
        channel.send(Hello(self.site_name, arch_fingerprint(self.arch)))
        ack = channel.recv()
        if isinstance(ack, Shutdown):
            return
        if not isinstance(ack, RoundAck):
            raise FederationError(f"handshake failed: got {type(ack).__name__}")

        vocabs = tuple(v for v, _ in self.arch.high_card_specs)
        local_pp = Preprocessor(vocabs, self.surgeon_vocab_size).fit(self.train)
        channel.send(ScalerStats(*local_pp.scaler_stats()))
        scaler = channel.recv()
        if isinstance(scaler, Shutdown):
            return
        if not isinstance(scaler, GlobalScaler):
            raise FederationError("expected GlobalScaler")
        pp = Preprocessor(vocabs, self.surgeon_vocab_size).fit(
            self.train, scaler_override=(scaler.mins, scaler.maxs))
        train_fm = pp.transform(self.train)
        val_fm = pp.transform(self.val)

        c_i = None
        while True:
            msg = channel.recv()
            if isinstance(msg, Shutdown):
                return
            if not isinstance(msg, GlobalModel):
                raise FederationError(f"unexpected {type(msg).__name__} mid-round")
            x = msg.params
            val_scores = _val_auroc(predict(x, self.arch, val_fm), val_fm.labels)
            rng = client_rng(self.cfg.seed, self.site_name, msg.round)
            control_delta = None
            if self.algo == "scaffold":
                if c_i is None:
                    c_i = zeros_like_params(x)
                c = msg.server_control
                offset = {k: c[k] - c_i[k] for k in c}
                rep = local_train(x, self.arch, train_fm, self.cfg, rng,
                                  grad_offset=offset)
                c_new = scaffold_client_finalize(
                    c_i, c, x, rep.params, rep.steps_taken, self.cfg.lr)
                control_delta = {k: c_new[k] - c_i[k] for k in c_i}
                c_i = c_new
            elif self.algo == "fedprox":
                rep = local_train(x, self.arch, train_fm, self.cfg, rng,
                                  prox=(self.cfg.mu, x))
            else:
                rep = local_train(x, self.arch, train_fm, self.cfg, rng)
            channel.send(ClientUpdate(
                self.site_name, msg.round, rep.params, rep.n_samples,
                rep.steps_taken, control_delta, val_scores, rep.mean_loss))


def run_federation_inprocess(arch: ArchConfig, algo: str, cfg: TrainConfig,
                             workers: dict[str, SiteWorker],
                             record_params: bool = False) -> FederationResult:
    """Coordinator in the calling thread, one thread per site worker."""
    from .wire import queue_channel_pair

    server_chans = []
    threads = []
    errors: list[tuple[str, Exception]] = []

    def run_worker(worker: SiteWorker, chan):
        try:
            worker.run(chan)
        except Exception as exc:  # surfaced after join
            errors.append((worker.site_name, exc))

    for cid in sorted(workers):
        server_side, worker_side = queue_channel_pair()
        server_chans.append(server_side)
        th = threading.Thread(target=run_worker, args=(workers[cid], worker_side),
                              daemon=True)
        threads.append(th)
        th.start()
    coordinator = Coordinator(arch, algo, cfg, server_chans,
                              sorted(workers), record_params)
    try:
        result = coordinator.run()
    finally:
        for chan in server_chans:
            chan.close()
        for th in threads:
            th.join(timeout=60.0)
    if errors:
        cid, exc = errors[0]
        raise ClientFailure(cid, exc)
    return result
