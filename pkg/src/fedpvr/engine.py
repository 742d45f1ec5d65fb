"""Synchronous federated rounds with partial variance reduction.

One code path serves every strategy. A strategy resolves to a mask ``p``:
coordinates with ``p_j = 1`` take control-variate corrected steps and the rest
take plain (optionally momentum-filtered) SGD steps. FedAvg and FedProx use
``p = 0``, SCAFFOLD uses ``p = 1`` and FedPVR uses a partial mask.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import rng as rng_mod
from .metrics import DiversityReport, drift_diversity
from .params import LayerLayout, Mask, as_vector, pairwise_sum

FEDAVG = "fedavg"
FEDPROX = "fedprox"
SCAFFOLD = "scaffold"
FEDPVR = "fedpvr"
KINDS = (FEDAVG, FEDPROX, SCAFFOLD, FEDPVR)


class DivergenceError(FloatingPointError):
    """A client or server produced a non-finite parameter."""

    def __init__(self, message: str, client: int | None = None, step: int | None = None,
                 round_index: int | None = None, last_record: "RoundRecord | None" = None):
        super().__init__(message)
        self.client = client
        self.step = step
        self.round_index = round_index
        self.last_record = last_record


@dataclass
class Strategy:
    kind: str
    local_lr: float
    local_steps: int
    global_lr: float = 1.0
    batch_size: int = 32
    momentum: float = 0.0
    prox_mu: float = 0.0
    mask: Mask | None = None
    allow_small_global_lr: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {KINDS}")
        if self.local_lr <= 0:
            raise ValueError("local_lr must be positive")
        if self.local_steps < 1:
            raise ValueError("local_steps must be at least 1")
        if self.global_lr <= 0 or (self.global_lr < 1 and not self.allow_small_global_lr):
            raise ValueError("global_lr must be >= 1 (set allow_small_global_lr to override)")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.prox_mu < 0:
            raise ValueError("prox_mu must be nonnegative")
        if self.prox_mu and self.kind != FEDPROX:
            raise ValueError("prox_mu is only meaningful for fedprox")
        if self.kind == FEDPVR and self.mask is None:
            raise ValueError("fedpvr needs a mask")
        if self.kind != FEDPVR and self.mask is not None:
            raise ValueError(f"{self.kind} fixes its own mask; do not pass one")

    def resolve_mask(self, dim: int) -> Mask:
        if self.kind == SCAFFOLD:
            return Mask.ones(dim)
        if self.kind == FEDPVR:
            if self.mask.dim != dim:
                raise ValueError(f"mask has dimension {self.mask.dim}, model {dim}")
            return self.mask
        return Mask.zeros(dim)


def comm_cost(strategy: Strategy, d: int, v: int | None = None) -> tuple[int, int]:
    """Parameters sent (server->client, client->server) per client per round."""
    if strategy.kind in (FEDAVG, FEDPROX):
        return d, d
    if strategy.kind == SCAFFOLD:
        return 2 * d, 2 * d
    if v is None:
        v = strategy.resolve_mask(d).v
    return d + v, d + v


def comm_ratio(strategy: Strategy, d: int, v: int | None = None) -> float:
    """Total copies of the model per round, as in the "2x"/"4x" notation."""
    down, up = comm_cost(strategy, d, v)
    return (down + up) / d


@dataclass
class ClientState:
    index: int
    c: np.ndarray


@dataclass
class ServerState:
    x: np.ndarray
    c: np.ndarray
    global_lr: float
    round: int = 0


@dataclass
class ClientResult:
    index: int
    y: np.ndarray
    c: np.ndarray
    mean_loss: float
    drift_sum: float
    steps: int
    trajectory: list[np.ndarray] | None = None
    gradients: list[np.ndarray] | None = None


def client_local_update(x, c, state: ClientState, obj, strategy: Strategy, mask: Mask,
                        rng: np.random.Generator, lr: float | None = None,
                        steps: int | None = None, batch_size: int | None = None,
                        trace: bool = False) -> ClientResult:
    """Run K local steps from the broadcast model and refresh the client variate.

    ``steps`` and ``batch_size`` override the strategy's values for this client.
    """
    lr = strategy.local_lr if lr is None else lr
    K = strategy.local_steps if steps is None else steps
    batch_size = strategy.batch_size if batch_size is None else batch_size
    x = as_vector(x)
    y = x.copy()
    svr, sgd = mask.svr_idx, mask.sgd_idx
    correction = c[svr] - state.c[svr]
    buf = np.zeros(sgd.shape[0]) if strategy.momentum > 0 else None
    loss_total = 0.0
    drift_sum = 0.0
    trajectory = [] if trace else None
    gradients = [] if trace else None
    for k in range(1, K + 1):
        sample = obj.stochastic_gradient(y, batch_size, rng)
        g = sample.gradient
        if strategy.prox_mu:
            g = g + strategy.prox_mu * (y - x)
        if trace:
            gradients.append(g.copy())
        step = g.copy()
        step[svr] += correction
        if buf is not None:
            buf = strategy.momentum * buf + g[sgd]
            step[sgd] = buf
        with np.errstate(over="ignore", invalid="ignore"):
            y -= lr * step
        if not np.all(np.isfinite(y)):
            raise DivergenceError(
                f"client {state.index} produced a non-finite model at local step {k}",
                client=state.index, step=k,
            )
        diff = y - x
        drift_sum += float(np.dot(diff, diff))
        loss_total += sample.loss
        if trace:
            trajectory.append(y.copy())
    new_c = np.zeros_like(state.c)
    new_c[svr] = state.c[svr] - c[svr] + (x[svr] - y[svr]) / (K * lr)
    return ClientResult(state.index, y, new_c, loss_total / K, drift_sum, K,
                        trajectory, gradients)


def server_aggregate(server: ServerState, results: Sequence[ClientResult],
                     n_clients: int) -> ServerState:
    """Average client models and variates in ascending client order."""
    results = sorted(results, key=lambda r: r.index)
    got = [r.index for r in results]
    if got != list(range(n_clients)):
        missing = sorted(set(range(n_clients)) - set(got))
        raise ValueError(f"full participation required; missing clients {missing}")
    x = server.x
    delta = pairwise_sum([r.y - x for r in results])
    new_x = x + (server.global_lr / n_clients) * delta
    new_c = pairwise_sum([r.c for r in results]) / n_clients
    return ServerState(new_x, new_c, server.global_lr, server.round + 1)


@dataclass
class RoundRecord:
    round: int
    local_lr: float
    train_loss: float
    client_drift: float
    diversity: DiversityReport
    params_down: int
    params_up: int
    test_loss: float | None = None
    test_accuracy: float | None = None
    extra: dict = field(default_factory=dict)
    wall_time: float = 0.0
    model: np.ndarray | None = None
    deltas: list[np.ndarray] | None = None
    client_results: list[ClientResult] | None = None


class FederatedEngine:
    """Holds server and client state and advances one round at a time.

    ``evaluator(x)`` returns a dict whose ``test_loss``/``test_accuracy`` keys
    fill the matching record fields; other keys land in ``record.extra``.
    Each client draws minibatches from the stream ``(seed, SAMPLING, client,
    round)``, so results do not depend on ``workers``. ``client_steps`` sets a
    per-client K (e.g. from local epochs); the minibatch size is capped at each
    client's shard size.
    """

    def __init__(self, objectives: Sequence, strategy: Strategy, x0, seed: int = 0,
                 evaluator: Callable[[np.ndarray], dict] | None = None,
                 layout: LayerLayout | None = None, keep_models: bool = True,
                 keep_deltas: bool = False, trace: bool = False, workers: int = 1,
                 client_steps: Sequence[int] | None = None):
        if not objectives:
            raise ValueError("need at least one client")
        self.objectives = list(objectives)
        dim = self.objectives[0].dim
        if any(o.dim != dim for o in self.objectives):
            raise ValueError("client objectives disagree in dimension")
        x0 = as_vector(x0, dim).copy()
        self.strategy = strategy
        self.mask = strategy.resolve_mask(dim)
        self.layout = layout or getattr(self.objectives[0], "layout", None)
        self.seed = seed
        self.evaluator = evaluator
        self.keep_models = keep_models
        self.keep_deltas = keep_deltas
        self.trace = trace
        self.workers = workers
        self.server = ServerState(x0, np.zeros(dim), strategy.global_lr)
        self.clients = [ClientState(i, np.zeros(dim)) for i in range(len(self.objectives))]
        self.records: list[RoundRecord] = []
        if client_steps is None:
            client_steps = [strategy.local_steps] * self.n_clients
        if len(client_steps) != self.n_clients or min(client_steps) < 1:
            raise ValueError("client_steps needs one positive count per client")
        self.client_steps = [int(k) for k in client_steps]
        self.client_batch = [
            min(strategy.batch_size, getattr(o, "n", strategy.batch_size)) for o in self.objectives
        ]

    @property
    def n_clients(self) -> int:
        return len(self.clients)

    @property
    def x(self) -> np.ndarray:
        return self.server.x

    def _client_rng(self, client: int, round_index: int) -> np.random.Generator:
        return rng_mod.stream(self.seed, rng_mod.SAMPLING, client, round_index)

    def _update(self, i: int, lr: float, round_index: int) -> ClientResult:
        return client_local_update(
            self.server.x, self.server.c, self.clients[i], self.objectives[i],
            self.strategy, self.mask, self._client_rng(i, round_index), lr=lr,
            steps=self.client_steps[i], batch_size=self.client_batch[i], trace=self.trace,
        )

    def run_round(self, lr: float | None = None) -> RoundRecord:
        lr = self.strategy.local_lr if lr is None else float(lr)
        round_index = self.server.round + 1
        start = time.perf_counter()
        x_prev = self.server.x
        try:
            if self.workers > 1:
                with ThreadPoolExecutor(self.workers) as pool:
                    results = list(pool.map(lambda i: self._update(i, lr, round_index),
                                            range(self.n_clients)))
            else:
                results = [self._update(i, lr, round_index) for i in range(self.n_clients)]
        except DivergenceError as exc:
            exc.round_index = round_index
            exc.last_record = self.records[-1] if self.records else None
            raise
        new_server = server_aggregate(self.server, results, self.n_clients)
        if not np.all(np.isfinite(new_server.x)):
            raise DivergenceError(f"server model became non-finite in round {round_index}",
                                  round_index=round_index,
                                  last_record=self.records[-1] if self.records else None)
        for res in results:
            self.clients[res.index].c = res.c
        self.server = new_server

        deltas = [r.y - x_prev for r in results]
        diversity = drift_diversity(deltas, self.layout, round_index=round_index)
        total_steps = sum(r.steps for r in results)
        drift = sum(r.drift_sum for r in results) / total_steps
        down, up = comm_cost(self.strategy, x_prev.shape[0], self.mask.v)
        record = RoundRecord(
            round=round_index,
            local_lr=lr,
            train_loss=float(np.mean([r.mean_loss for r in results])),
            client_drift=drift,
            diversity=diversity,
            params_down=down * self.n_clients,
            params_up=up * self.n_clients,
            model=self.server.x.copy() if self.keep_models else None,
            deltas=deltas if self.keep_deltas else None,
            client_results=results if self.trace else None,
        )
        if self.evaluator is not None:
            scores = dict(self.evaluator(self.server.x))
            record.test_loss = scores.pop("test_loss", None)
            record.test_accuracy = scores.pop("test_accuracy", None)
            record.extra = scores
        record.wall_time = time.perf_counter() - start
        self.records.append(record)
        return record

    def run(self, rounds: int, schedule: Callable[[int], float] | None = None,
            callback: Callable[[RoundRecord], None] | None = None) -> list[RoundRecord]:
        """Run ``rounds`` rounds; ``schedule(r)`` gives the local lr for 0-based round r."""
        out = []
        for _ in range(rounds):
            lr = None if schedule is None else schedule(self.server.round)
            record = self.run_round(lr)
            out.append(record)
            if callback is not None:
                callback(record)
        return out
