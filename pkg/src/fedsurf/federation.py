"""Federation simulation and the one-round FedSurF protocol.

Clients fit local survival forests on private shards.  The server learns
only each client's tree count, assigns tree quotas proportionally to the
client dataset sizes, and every client answers with a single message
carrying its quota of trees, sampled uniformly or with probability
proportional to the inverse per-tree integrated Brier score.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .forest import Forest, ForestParams, SurvivalTree, dumps_forest, fit_forest, loads_forest
from .metrics import IBS_FLOOR, EvalContext, MetricsReport, evaluate_model, per_tree_ibs
from .survival import SurvivalDataset, train_test_split

__all__ = [
    "FederationConfig",
    "ClientState",
    "ServerState",
    "Message",
    "MessageLog",
    "FederationError",
    "uniform_split",
    "label_skew_split",
    "local_split",
    "assign_tree_quotas",
    "weighted_sample",
    "select_local_trees",
    "make_shards",
    "setup_clients",
    "fedsurf_round",
    "run_fedsurf",
    "run_local_baselines",
]

# independent random streams derived from the federation seed
_SPLIT, _LOCAL, _QUOTA, _SELECT, _FOREST = range(5)


class FederationError(RuntimeError):
    """A FedSurF stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


@dataclass(frozen=True)
class FederationConfig:
    n_clients: int = 10
    split: str = "uniform"
    alpha: float = 8.0
    min_client_samples: int = 25
    n_server_trees: int = 100
    sampling: str = "uniform"
    local_val_fraction: float = 0.2
    n_bins: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError("n_clients must be at least 1")
        if self.split not in ("uniform", "label_skew"):
            raise ValueError(f"unknown split {self.split!r}")
        if self.sampling not in ("uniform", "inverse_ibs"):
            raise ValueError(f"unknown sampling strategy {self.sampling!r}")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.n_server_trees < 1 or self.min_client_samples < 0:
            raise ValueError("n_server_trees must be positive")
        if not 0.0 < self.local_val_fraction < 1.0:
            raise ValueError("local_val_fraction must lie in (0, 1)")


@dataclass
class ClientState:
    client_id: int
    local_train: SurvivalDataset
    local_val: SurvivalDataset
    model: Forest | None = None
    quota: int = 0
    tree_ibs: np.ndarray | None = None

    @property
    def n_trees(self) -> int:
        return 0 if self.model is None else len(self.model)

    @property
    def dataset_size(self) -> int:
        return len(self.local_train) + len(self.local_val)


@dataclass(frozen=True)
class Message:
    direction: str  # "client->server" | "server->client"
    payload: str  # "tree_count" | "quota" | "trees"
    client: int
    size: int
    round: int = 1

    def to_json(self) -> str:
        return json.dumps({"direction": self.direction, "payload": self.payload,
                           "client": self.client, "bytes": self.size, "round": self.round})


@dataclass
class MessageLog:
    messages: list[Message] = field(default_factory=list)

    def send(self, direction: str, payload: str, client: int, body: bytes, round: int = 1) -> bytes:
        self.messages.append(Message(direction, payload, client, len(body), round))
        return body

    def of(self, payload: str) -> list[Message]:
        return [m for m in self.messages if m.payload == payload]

    def tree_rounds(self) -> int:
        return len({m.round for m in self.of("trees")})

    def bytes_sent(self, payload: str | None = None) -> int:
        return sum(m.size for m in self.messages if payload is None or m.payload == payload)

    def to_jsonl(self) -> str:
        return "".join(m.to_json() + "\n" for m in self.messages)


@dataclass
class ServerState:
    quotas: list[int]
    collected: list[tuple[int, SurvivalTree]]
    ensemble: Forest
    log: MessageLog


def uniform_split(train: SurvivalDataset, n_clients: int, seed) -> list[SurvivalDataset]:
    """Assign every record to a client drawn uniformly at random.

    Draws are repeated (up to 100 times, with derived seeds) until no
    client is left empty.
    """
    if n_clients < 1:
        raise ValueError("n_clients must be at least 1")
    for attempt in range(100):
        rng = np.random.default_rng([*np.atleast_1d(seed), attempt])
        owner = rng.integers(0, n_clients, size=len(train))
        if np.all(np.bincount(owner, minlength=n_clients) > 0):
            return [train.subset(np.nonzero(owner == k)[0]) for k in range(n_clients)]
    raise ValueError(f"could not give each of {n_clients} clients a record in 100 attempts")


def label_skew_split(
    train: SurvivalDataset,
    n_clients: int,
    alpha: float,
    min_client_samples: int,
    n_bins: int = 10,
    seed=0,
) -> list[SurvivalDataset]:
    """Dirichlet label-skewed partition over quantile bins of the observed time.

    Each time bin draws its own client proportions from
    ``Dirichlet(alpha * 1_K)`` and scatters its records accordingly.  Shards
    below ``min_client_samples`` are then filled one record at a time,
    taken at random from the current largest shard.
    """
    if n_bins < 2:
        raise ValueError("n_bins must be at least 2")
    if n_clients * min_client_samples > len(train):
        raise ValueError(
            f"infeasible: {n_clients} clients x {min_client_samples} samples "
            f"exceeds {len(train)} training records"
        )
    rng = np.random.default_rng(seed)
    edges = np.quantile(train.time, np.linspace(0, 1, n_bins + 1)[1:-1])
    bins = np.searchsorted(edges, train.time, side="right")
    owner = np.empty(len(train), dtype=np.int64)
    for b in range(n_bins):
        idx = np.nonzero(bins == b)[0]
        p = rng.dirichlet(np.full(n_clients, alpha))
        owner[idx] = rng.choice(n_clients, size=len(idx), p=p)
    sizes = np.bincount(owner, minlength=n_clients)
    while sizes.min() < min_client_samples:
        src, dst = int(np.argmax(sizes)), int(np.argmin(sizes))
        moved = rng.choice(np.nonzero(owner == src)[0])
        owner[moved] = dst
        sizes[src] -= 1
        sizes[dst] += 1
    return [train.subset(np.nonzero(owner == k)[0]) for k in range(n_clients)]


def local_split(shard: SurvivalDataset, val_fraction: float, seed):
    """Split a client shard into ``(train, validation)``."""
    return train_test_split(shard, val_fraction, seed)


def _draw(cum, rng, size=None):
    return np.searchsorted(cum, rng.random(size) * cum[-1], side="right")


def assign_tree_quotas(sizes, caps, n_server_trees: int, rng) -> np.ndarray:
    """Per-client tree counts summing to ``n_server_trees``.

    Each of the ``n_server_trees`` iterations picks a client with probability
    proportional to its dataset size among the clients still below their cap.
    """
    sizes = np.asarray(sizes, dtype=float)
    caps = np.asarray(caps, dtype=np.int64)
    if sizes.shape != caps.shape or len(sizes) == 0:
        raise ValueError("sizes and caps must be non-empty and aligned")
    if np.any(sizes <= 0):
        raise ValueError("client dataset sizes must be positive")
    if caps.sum() < n_server_trees:
        raise ValueError(f"clients hold {caps.sum()} trees, fewer than the {n_server_trees} requested")
    quotas = np.zeros(len(sizes), dtype=np.int64)
    for _ in range(n_server_trees):
        cum = np.cumsum(np.where(quotas < caps, sizes, 0.0))
        quotas[_draw(cum, rng)] += 1
    return quotas


def weighted_sample(n: int, items, weights, with_replacement: bool, rng) -> list:
    """Draw ``n`` items with probability proportional to ``weights``.

    Without replacement the draw is equivalent to sequential sampling with
    removal; it uses exponential keys ``log(u) / w`` and keeps the ``n`` largest.
    """
    items = list(items)
    w = np.asarray(weights, dtype=float)
    if len(w) != len(items):
        raise ValueError("one weight per item is required")
    if np.any(~np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("weights must be positive and finite")
    if n < 0:
        raise ValueError("n must be non-negative")
    if with_replacement:
        if n and not items:
            raise ValueError("cannot sample from an empty set")
        idx = _draw(np.cumsum(w), rng, n)
    else:
        if n > len(items):
            raise ValueError(f"cannot draw {n} of {len(items)} items without replacement")
        keys = np.log(rng.random(len(w))) / w
        idx = np.argsort(-keys, kind="stable")[:n]
    return [items[i] for i in idx]


def select_local_trees(
    client: ClientState,
    strategy: str,
    rng,
    ctx: EvalContext | None = None,
) -> list[SurvivalTree]:
    """Pick ``client.quota`` distinct trees of the client forest.

    ``inverse_ibs`` weights tree ``j`` by ``1 / IBS_j`` on the local
    validation split, with IBS floored at ``IBS_FLOOR``; ``ctx`` defaults to
    the context derived from the client's local training split.
    """
    if client.model is None:
        raise ValueError("client has no fitted model")
    trees = list(client.model.trees)
    if client.quota > len(trees):
        raise ValueError(f"quota {client.quota} exceeds the {len(trees)} local trees")
    if strategy == "uniform":
        weights = np.ones(len(trees))
    elif strategy == "inverse_ibs":
        if len(client.local_val) == 0:
            raise ValueError(
                f"client {client.client_id} has an empty validation split; use uniform sampling"
            )
        if client.tree_ibs is None:
            ctx = ctx or EvalContext.from_train(client.local_train)
            client.tree_ibs = np.array(
                [per_tree_ibs(t, client.local_val, ctx.G, ctx.grid) for t in trees]
            )
        weights = 1.0 / np.maximum(client.tree_ibs, IBS_FLOOR)
    else:
        raise ValueError(f"unknown sampling strategy {strategy!r}")
    return weighted_sample(client.quota, trees, weights, False, rng)


def _sub_seed(*keys) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def setup_clients(
    full_train: SurvivalDataset,
    config: FederationConfig,
    forest_params: ForestParams,
    n_jobs: int = 1,
    shards: list[SurvivalDataset] | None = None,
    fit: bool = True,
) -> list[ClientState]:
    """Partition ``full_train`` (unless ``shards`` is given) and fit local forests."""
    try:
        if shards is None:
            shards = make_shards(full_train, config)
        clients = []
        for k, shard in enumerate(shards):
            tr, va = local_split(shard, config.local_val_fraction, [config.seed, _LOCAL, k])
            clients.append(ClientState(k, tr, va))
    except Exception as exc:
        raise FederationError("split", exc) from exc
    if not fit:
        return clients
    try:
        for c in clients:
            params = replace(forest_params, seed=_sub_seed(forest_params.seed, _FOREST, c.client_id))
            c.model = fit_forest(c.local_train, params, n_jobs=n_jobs)
    except Exception as exc:
        raise FederationError("local_training", exc) from exc
    return clients


def make_shards(full_train: SurvivalDataset, config: FederationConfig) -> list[SurvivalDataset]:
    seed = [config.seed, _SPLIT]
    if config.split == "uniform":
        return uniform_split(full_train, config.n_clients, seed)
    return label_skew_split(full_train, config.n_clients, config.alpha,
                            config.min_client_samples, config.n_bins, seed)


def fedsurf_round(
    clients: list[ClientState], config: FederationConfig, sampling: str | None = None
) -> ServerState:
    """Tree assignment and tree sampling on already trained clients.

    Every payload crosses the simulated channel in serialized form; the
    returned log records each message.  Re-running with a different
    ``sampling`` reuses the same quotas.
    """
    sampling = sampling or config.sampling
    log = MessageLog()
    try:
        counts = [int(json.loads(log.send("client->server", "tree_count", c.client_id,
                                          json.dumps(c.n_trees).encode())))
                  for c in clients]
        sizes = [c.dataset_size for c in clients]
        quotas = assign_tree_quotas(sizes, counts, config.n_server_trees,
                                    np.random.default_rng([config.seed, _QUOTA]))
        for c, q in zip(clients, quotas):
            c.quota = int(json.loads(log.send("server->client", "quota", c.client_id,
                                              json.dumps(int(q)).encode())))
    except Exception as exc:
        raise FederationError("tree_assignment", exc) from exc
    try:
        collected = []
        for c in clients:
            if c.quota == 0:
                continue
            rng = np.random.default_rng([config.seed, _SELECT, c.client_id])
            chosen = select_local_trees(c, sampling, rng)
            body = log.send("client->server", "trees", c.client_id,
                            dumps_forest(Forest(chosen, c.model.n_features)).encode())
            received = loads_forest(body.decode())
            collected.extend((c.client_id, t) for t in received.trees)
    except Exception as exc:
        raise FederationError("tree_sampling", exc) from exc
    try:
        ensemble = Forest([t for _, t in collected])
    except Exception as exc:
        raise FederationError("aggregation", exc) from exc
    return ServerState([int(q) for q in quotas], collected, ensemble, log)


def run_fedsurf(
    full_train: SurvivalDataset,
    config: FederationConfig,
    forest_params: ForestParams,
    n_jobs: int = 1,
) -> tuple[ServerState, list[ClientState]]:
    """Full FedSurF simulation: split, local training, assignment, sampling."""
    clients = setup_clients(full_train, config, forest_params, n_jobs)
    return fedsurf_round(clients, config), clients


def run_local_baselines(
    clients: list[ClientState], test: SurvivalDataset, ctx: EvalContext, name: str = "fedsurf", **meta
) -> list[MetricsReport]:
    """Evaluate every client's own forest on the shared test set."""
    return [
        evaluate_model(c.model, test, ctx, name, setting="local", client=c.client_id, **meta)
        for c in clients
    ]
