"""Clustered personalized federation with property-penalized training.

Each round: select clients, refresh the client-to-cluster identity map by
empirical property loss (every `clustering_period` rounds), broadcast cluster
shared parts, run local epochs on the property-penalized objective, aggregate
shared parts per cluster by dataset-size-weighted average, then train each
cluster's own model against the cluster property on pooled member samples.
Client private heads never leave their client; a cluster's head never leaves
the cluster.  A FedAvg baseline shares the same selection and batching
machinery.
"""

from __future__ import annotations

import builtins
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .mining import MiningError, builtin_templates, mine_properties
from .models import Arch, Batch, ModelState, forward_batch, init_state, sgd_step
from .projection import default_margin, property_loss_many, teacher_correct_many
from .stl.formula import Formula, conjoin
from .stl.semantics import eval_bool_many

log = logging.getLogger("fedstl.federation")

_CLIENT_BATCH_TAG = 101
_CLUSTER_BATCH_TAG = 202


class FederationError(ValueError):
    pass


@dataclass
class FedConfig:
    rounds: int = 50
    participation: float = 0.1
    local_epochs: int = 6
    cluster_epochs: int = 4
    clustering_period: int = 5
    n_clusters: int = 5
    lam: float = 1.0
    lr: float = 0.01
    cluster_lr: float = 0.01
    batch_size: int = 64
    sample_windows: int = 32
    template_rows: tuple = (1, 2)
    window_len: int = 2
    share_private: bool = False
    seed: int = 0
    threads: int = 1

    def validate(self, n_clients: int):
        if not 0 < self.participation <= 1:
            raise FederationError("participation must be in (0, 1]")
        if self.lam < 0:
            raise FederationError("lam must be >= 0")
        if self.rounds < 1:
            raise FederationError("rounds must be >= 1")
        if self.n_clusters < 1:
            raise FederationError("n_clusters must be >= 1")
        if self.batch_size < 1:
            raise FederationError("batch_size must be >= 1")
        if math.ceil(self.participation * n_clients) < 1:
            raise FederationError("selection would be empty")


@dataclass
class ClientState:
    id: int
    train: Batch
    val: Batch
    test: Batch
    sample: Batch
    model: ModelState
    property: Formula | None = None
    mined: list = field(default_factory=list)  # per-template details behind `property`
    sample_property: Formula | None = None
    mining_failed: bool = False

    # the `property` field above shadows the builtin in this class body
    @builtins.property
    def n_train(self) -> int:
        return len(self.train)


@dataclass
class ClusterState:
    id: int
    shared: np.ndarray
    head: np.ndarray  # cluster-local private head, only for cluster-side eval/updates
    property: Formula | None = None
    members: list = field(default_factory=list)

    def model(self, arch: Arch) -> ModelState:
        return ModelState(arch, self.shared, self.head)


@dataclass
class FederationState:
    clients: list
    clusters: list
    identity_map: dict
    round: int
    config: FedConfig
    arch: Arch
    schema: tuple
    margin: float
    select_rng: np.random.Generator
    global_model: ModelState  # FedAvg baseline's model (cluster-free path)
    templates: list = field(default_factory=list)
    cluster_prop_cache: dict = field(default_factory=dict)
    last_cluster_losses: dict = field(default_factory=dict)


def _batch_rng(seed: int, round_no: int, ident: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, round_no, ident, tag)))


def _mine(traces, templates, tol=None):
    """(conjunction formula, per-template list); (None, []) when nothing mines."""
    try:
        mined = mine_properties(traces, templates, tol)
    except MiningError as err:
        log.warning("mining failed: %s", err)
        return None, []
    if not mined:
        log.warning("all templates failed")
        return None, []
    return conjoin([m.formula for m in mined]), mined


def build_federation(datasets, arch: Arch, config: FedConfig) -> FederationState:
    """Set up clients, clusters, mined properties, and RNG streams."""
    datasets = list(datasets)
    config.validate(len(datasets))
    if not datasets:
        raise FederationError("no clients")
    schema = datasets[0].schema
    root = np.random.SeedSequence(config.seed)
    init_ss, heads_ss, select_ss = root.spawn(3)
    common = init_state(arch, np.random.default_rng(init_ss))
    head_seeds = heads_ss.spawn(max(config.n_clusters - 1, 1))

    templates = []
    if config.template_rows:
        templates = builtin_templates(
            schema, arch.output_len, window_len=config.window_len, rows=list(config.template_rows)
        )

    clients = []
    all_lo, all_hi = math.inf, -math.inf
    for ds in datasets:
        n_sample = min(config.sample_windows, len(ds.train))
        sample = Batch(ds.train.inputs[:n_sample], ds.train.targets[:n_sample], schema)
        prop, mined = _mine(ds.train.target_traces(), templates) if templates else (None, [])
        clients.append(
            ClientState(
                id=ds.client_id,
                train=ds.train,
                val=ds.val,
                test=ds.test,
                sample=sample,
                model=common.clone(),
                property=prop,
                mined=mined,
                mining_failed=templates != [] and prop is None,
            )
        )
        all_lo = min(all_lo, float(ds.series.min()))
        all_hi = max(all_hi, float(ds.series.max()))
    margin = default_margin(np.array([all_lo, all_hi]))

    clusters = []
    for j in range(config.n_clusters):
        # shared parts start as copies of one common init; heads are cluster-local,
        # drawn independently (cluster 0 keeps the common head so the one-cluster
        # configuration matches the FedAvg baseline bit for bit)
        head = (
            common.private.copy()
            if j == 0
            else init_state(arch, np.random.default_rng(head_seeds[j - 1])).private
        )
        clusters.append(ClusterState(id=j, shared=common.shared.copy(), head=head))

    return FederationState(
        clients=clients,
        clusters=clusters,
        identity_map={},
        round=0,
        config=config,
        arch=arch,
        schema=schema,
        margin=margin,
        select_rng=np.random.default_rng(select_ss),
        global_model=common.clone(),
        templates=templates,
    )


def aggregate(weighted_vectors) -> np.ndarray:
    """Dataset-size-weighted average of parameter vectors.

    Computed as v0 + sum(n_i * (v_i - v0)) / sum(n_i): identical inputs stay
    bit-identical (aggregation is then an exact fixed point)."""
    pairs = list(weighted_vectors)
    if not pairs:
        raise FederationError("nothing to aggregate")
    base = pairs[0][0]
    length = base.shape[0]
    total = 0.0
    acc = np.zeros(length)
    for vec, count in pairs:
        if vec.shape != (length,):
            raise FederationError(f"vector length {vec.shape} != ({length},)")
        if count <= 0:
            raise FederationError("sample counts must be positive")
        acc += float(count) * (vec - base)
        total += float(count)
    return base + acc / total


def _sample_property(state: FederationState, client: ClientState):
    if client.sample_property is None and state.templates:
        client.sample_property = _mine(client.sample.target_traces(), state.templates)[0]
    return client.sample_property


def _mean_lp(state, prop, preds) -> float:
    return float(property_loss_many(prop, state.schema, preds, margin=state.margin).mean())


def cluster_id(state: FederationState, selected) -> dict:
    """Identity mapping: every cluster predicts on every selected client's
    sample; each client goes to the cluster with the least mean property loss
    (ties to the lowest cluster id).  Mining failures fall back to the
    client's previous assignment, or cluster 0 on the first round."""
    mapping = {}
    state.last_cluster_losses = {}
    for cid in sorted(selected):
        client = state.clients[cid]
        prop = _sample_property(state, client)
        if prop is None:
            mapping[cid] = state.identity_map.get(cid, 0)
            log.warning("client %d has no sample property; fallback assignment", cid)
            continue
        losses = np.empty(len(state.clusters))
        for j, cluster in enumerate(state.clusters):
            preds = forward_batch(cluster.model(state.arch), client.sample.inputs)
            losses[j] = _mean_lp(state, prop, preds)
        mapping[cid] = int(np.argmin(losses))
        state.last_cluster_losses[cid] = losses
    return mapping


def _property_distance(state, prop, targets) -> float:
    return float(property_loss_many(prop, state.schema, targets, margin=state.margin).mean())


def cold_start_assignment(state: FederationState, selected) -> dict:
    """First-round partition in property space.

    Freshly initialized clusters are indistinguishable to the loss-based rule,
    so the first identity map comes from property alignment alone: pick one
    medoid client per cluster by farthest-first traversal of a symmetric
    property-loss distance, then attach every client to its nearest medoid.
    """
    selected = sorted(selected)
    props = {}
    for cid in selected:
        props[cid] = _sample_property(state, state.clients[cid])
    usable = [cid for cid in selected if props[cid] is not None]
    mapping = {cid: 0 for cid in selected}
    if not usable:
        return mapping
    k = min(state.config.n_clusters, len(usable))
    dist = {}

    def d(a, b):
        key = (min(a, b), max(a, b))
        if key not in dist:
            ta = state.clients[a].sample.targets
            tb = state.clients[b].sample.targets
            dist[key] = _property_distance(state, props[a], tb) + _property_distance(
                state, props[b], ta
            )
        return dist[key]

    medoids = [usable[0]]
    while len(medoids) < k:
        best, best_score = None, -1.0
        for cid in usable:
            if cid in medoids:
                continue
            score = min(d(cid, m) for m in medoids)
            if score > best_score:
                best, best_score = cid, score
        medoids.append(best)
    for cid in usable:
        dists = [d(cid, m) if cid != m else 0.0 for m in medoids]
        mapping[cid] = int(np.argmin(dists))
    return mapping


def _epochs(model, batch_full, prop, lam, eta, scope, epochs, batch_size, rng, margin):
    n = len(batch_full)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            chunk = Batch(batch_full.inputs[idx], batch_full.targets[idx], batch_full.schema)
            model = sgd_step(model, chunk, prop, lam, eta, scope=scope, margin=margin)
    return model


def _map_maybe_parallel(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _refresh_cluster_property(state: FederationState, cluster: ClusterState):
    if not state.templates:
        return
    key = tuple(cluster.members)
    if not cluster.members:
        return
    cached = state.cluster_prop_cache.get(key)
    if cached is None:
        traces = []
        for cid in cluster.members:
            traces.extend(state.clients[cid].sample.target_traces())
        cached = _mine(traces, state.templates)[0]
        state.cluster_prop_cache[key] = cached
    cluster.property = cached


def select_clients(state: FederationState) -> list:
    cfg = state.config
    k = math.ceil(cfg.participation * len(state.clients))
    chosen = state.select_rng.choice(len(state.clients), size=k, replace=False)
    return sorted(int(c) for c in chosen)


def run_round(state: FederationState) -> FederationState:
    """One communication round of the clustered protocol."""
    cfg = state.config
    if state.round >= cfg.rounds:
        raise FederationError(f"round {state.round} past configured horizon {cfg.rounds}")
    selected = select_clients(state)

    if state.round % cfg.clustering_period == 0:
        if state.round == 0:
            state.identity_map.update(cold_start_assignment(state, selected))
        else:
            state.identity_map.update(cluster_id(state, selected))
    else:
        unmapped = [cid for cid in selected if cid not in state.identity_map]
        if unmapped:
            state.identity_map.update(cluster_id(state, unmapped))

    # broadcast, then local personalized epochs
    def train_client(cid):
        client = state.clients[cid]
        cluster = state.clusters[state.identity_map[cid]]
        model = ModelState(state.arch, cluster.shared.copy(),
                           cluster.head.copy() if cfg.share_private else client.model.private.copy())
        rng = _batch_rng(cfg.seed, state.round, cid, _CLIENT_BATCH_TAG)
        model = _epochs(
            model, client.train, client.property, cfg.lam, cfg.lr, "all",
            cfg.local_epochs, cfg.batch_size, rng, state.margin,
        )
        return cid, model

    for cid, model in _map_maybe_parallel(train_client, selected, cfg.threads):
        state.clients[cid].model = model

    # per-cluster aggregation of shared parts, then cluster-side epochs
    for cluster in state.clusters:
        cluster.members = [cid for cid in selected if state.identity_map[cid] == cluster.id]
        if not cluster.members:
            continue
        cluster.shared = aggregate(
            (state.clients[cid].model.shared, state.clients[cid].n_train)
            for cid in cluster.members
        )
        if cfg.share_private:
            cluster.head = aggregate(
                (state.clients[cid].model.private, state.clients[cid].n_train)
                for cid in cluster.members
            )
        _refresh_cluster_property(state, cluster)
        if cfg.cluster_epochs > 0:
            pooled = Batch(
                np.concatenate([state.clients[cid].sample.inputs for cid in cluster.members]),
                np.concatenate([state.clients[cid].sample.targets for cid in cluster.members]),
                state.schema,
            )
            rng = _batch_rng(cfg.seed, state.round, cluster.id, _CLUSTER_BATCH_TAG)
            # The cluster-local head trains here too: a frozen random head caps
            # the reachable prediction range and would blind the identity-map
            # loss.  The head never leaves the cluster, so the private/shared
            # boundary is unaffected.
            model = _epochs(
                cluster.model(state.arch).clone(), pooled, cluster.property, cfg.lam,
                cfg.cluster_lr, "all", cfg.cluster_epochs, cfg.batch_size, rng,
                state.margin,
            )
            cluster.shared = model.shared
            cluster.head = model.private

    state.round += 1
    return state


def run_fedavg_round(state: FederationState) -> FederationState:
    """FedAvg baseline: one global model, full-parameter weighted aggregation,
    no properties, same selection and batching machinery."""
    cfg = state.config
    if state.round >= cfg.rounds:
        raise FederationError(f"round {state.round} past configured horizon {cfg.rounds}")
    selected = select_clients(state)

    def train_client(cid):
        client = state.clients[cid]
        model = state.global_model.clone()
        rng = _batch_rng(cfg.seed, state.round, cid, _CLIENT_BATCH_TAG)
        model = _epochs(
            model, client.train, None, 0.0, cfg.lr, "all",
            cfg.local_epochs, cfg.batch_size, rng, state.margin,
        )
        return cid, model

    results = _map_maybe_parallel(train_client, selected, cfg.threads)
    for cid, model in results:
        state.clients[cid].model = model
    shared = aggregate(
        (state.clients[cid].model.shared, state.clients[cid].n_train) for cid in selected
    )
    private = aggregate(
        (state.clients[cid].model.private, state.clients[cid].n_train) for cid in selected
    )
    state.global_model = ModelState(state.arch, shared, private)
    state.round += 1
    return state


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _split_batch(client: ClientState, split: str) -> Batch:
    return {"train": client.train, "val": client.val, "test": client.test}[split]


def evaluate(state: FederationState, split: str = "test", method: str = "fedstl") -> dict:
    """Per-client and mean MSE plus property satisfaction rates.

    rho_pct: share of windows whose prediction satisfies the client property.
    rho_pct_teacher: same after teacher correction (with corrected MSE).
    Cluster-model rows use the assigned cluster's shared part and local head.
    """
    rows = []
    for client in state.clients:
        batch = _split_batch(client, split)
        if len(batch) == 0:
            raise FederationError(f"split {split!r} is empty for client {client.id}")
        cluster_idx = state.identity_map.get(client.id, 0)
        if method == "fedavg":
            model = state.global_model
        else:
            model = client.model
        preds = forward_batch(model, batch.inputs)
        row = {
            "id": client.id,
            "cluster": cluster_idx,
            "mse": float(((preds - batch.targets) ** 2).mean()),
            "rho_pct": None,
            "rho_pct_teacher": None,
            "mse_teacher": None,
            "mse_cluster": None,
            "rho_pct_cluster": None,
        }
        prop = client.property
        if prop is not None:
            sat = eval_bool_many(prop, state.schema, preds, 0)
            row["rho_pct"] = float(100.0 * sat.mean())
            teacher = teacher_correct_many(prop, state.schema, preds, margin=state.margin)
            sat_t = eval_bool_many(prop, state.schema, teacher, 0)
            row["rho_pct_teacher"] = float(100.0 * sat_t.mean())
            row["mse_teacher"] = float(((teacher - batch.targets) ** 2).mean())
        if method == "fedstl":
            cl_model = state.clusters[cluster_idx].model(state.arch)
            cl_preds = forward_batch(cl_model, batch.inputs)
            row["mse_cluster"] = float(((cl_preds - batch.targets) ** 2).mean())
            if prop is not None:
                sat_c = eval_bool_many(prop, state.schema, cl_preds, 0)
                row["rho_pct_cluster"] = float(100.0 * sat_c.mean())
        rows.append(row)
    return {"per_client": rows}


def _summary_block(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "std": None}
    arr = np.asarray(vals, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std())}


def summarize(rows, method: str) -> dict:
    """Final comparison block shaped like the headline table: MSE and rho%
    (mean and std across clients) per evaluated variant."""
    out = {}
    if method == "fedavg":
        out["fedavg"] = {
            "mse": _summary_block([r["mse"] for r in rows]),
            "rho_pct": _summary_block([r["rho_pct"] for r in rows]),
        }
        return out
    out["fedstl"] = {
        "mse": _summary_block([r["mse"] for r in rows]),
        "rho_pct": _summary_block([r["rho_pct"] for r in rows]),
    }
    out["fedstl_s"] = {
        "mse": _summary_block([r["mse_cluster"] for r in rows]),
        "rho_pct": _summary_block([r["rho_pct_cluster"] for r in rows]),
    }
    out["fedstl_t"] = {
        "mse": _summary_block([r["mse_teacher"] for r in rows]),
        "rho_pct": _summary_block([r["rho_pct_teacher"] for r in rows]),
    }
    return out


def run_experiment(datasets, arch: Arch, config: FedConfig, method: str = "fedstl"):
    """Full training run; returns (report dict with schema 1, final state)."""
    if method not in ("fedstl", "fedavg"):
        raise FederationError(f"unknown method {method!r}")
    state = build_federation(datasets, arch, config)
    rounds = []
    for _ in range(config.rounds):
        t0 = time.perf_counter()
        if method == "fedstl":
            run_round(state)
        else:
            run_fedavg_round(state)
        wall_ms = 1000.0 * (time.perf_counter() - t0)
        ev = evaluate(state, "test", method)
        rounds.append(
            {
                "round": state.round - 1,
                "per_client": [
                    {k: r[k] for k in ("id", "cluster", "mse", "rho_pct", "rho_pct_teacher")}
                    for r in ev["per_client"]
                ],
                "cluster_sizes": [len(c.members) for c in state.clusters]
                if method == "fedstl"
                else [len(state.clients)],
                "wall_ms": wall_ms,
            }
        )
    final = evaluate(state, "test", method)
    report = {
        "schema": 1,
        "method": method,
        "rounds": rounds,
        "summary": summarize(final["per_client"], method),
    }
    return report, state
