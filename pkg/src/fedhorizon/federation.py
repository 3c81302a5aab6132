"""FedAvg round engine and training scenarios.

The global objective is a sample-count-weighted average of per-site
objectives: weights ``lambda_k = N_k / N`` and per-site regularizer
coefficient ``alpha * N / (N_k * P)``, which together reproduce the
pooled objective's ``alpha * ||theta||^2`` exactly. One round broadcasts
the global parameters, trains locally at every site, and averages the
results coordinate-wise in canonical (sorted node id) order.

Per-node per-round shuffle seeds derive from the shared base seed via
SHA-256 (:func:`derive_round_seed`), so the in-process simulator and the
networked coordinator/node processes reproduce identical parameter
trajectories.
"""

import hashlib
import time
from dataclasses import dataclass, field, replace

import numpy as np

from fedhorizon import metrics as metrics_mod
from fedhorizon import model
from fedhorizon.data import pool_sites, site_to_arrays
from fedhorizon.errors import DataError


def derive_round_seed(base_seed, round_index, node_id):
    """Stable 63-bit seed for one node's training in one round."""
    text = f"fedhorizon:{base_seed}:{round_index}:{node_id}"
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & ((1 << 63) - 1)


def params_digest(params):
    """SHA-256 over the canonical little-endian float64 byte form."""
    arr = np.ascontiguousarray(params, dtype="<f8")
    return hashlib.sha256(arr.tobytes()).hexdigest()


@dataclass(frozen=True)
class FederationConfig:
    """Shared settings for a federation run.

    ``node_ids`` are normalized to sorted order (the canonical
    aggregation order); ``node_hyper`` optionally overrides the shared
    hyperparameters per node.
    """

    model_spec: model.ModelSpec
    num_rounds: int
    alpha: float
    hyper: model.Hyperparameters
    node_ids: tuple
    seed: int = 0
    node_hyper: dict = None

    def __post_init__(self):
        if self.num_rounds < 0:
            raise ValueError("num_rounds must be >= 0")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        ids = tuple(sorted(self.node_ids))
        if len(set(ids)) != len(ids) or not ids:
            raise ValueError("node_ids must be nonempty and unique")
        object.__setattr__(self, "node_ids", ids)

    @property
    def num_parties(self):
        return len(self.node_ids)

    def hyper_for(self, node_id):
        if self.node_hyper and node_id in self.node_hyper:
            return self.node_hyper[node_id]
        return self.hyper


@dataclass
class RoundUpdate:
    """One node's contribution to a round."""

    node_id: str
    params: np.ndarray
    num_samples: int
    round_index: int = 0

    def __post_init__(self):
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        if self.num_samples < 1:
            raise ValueError(f"update from {self.node_id}: num_samples must be >= 1")
        if not np.all(np.isfinite(self.params)):
            raise ValueError(f"update from {self.node_id}: non-finite parameters")


@dataclass
class RoundRecord:
    round_index: int
    param_digest: str
    node_stats: dict
    test_macro_f1: float = None
    test_accuracy: float = None
    wall_time_s: float = 0.0

    def to_dict(self):
        return {
            "round_index": self.round_index,
            "param_digest": self.param_digest,
            "node_stats": self.node_stats,
            "test_macro_f1": self.test_macro_f1,
            "test_accuracy": self.test_accuracy,
            "wall_time_s": self.wall_time_s,
        }


@dataclass
class TrainingHistory:
    """Per-round records; the digest covers the parameter trajectory only
    (wall times and convenience metrics are excluded)."""

    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def digest(self):
        h = hashlib.sha256()
        for rec in self.records:
            h.update(rec.round_index.to_bytes(4, "big"))
            h.update(bytes.fromhex(rec.param_digest))
        return h.hexdigest()

    def to_dict(self):
        return {"digest": self.digest(), "rounds": [r.to_dict() for r in self.records]}


def compute_weights(node_sizes):
    """FedAvg weights lambda_k = N_k / sum(N); they sum to 1."""
    sizes = list(node_sizes)
    if not sizes:
        raise ValueError("node_sizes is empty")
    if any(n < 1 for n in sizes):
        raise ValueError("every node size must be >= 1")
    total = float(sum(sizes))
    return [n / total for n in sizes]


def local_reg_weight(alpha, n_total, n_k, p):
    """Per-party regularizer coefficient alpha * N / (N_k * P)."""
    if n_k < 1 or p < 1:
        raise ValueError("n_k and p must be >= 1")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    return alpha * n_total / (n_k * p)


def aggregate(updates):
    """Sample-count-weighted mean of parameter vectors.

    Updates are summed in sorted node-id order regardless of input
    order, so the result is bitwise-deterministic.
    """
    if not updates:
        raise ValueError("no updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.node_id)
    ids = [u.node_id for u in ordered]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate node ids in updates: {ids}")
    rounds = {u.round_index for u in ordered}
    if len(rounds) != 1:
        raise ValueError(f"updates span multiple rounds: {sorted(rounds)}")
    length = ordered[0].params.size
    if any(u.params.size != length for u in ordered):
        raise ValueError("updates carry parameter vectors of different lengths")
    weights = compute_weights([u.num_samples for u in ordered])
    out = np.zeros(length, dtype=np.float64)
    for w, u in zip(weights, ordered):
        out += w * u.params
    return out


def _local_update(spec, params, ds, hyper, alpha, n_total, p, round_index):
    """Train one site for one round; returns (RoundUpdate, local loss)."""
    if len(ds) == 0:
        raise DataError(f"site {ds.site_id}: empty dataset")
    reg = local_reg_weight(alpha, n_total, len(ds), p)
    h = replace(hyper, reg_weight=reg,
                seed=derive_round_seed(hyper.seed, round_index, ds.site_id))
    x, y = site_to_arrays(ds)
    trained = model.train_local(spec, params, x, y, h)
    loss = model.empirical_risk(spec, trained, x, y, reg)
    return RoundUpdate(ds.site_id, trained, len(ds), round_index), loss


def run_round(global_params, nodes, cfg, round_index=0):
    """One federated round over ``nodes`` (list of (SiteDataset, Hyperparameters))."""
    if not nodes:
        raise ValueError("no nodes")
    ids = [ds.site_id for ds, _ in nodes]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate site ids: {ids}")
    n_total = sum(len(ds) for ds, _ in nodes)
    p = len(nodes)
    updates = []
    for ds, hyper in sorted(nodes, key=lambda pair: pair[0].site_id):
        upd, _ = _local_update(cfg.model_spec, global_params, ds, hyper,
                               cfg.alpha, n_total, p, round_index)
        updates.append(upd)
    return aggregate(updates)


def evaluate(spec, params, test_ds):
    """MetricsReport of argmax predictions on a feature-payload dataset."""
    x, y0 = site_to_arrays(test_ds)
    predicted = model.predict_labels(spec, params, x) + 1
    return metrics_mod.report(y0 + 1, predicted, spec.num_classes)


class FedAvgEngine:
    """Round engine shared by the in-process simulator and the networked
    coordinator: owns the global parameters, per-node regularizer
    weights, aggregation, per-round test evaluation and the history."""

    def __init__(self, cfg, test_ds=None):
        self.cfg = cfg
        self.spec = cfg.model_spec
        self.params = model.init_parameters(self.spec, cfg.seed)
        self.history = TrainingHistory()
        self.test_ds = test_ds
        self._sizes = None
        self._reg = None

    @property
    def num_rounds(self):
        return self.cfg.num_rounds

    @property
    def node_ids(self):
        return self.cfg.node_ids

    def register_sizes(self, sizes):
        """Record every node's N_k (from datasets or JOIN messages)."""
        if set(sizes) != set(self.cfg.node_ids):
            raise ValueError(
                f"size announcements {sorted(sizes)} do not match "
                f"configured nodes {list(self.cfg.node_ids)}"
            )
        if any(n < 1 for n in sizes.values()):
            raise ValueError("every announced size must be >= 1")
        self._sizes = dict(sizes)
        n_total = sum(sizes.values())
        p = self.cfg.num_parties
        self._reg = {
            nid: local_reg_weight(self.cfg.alpha, n_total, sizes[nid], p)
            for nid in self.cfg.node_ids
        }

    @property
    def sizes(self):
        return self._sizes

    def reg_weight_for(self, node_id):
        if self._reg is None:
            raise ValueError("register_sizes must run before training")
        return self._reg[node_id]

    def node_seed(self, node_id, round_index):
        return derive_round_seed(self.cfg.hyper_for(node_id).seed, round_index, node_id)

    def process_round(self, round_index, updates, node_losses=None, wall_time_s=0.0):
        """Aggregate one complete round's updates and append the record."""
        if round_index != len(self.history):
            raise ValueError(
                f"round {round_index} out of order (expected {len(self.history)})"
            )
        if {u.node_id for u in updates} != set(self.cfg.node_ids):
            raise ValueError("round is missing updates from some nodes")
        for u in updates:
            if u.round_index != round_index:
                raise ValueError(f"update from {u.node_id} is for round {u.round_index}")
            if self._sizes and u.num_samples != self._sizes[u.node_id]:
                raise ValueError(
                    f"update from {u.node_id} declares {u.num_samples} samples, "
                    f"joined with {self._sizes[u.node_id]}"
                )
        self.params = aggregate(updates)
        rec = RoundRecord(
            round_index=round_index,
            param_digest=params_digest(self.params),
            node_stats={
                u.node_id: {
                    "num_samples": u.num_samples,
                    "train_loss": None if node_losses is None
                    else node_losses.get(u.node_id),
                }
                for u in sorted(updates, key=lambda u: u.node_id)
            },
            wall_time_s=wall_time_s,
        )
        if self.test_ds is not None and len(self.test_ds) > 0:
            report = evaluate(self.spec, self.params, self.test_ds)
            rec.test_macro_f1 = report.macro_f1
            rec.test_accuracy = report.accuracy
        self.history.records.append(rec)
        return self.params


def run_federation(cfg, sites, test_ds=None):
    """Simulate ``cfg.num_rounds`` federated rounds in process.

    ``sites`` must carry exactly the configured node ids. Returns
    ``(final params, TrainingHistory)``; bitwise-reproducible for fixed
    inputs on a given backend.
    """
    by_id = {ds.site_id: ds for ds in sites}
    if set(by_id) != set(cfg.node_ids) or len(by_id) != len(sites):
        raise ValueError(
            f"sites {sorted(by_id)} do not match configured nodes {list(cfg.node_ids)}"
        )
    for ds in sites:
        if len(ds) == 0:
            raise DataError(f"site {ds.site_id}: empty dataset")
    engine = FedAvgEngine(cfg, test_ds)
    engine.register_sizes({nid: len(by_id[nid]) for nid in cfg.node_ids})
    n_total = sum(len(ds) for ds in sites)
    for r in range(cfg.num_rounds):
        started = time.monotonic()
        updates = []
        losses = {}
        for nid in cfg.node_ids:
            upd, loss = _local_update(
                cfg.model_spec, engine.params, by_id[nid], cfg.hyper_for(nid),
                cfg.alpha, n_total, cfg.num_parties, r,
            )
            updates.append(upd)
            losses[nid] = loss
        engine.process_round(r, updates, node_losses=losses,
                             wall_time_s=time.monotonic() - started)
    return engine.params, engine.history


def run_single_node(site, test_ds, cfg):
    """Train one site alone (a federation of P=1, alpha unchanged)."""
    solo = replace(cfg, node_ids=(site.site_id,))
    return run_federation(solo, [site], test_ds)


def run_centralized(sites, test_ds, cfg):
    """Train on the pooled union of all sites with regularizer alpha."""
    pooled = pool_sites(sites)
    return run_single_node(pooled, test_ds, cfg)
