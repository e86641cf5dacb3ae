"""Client/server orchestration for one-shot and iterative federated clustering.

The simulation is in-process but keeps a real serialized boundary: clients
and the server exchange only encoded bytes, so a socket transport could be
dropped in without touching the protocol logic.  All clients participate in
every round; the server never sees raw sample vectors, only structural
graphs, local cluster labels, and (optionally noised) Gaussian prototypes.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .aggregation import (
    GlobalResult,
    assemble_global,
    compute_global_prototypes,
    extract_global_clusters,
    inter_client_block,
    refine_global,
)
from .embedder import EmbedderConfig, train_embedder
from .errors import ConfigError, InvalidInputError, RoundIncompleteError
from .graph import (
    ClusterAssignment,
    _solve_all_rows,
    as_points,
    connected_components,
    default_neighbor_count,
    graph_laplacian,
    c_smallest_eigvecs,
    learn_private_graph,
    pairwise_sq_dists,
)
from .kmeans import kmeans
from .prototypes import (
    Prototype,
    PrototypeSet,
    compute_sensitivities,
    fit_gmm,
    l1_bound_rows,
    privatize_prototypes,
    prototypes_from_labels,
)

SERVER_SEED_SALT = 0x53525652  # "SRVR"
GMM_SEED_OFFSET = 0x11
DP_SEED_OFFSET = 0xD9
EMBEDDER_SEED_OFFSET = 0xE3


@dataclass
class FederationConfig:
    num_clients: int
    clusters: int
    neighbors: int | None = None  # per-client k_n; None derives from data size
    inter_block_k: int = 5
    beta: float = 1.0
    epsilon: float = 0.0  # 0 disables differential privacy
    rounds: int = 1
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ConfigError("need at least one client")
        if self.clusters < 1:
            raise ConfigError("need at least one cluster")
        if self.rounds < 1:
            raise ConfigError("need at least one round")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")


@dataclass
class UploadMessage:
    """Client-to-server payload: structural graph, labels, prototypes."""

    client_id: int
    graph: object
    local_labels: np.ndarray
    prototypes: PrototypeSet
    round_index: int = 0
    schema_version: int = 1


@dataclass
class GlobalFeedback:
    """Server-to-client payload: assignment slice and global prototypes."""

    client_id: int
    assignments: np.ndarray
    global_prototypes: PrototypeSet
    round_index: int = 0


class ClientRoundError(RuntimeError):
    def __init__(self, client_id, cause):
        super().__init__(f"client {client_id}: {cause}")
        self.client_id = client_id


def client_seed(base_seed, cid):
    return (base_seed ^ cid) & 0x7FFFFFFF


def _plain_knn_graph(points, k):
    """One-pass sparse neighbor graph without the rank constraint."""
    d_x = pairwise_sq_dists(points)
    graph, _ = _solve_all_rows(d_x, k)
    return graph


def client_round(data, cfg, client_id, feedback=None, round_index=0, psg_off=False):
    """Run one client's local pipeline and assemble its upload message.

    Embeds the data (identity or trained encoder guided by the global
    prototypes), bounds row norms when privacy is on, learns the private
    structural graph, summarizes its clusters as Gaussian prototypes
    (falling back to a full mixture fit when the graph did not reach the
    target component count), and noises the prototypes under the privacy
    budget.
    """
    try:
        x = as_points(data)
        seed = client_seed(cfg.seed, client_id)
        c = cfg.clusters

        protos_in = feedback.global_prototypes if feedback is not None else None
        embedder_cfg = cfg.embedder
        if embedder_cfg.kind == "identity":
            embedder_cfg = replace(embedder_cfg, latent_dim=x.shape[1])
        else:
            # Shared (not client-salted) seed: all clients start from the same
            # encoder init, which keeps their latent frames aligned so that
            # prototypes remain comparable across clients.
            embedder_cfg = replace(
                embedder_cfg, seed=(cfg.seed + EMBEDDER_SEED_OFFSET) & 0x7FFFFFFF
            )
        latent = train_embedder(x, protos_in, embedder_cfg, n_centers=c)
        z = latent.embeddings
        space = "input" if embedder_cfg.kind == "identity" else "latent"

        if cfg.epsilon > 0:
            z, _ = l1_bound_rows(z)

        k = cfg.neighbors if cfg.neighbors is not None else default_neighbor_count(len(z), c)
        if psg_off:
            graph = _plain_knn_graph(z, k)
        else:
            graph, _, _ = learn_private_graph(z, c, k)

        components, count = connected_components(graph)
        if count == c:
            protos, assignment = prototypes_from_labels(z, components.labels, c)
        else:
            protos, assignment = fit_gmm(z, c, seed=seed + GMM_SEED_OFFSET)
        protos.client_id = client_id
        protos.space = space

        if cfg.epsilon > 0:
            counts = np.bincount(assignment.labels, minlength=c)
            n_c_min = max(1, int(counts[counts > 0].min()))
            bounds = compute_sensitivities(n_c_min)
            protos = privatize_prototypes(
                protos, bounds, cfg.epsilon, rng_seed=seed + DP_SEED_OFFSET
            )

        return UploadMessage(
            client_id=client_id,
            graph=graph,
            local_labels=assignment.labels,
            prototypes=protos,
            round_index=round_index,
        )
    except Exception as err:
        raise ClientRoundError(client_id, err) from err


def server_round(uploads, cfg, gsg_off=False):
    """Aggregate client uploads into a global clustering and feedback.

    Builds prototype-affinity blocks for every client pair, assembles and
    refines the global graph (refinement skipped when ``gsg_off``), reads
    off cluster assignments, and summarizes global prototypes from the
    uploaded prototype means grouped by the global label of their clusters;
    the server works entirely from uploads, never raw samples.
    """
    m = cfg.num_clients
    present = {u.client_id for u in uploads}
    missing = sorted(set(range(m)) - present)
    if missing:
        raise RoundIncompleteError(f"missing uploads from clients {missing}")
    rounds = {u.round_index for u in uploads}
    if len(rounds) != 1:
        raise RoundIncompleteError(f"uploads span rounds {sorted(rounds)}")
    round_index = rounds.pop()

    ordered = sorted(uploads, key=lambda u: u.client_id)
    blocks = {}
    for i in range(m):
        for j in range(i + 1, m):
            blocks[(i, j)] = inter_client_block(
                ordered[i].prototypes,
                ordered[i].local_labels,
                ordered[j].prototypes,
                ordered[j].local_labels,
            )
    global_graph = assemble_global(
        [u.graph for u in ordered], blocks, beta=cfg.beta, inter_block_k=cfg.inter_block_k
    )
    c = cfg.clusters
    if gsg_off:
        similarity = global_graph.graph
        embedding, diagnostics = c_smallest_eigvecs(graph_laplacian(similarity), c)
    else:
        similarity, embedding, diagnostics = refine_global(global_graph, c)

    server_seed = (cfg.seed ^ SERVER_SEED_SALT) & 0x7FFFFFFF
    assignment = extract_global_clusters(similarity, embedding, c, seed=server_seed)

    offsets = global_graph.client_offsets
    client_ids = np.concatenate(
        [np.full(u.graph.n, u.client_id, dtype=np.int64) for u in ordered]
    )
    local_indices = np.concatenate([np.arange(u.graph.n, dtype=np.int64) for u in ordered])
    assignment = ClusterAssignment(
        labels=assignment.labels, client_ids=client_ids, local_indices=local_indices
    )

    global_protos = _fuse_prototypes(ordered, assignment.labels, offsets, c)

    result = GlobalResult(
        similarity=similarity,
        embedding=embedding,
        assignments=assignment,
        global_prototypes=global_protos,
        diagnostics=diagnostics,
    )
    feedback = []
    for i, upload in enumerate(ordered):
        start = offsets[i]
        stop = start + upload.graph.n
        feedback.append(
            GlobalFeedback(
                client_id=upload.client_id,
                assignments=assignment.labels[start:stop].copy(),
                global_prototypes=global_protos,
                round_index=round_index,
            )
        )
    return result, feedback


def _fuse_prototypes(ordered, global_labels, offsets, c):
    """Global prototypes from uploaded means, grouped by global label.

    Each client cluster's mean vector inherits the majority global label of
    its member samples and a weight equal to its sample count; the means are
    the only feature-space information the server holds.
    """
    vectors, labels, weights = [], [], []
    for i, upload in enumerate(ordered):
        start = offsets[i]
        slice_labels = global_labels[start : start + upload.graph.n]
        for cluster in range(upload.prototypes.count):
            members = slice_labels[upload.local_labels == cluster]
            if len(members) == 0:
                continue
            majority = int(np.bincount(members).argmax())
            vectors.append(upload.prototypes.prototypes[cluster].mean)
            labels.append(majority)
            weights.append(len(members))
    space = ordered[0].prototypes.space
    return compute_global_prototypes(
        np.vstack(vectors),
        np.asarray(labels),
        weights=np.asarray(weights, dtype=np.float64),
        client_id=-1,
        space=space,
    )


def _roundtrip(msg):
    """Push a message through the serialized boundary."""
    from .wire import decode_message, encode_message

    return decode_message(encode_message(msg))


def run_one_shot(datasets, cfg, psg_off=False, gsg_off=False, size_collector=None):
    """Single-round protocol: every client uploads once, server aggregates.

    ``size_collector``, when given, receives one message-size report per
    upload.
    """
    if len(datasets) != cfg.num_clients:
        raise ConfigError(
            f"{len(datasets)} datasets for {cfg.num_clients} configured clients"
        )
    one_shot_cfg = replace(cfg, embedder=EmbedderConfig(kind="identity", latent_dim=1))
    uploads = []
    for cid, data in enumerate(datasets):
        msg = client_round(data, one_shot_cfg, cid, psg_off=psg_off)
        if size_collector is not None:
            size_collector.append(message_size_report(msg))
        uploads.append(_roundtrip(msg))
    result, _ = server_round(uploads, cfg, gsg_off=gsg_off)
    return result


def run_iterative(
    datasets, cfg, true_labels=None, psg_off=False, gsg_off=False, size_collector=None
):
    """Iterative protocol: a one-shot initialization round, then ``rounds``
    rounds of embedder training against the global prototype feedback.

    Returns (final result, per-round metric trace); the trace holds ACC/NMI
    when per-client ground-truth labels are supplied.
    """
    from .metrics import hungarian_accuracy, nmi

    if len(datasets) != cfg.num_clients:
        raise ConfigError(
            f"{len(datasets)} datasets for {cfg.num_clients} configured clients"
        )
    truth = np.concatenate(true_labels) if true_labels is not None else None

    def record(trace, result, round_index):
        entry = {"round": round_index}
        if truth is not None:
            entry["acc"] = hungarian_accuracy(truth, result.assignments.labels)
            entry["nmi"] = nmi(truth, result.assignments.labels)
        trace.append(entry)

    def upload(data, round_cfg, cid, fb, t):
        msg = client_round(
            data, round_cfg, cid, feedback=fb, round_index=t, psg_off=psg_off
        )
        if size_collector is not None:
            size_collector.append(message_size_report(msg))
        return _roundtrip(msg)

    one_shot_cfg = replace(cfg, embedder=EmbedderConfig(kind="identity", latent_dim=1))
    uploads = [
        upload(data, one_shot_cfg, cid, None, 0) for cid, data in enumerate(datasets)
    ]
    result, feedback = server_round(uploads, cfg, gsg_off=gsg_off)
    trace = []
    record(trace, result, 0)

    for t in range(1, cfg.rounds + 1):
        uploads = [
            upload(data, cfg, cid, feedback[cid], t) for cid, data in enumerate(datasets)
        ]
        result, feedback = server_round(uploads, cfg, gsg_off=gsg_off)
        record(trace, result, t)
    return result, trace


def baseline_federated_kmeans(datasets, cfg):
    """Centroid-pooling baseline: local k-means, server k-means on centroids.

    Clients upload only their centroids; the server clusters the pooled
    centroids and clients label their own samples by the nearest global
    center.
    """
    if len(datasets) != cfg.num_clients:
        raise ConfigError(
            f"{len(datasets)} datasets for {cfg.num_clients} configured clients"
        )
    c = cfg.clusters
    pooled = []
    for cid, data in enumerate(datasets):
        x = as_points(data)
        _, centers, _ = kmeans(x, min(c, len(x)), seed=client_seed(cfg.seed, cid))
        pooled.append(centers)
    pooled = np.vstack(pooled)
    server_seed = (cfg.seed ^ SERVER_SEED_SALT) & 0x7FFFFFFF
    _, global_centers, _ = kmeans(pooled, c, seed=server_seed)

    labels_parts, client_ids, local_indices = [], [], []
    from scipy.spatial.distance import cdist

    for cid, data in enumerate(datasets):
        x = as_points(data)
        labels_parts.append(cdist(x, global_centers, "sqeuclidean").argmin(axis=1))
        client_ids.append(np.full(len(x), cid, dtype=np.int64))
        local_indices.append(np.arange(len(x), dtype=np.int64))
    labels = np.concatenate(labels_parts).astype(np.int64)
    fractions = np.bincount(labels, minlength=c) / len(labels)
    protos = PrototypeSet(
        client_id=-1,
        prototypes=[
            Prototype(
                mean=global_centers[j],
                covariance=1e-6 * np.eye(global_centers.shape[1]),
                weight=float(fractions[j]),
            )
            for j in range(c)
        ],
    )
    assignment = ClusterAssignment(
        labels=labels,
        client_ids=np.concatenate(client_ids),
        local_indices=np.concatenate(local_indices),
    )
    return GlobalResult(
        similarity=None,
        embedding=None,
        assignments=assignment,
        global_prototypes=protos,
        diagnostics=None,
    )


def message_size_report(msg):
    """Nonzero count, encoded size, and the sparse-communication bound."""
    from .wire import encode_message

    graph_nnz = int(msg.graph.weights.nnz)
    c = msg.prototypes.count
    d = msg.prototypes.dim
    nonzeros = graph_nnz + c * (d + d * d)
    bound = msg.graph.n * msg.graph.row_capacity + c * (d + d * d)
    if nonzeros > bound:
        raise InvalidInputError(
            f"message nonzeros {nonzeros} exceed the sparsity bound {bound}"
        )
    return {
        "nonzeros": nonzeros,
        "bytes": len(encode_message(msg)),
        "bound": bound,
    }


def serialize_result(result):
    """Canonical bytes for a GlobalResult, for determinism checks."""
    parts = [np.ascontiguousarray(result.assignments.labels, dtype="<i8").tobytes()]
    if result.similarity is not None:
        csr = result.similarity.weights.tocsr()
        csr.sort_indices()
        parts.append(np.ascontiguousarray(csr.indptr, dtype="<i8").tobytes())
        parts.append(np.ascontiguousarray(csr.indices, dtype="<i8").tobytes())
        parts.append(np.ascontiguousarray(csr.data, dtype="<f8").tobytes())
    if result.embedding is not None:
        parts.append(np.ascontiguousarray(result.embedding.matrix, dtype="<f8").tobytes())
    if result.global_prototypes is not None:
        for p in result.global_prototypes.prototypes:
            parts.append(np.ascontiguousarray(p.mean, dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(p.covariance, dtype="<f8").tobytes())
            parts.append(np.float64(p.weight).tobytes())
    return b"".join(parts)
