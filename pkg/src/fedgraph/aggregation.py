"""Server-side fusion: global graph assembly, rank refinement, cluster extraction.

The server sees only the clients' structural graphs, prototypes, and local
cluster labels.  It builds a block matrix with the private graphs on the
diagonal and prototype-affinity blocks off the diagonal, then refines it
toward the nearest row-stochastic matrix whose Laplacian has exactly the
target number of zero eigenvalues.
"""

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as sparse_linalg

from .errors import InvalidInputError, NumericError
from .graph import (
    ClusterAssignment,
    EDGE_TOL,
    GRAPH_CHANGE_TOL,
    RankDiagnostics,
    SpectralEmbedding,
    StructuralGraph,
    batch_simplex_project,
    c_smallest_eigvecs,
    connected_components,
    graph_laplacian,
)
from .kmeans import kmeans
from .prototypes import Prototype, PrototypeSet



@dataclass
class GlobalGraph:
    """Assembled cross-client affinity matrix.

    ``assembled`` is the raw block placement (diagonal blocks bit-equal to
    the uploaded private graphs), ``symmetric`` its symmetrization, and
    ``graph`` the final row-renormalized structural graph used downstream.
    """

    total_n: int
    client_offsets: list
    graph: StructuralGraph
    block_index: dict
    assembled: sparse.csr_matrix
    symmetric: sparse.csr_matrix


@dataclass
class GlobalResult:
    """Outcome of one server aggregation round."""

    similarity: StructuralGraph | None
    embedding: SpectralEmbedding | None
    assignments: ClusterAssignment
    global_prototypes: PrototypeSet | None
    diagnostics: RankDiagnostics | None = None


def gaussian_kl(p, q):
    """KL divergence between two Gaussian prototypes, closed form."""
    d = p.dim
    if q.dim != d:
        raise InvalidInputError("prototype dimensions differ")
    try:
        chol = np.linalg.cholesky(q.covariance)
    except np.linalg.LinAlgError as err:
        raise NumericError(f"covariance of prototype q is singular: {err}") from err
    solved = np.linalg.solve(chol, np.linalg.solve(chol, p.covariance).T)
    trace_term = np.trace(solved)
    diff = q.mean - p.mean
    y = np.linalg.solve(chol, diff)
    maha = float(y @ y)
    logdet_q = 2.0 * np.sum(np.log(np.diag(chol)))
    sign, logdet_p = np.linalg.slogdet(p.covariance)
    if sign <= 0:
        raise NumericError("covariance of prototype p is not positive definite")
    kl = 0.5 * (trace_term + maha - d + logdet_q - logdet_p)
    return float(max(kl, 0.0))


def symmetric_kl(p, q):
    """Jeffreys divergence: the symmetrized KL used for affinity blocks."""
    return 0.5 * (gaussian_kl(p, q) + gaussian_kl(q, p))


def inter_client_block(protos_i, assign_i, protos_j, assign_j):
    """Sample-level affinity block between two clients.

    Entry (m, n) is exp(-KL_sym) between the prototype of m's local cluster
    and that of n's; the block is constant on cluster-by-cluster rectangles
    and never touches raw sample features.
    """
    li = np.asarray(assign_i.labels if isinstance(assign_i, ClusterAssignment) else assign_i)
    lj = np.asarray(assign_j.labels if isinstance(assign_j, ClusterAssignment) else assign_j)
    if li.max(initial=0) >= protos_i.count or lj.max(initial=0) >= protos_j.count:
        raise InvalidInputError("assignment labels exceed prototype count")
    kernel = np.empty((protos_i.count, protos_j.count))
    for a, pa in enumerate(protos_i.prototypes):
        for b, pb in enumerate(protos_j.prototypes):
            kernel[a, b] = np.exp(-symmetric_kl(pa, pb))
    return kernel[li][:, lj]


def _top_k_rows(block, k):
    """Keep the k largest entries per row, rotating the tie-break per row.

    Affinity blocks are constant on cluster rectangles, so whole runs of
    columns tie exactly; breaking ties at a row-dependent rotation spreads
    the kept entries across the target cluster instead of funnelling every
    row onto the same few columns.
    """
    n_rows, n_cols = block.shape
    if k >= n_cols:
        return block.copy()
    shift = (np.arange(n_rows) * k) % n_cols
    cols = (np.arange(n_cols)[None, :] + shift[:, None]) % n_cols
    shifted = np.take_along_axis(block, cols, axis=1)
    order = np.argsort(-shifted, axis=1, kind="stable")[:, :k]
    kept = (order + shift[:, None]) % n_cols
    out = np.zeros_like(block)
    np.put_along_axis(out, kept, np.take_along_axis(block, kept, axis=1), axis=1)
    return out


def assemble_global(private_graphs, blocks, beta=1.0, inter_block_k=5):
    """Assemble the global matrix from private graphs and affinity blocks.

    ``blocks[(i, j)]`` is the dense block for client pair (i, j); missing
    transposes are filled from their counterpart.  Off-diagonal blocks are
    scaled by ``beta`` and sparsified to ``inter_block_k`` entries per row
    per block, then the whole matrix is symmetrized and finally
    row-renormalized.  Sparsification applies at every scale: a dense block
    would dominate every row's mass after renormalization and erase the
    private structure.
    """
    m = len(private_graphs)
    sizes = [g.n for g in private_graphs]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    total_n = int(offsets[-1])

    parts = [[None] * m for _ in range(m)]
    block_index = {}
    for i in range(m):
        parts[i][i] = private_graphs[i].weights
        block_index[(i, i)] = (offsets[i], offsets[i])
    if beta != 0.0:
        for i in range(m):
            for j in range(m):
                if i == j:
                    continue
                blk = blocks.get((i, j))
                if blk is None:
                    other = blocks.get((j, i))
                    if other is None:
                        raise InvalidInputError(f"missing block for clients ({i}, {j})")
                    blk = other.T
                blk = np.asarray(blk, dtype=np.float64)
                if blk.shape != (sizes[i], sizes[j]):
                    raise InvalidInputError(
                        f"block ({i}, {j}) has shape {blk.shape}, expected "
                        f"{(sizes[i], sizes[j])}"
                    )
                blk = _top_k_rows(blk, inter_block_k)
                parts[i][j] = sparse.csr_matrix(beta * blk)
                block_index[(i, j)] = (offsets[i], offsets[j])

    assembled = sparse.bmat(parts, format="csr")
    symmetric = (0.5 * (assembled + assembled.T)).tocsr()
    row_sums = np.asarray(symmetric.sum(axis=1)).ravel()
    if np.any(row_sums <= 0):
        raise InvalidInputError("assembled matrix has an empty row")
    normalized = sparse.diags(1.0 / row_sums) @ symmetric
    capacity = max(
        int(np.diff(normalized.tocsr().indptr).max()),
        max(g.row_capacity for g in private_graphs),
    )
    graph = StructuralGraph(weights=normalized.tocsr(), row_capacity=capacity)
    graph.validate()
    return GlobalGraph(
        total_n=total_n,
        client_offsets=offsets[:-1].tolist(),
        graph=graph,
        block_index=block_index,
        assembled=assembled,
        symmetric=symmetric,
    )


def _support_sets(reference, current):
    """Per-row union of reference and current supports, as padded arrays."""
    union = (abs(reference) + abs(current)).tocsr()
    union.eliminate_zeros()
    union.sort_indices()
    counts = np.diff(union.indptr)
    width = int(counts.max())
    n = union.shape[0]
    cols = np.zeros((n, width), dtype=np.int64)
    valid = np.zeros((n, width), dtype=bool)
    for i in range(n):
        row = union.indices[union.indptr[i] : union.indptr[i + 1]]
        cols[i, : len(row)] = row
        valid[i, : len(row)] = True
    return cols, valid


def _padded_values(matrix, rows_idx, cols, valid):
    """Gather a sparse matrix's entries onto the padded support layout.

    Only correct when the matrix's support is inside the padded one.
    """
    rows_b = np.broadcast_to(rows_idx, cols.shape)
    vals = np.asarray(matrix[rows_b.ravel(), cols.ravel()]).reshape(cols.shape)
    return np.where(valid, vals, 0.0)


def _refine_objective(s_vals, e_vals, d_f, valid, lam):
    """||S - E*||_F^2 + lam * sum_ij d^f_ij S_ij on the padded support."""
    frob = float(np.sum(((s_vals - e_vals) * valid) ** 2))
    return frob + lam * float(np.sum(s_vals * d_f * valid))


def refine_global(global_graph, c, max_iter=30):
    """Refine the assembled graph to exactly ``c`` components.

    Alternates the spectral step with per-row simplex projections of
    ``E*_i - (lam/2) d^f_i`` restricted to the union of the assembled
    support and the row's current support; ``lam`` doubles or halves until
    exactly ``c`` Laplacian eigenvalues vanish.  Non-convergence flags the
    diagnostics instead of raising.
    """
    e_star = global_graph.graph.weights.tocsr()
    n = e_star.shape[0]
    if not 1 <= c < n:
        raise InvalidInputError(f"need 1 <= c < n, got c={c}, n={n}")
    s = StructuralGraph(weights=e_star.copy(), row_capacity=global_graph.graph.row_capacity)

    # Row updates only ever remove support, so component counts above c can
    # never come back down: flag and return instead of burning iterations.
    _, support_comps = connected_components(s)
    if support_comps > c:
        lap = graph_laplacian(s)
        embedding, diag = c_smallest_eigvecs(lap, c)
        diag.converged = False
        diag.n_iter = 0
        warnings.warn(
            f"assembled graph has {support_comps} components, above the "
            f"target {c}; refinement cannot merge them"
        )
        return s, embedding, diag

    lam = None
    lam_lo = lam_hi = None
    prev_s = None
    prev_f = None
    trace = []
    diag = None
    embedding = None
    best = None
    for it in range(max_iter):
        lap = graph_laplacian(s)
        embedding, diag = c_smallest_eigvecs(lap, c, lam=lam or 0.0)
        f = embedding.matrix

        miss = abs(diag.zero_count - c)
        if best is None or miss <= best[0]:
            best = (miss, s, embedding, diag)
        change = (
            float(sparse_linalg.norm(s.weights - prev_s)) if prev_s is not None else np.inf
        )
        if diag.zero_count == c and change < GRAPH_CHANGE_TOL:
            diag.converged = True
            diag.n_iter = it
            best = (0, s, embedding, diag)
            break

        cols, valid = _support_sets(e_star, s.weights)
        rows_idx = np.arange(n)[:, None]
        d_f = np.where(valid, np.sum((f[rows_idx] - f[cols]) ** 2, axis=2), 0.0)

        if lam is None:
            mean_e = e_star.data.mean() if e_star.nnz else 1.0
            mean_df = max(float(d_f[valid].mean()), EDGE_TOL)
            lam = max(mean_e / mean_df, EDGE_TOL)
        elif diag.zero_count < c:
            lam_lo = lam
            lam = lam * 2.0 if lam_hi is None else float(np.sqrt(lam_lo * lam_hi))
        elif diag.zero_count > c:
            lam_hi = lam
            lam = lam / 2.0 if lam_lo is None else float(np.sqrt(lam_lo * lam_hi))

        e_vals = _padded_values(e_star, rows_idx, cols, valid)
        target = e_vals - 0.5 * lam * d_f
        new_rows = batch_simplex_project(target, valid)

        mask = new_rows > EDGE_TOL
        data = new_rows[mask]
        col_idx = cols[mask]
        row_idx = np.broadcast_to(rows_idx, cols.shape)[mask]
        new_weights = sparse.csr_matrix((data, (row_idx, col_idx)), shape=(n, n))
        # renormalize away the dropped sub-tolerance mass
        sums = np.asarray(new_weights.sum(axis=1)).ravel()
        new_weights = sparse.diags(1.0 / np.maximum(sums, EDGE_TOL)) @ new_weights
        new_s = StructuralGraph(weights=new_weights.tocsr(), row_capacity=s.row_capacity)

        # Objective under this alternation's fixed lam: before the eigen
        # step (previous embedding), after it, then after the row update.
        s_vals = _padded_values(s.weights, rows_idx, cols, valid)
        new_vals = np.where(valid, new_rows, 0.0)
        j_after_f = _refine_objective(s_vals, e_vals, d_f, valid, lam)
        j_after_rows = _refine_objective(new_vals, e_vals, d_f, valid, lam)
        if prev_f is not None:
            d_f_prev = np.where(
                valid, np.sum((prev_f[rows_idx] - prev_f[cols]) ** 2, axis=2), 0.0
            )
            j_before = _refine_objective(s_vals, e_vals, d_f_prev, valid, lam)
            trace.append((j_before, j_after_f, j_after_rows))
        else:
            trace.append((j_after_f, j_after_f, j_after_rows))

        prev_s = s.weights
        prev_f = f
        s = new_s
    else:
        diag = best[3]
        diag.converged = False
        diag.n_iter = max_iter

    _, s, embedding, diag = best
    diag.lam = lam if lam is not None else 0.0
    diag.objective_trace = trace
    s.validate()
    return s, embedding, diag


def extract_global_clusters(s, f, c, seed):
    """Cluster labels: component read-off when exact, else k-means on F."""
    assign, count = connected_components(s)
    if count == c:
        return assign
    labels, _, _ = kmeans(f.matrix, c, seed=seed, n_init=10)
    return ClusterAssignment(labels=labels.astype(np.int64))


def compute_global_prototypes(vectors, assignments, weights=None, client_id=-1, space="input"):
    """Gaussian summaries of clusters over the given vectors.

    ``weights`` (e.g. per-vector sample counts) bias both the means and the
    covariances; empty clusters are dropped with a warning, shrinking the
    effective cluster count in the feedback.
    """
    x = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(
        assignments.labels if isinstance(assignments, ClusterAssignment) else assignments
    )
    if len(labels) != len(x):
        raise InvalidInputError("assignment length must match vector count")
    w = np.ones(len(x)) if weights is None else np.asarray(weights, dtype=np.float64)
    d = x.shape[1]
    protos = []
    total_w = w.sum()
    for cluster in range(labels.max() + 1):
        members = labels == cluster
        if not np.any(members):
            warnings.warn(
                f"global cluster {cluster} is empty; merged away in feedback"
            )
            continue
        wm = w[members]
        xm = x[members]
        mean = np.average(xm, axis=0, weights=wm)
        diff = xm - mean
        cov = (wm[:, None] * diff).T @ diff / wm.sum() + 1e-6 * np.eye(d)
        protos.append(
            Prototype(mean=mean, covariance=cov, weight=float(wm.sum() / total_w))
        )
    return PrototypeSet(client_id=client_id, prototypes=protos, space=space)
