"""Adaptive-neighbor structural graph learning under a Laplacian rank constraint.

A structural graph is a row-stochastic, k-sparse affinity matrix over samples.
Forcing its Laplacian to have exactly ``n - c`` nonzero eigenvalues makes the
graph decompose into exactly ``c`` connected components, which is the clustering
read off at the end.  The solver alternates between a spectral embedding step
(eigenvectors of the current Laplacian) and closed-form row updates on the
probability simplex, adapting the rank-penalty weight until the component count
matches the target.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sparse
import scipy.sparse.csgraph as csgraph
import scipy.sparse.linalg as sparse_linalg
from scipy.spatial.distance import cdist

from .errors import InvalidInputError, NumericError

# Dense symmetric eigendecomposition below this size; sparse shift-invert above.
DENSE_EIG_MAX_N = 1000
# An entry below this weight does not count as an edge.
EDGE_TOL = 1e-12
# Relative threshold under which a Laplacian eigenvalue counts as zero.
ZERO_EIG_REL_TOL = 1e-8
# Frobenius-change threshold for declaring the alternation converged.
GRAPH_CHANGE_TOL = 1e-6


@dataclass
class StructuralGraph:
    """Row-stochastic k-sparse affinity matrix.

    ``weights`` is an n-by-n CSR matrix; each row is a point on the probability
    simplex, has no self-loop, and carries at most ``row_capacity`` nonzeros.
    """

    weights: sparse.csr_matrix
    row_capacity: int

    @property
    def n(self):
        return self.weights.shape[0]

    def row_neighbors(self, i):
        """Return (column indices, weights) of row ``i``."""
        start, stop = self.weights.indptr[i], self.weights.indptr[i + 1]
        return self.weights.indices[start:stop], self.weights.data[start:stop]

    def validate(self, atol=1e-9):
        w = self.weights
        if not np.all(np.isfinite(w.data)):
            raise InvalidInputError("graph weights contain non-finite entries")
        if w.data.size and (w.data.min() < -atol or w.data.max() > 1 + atol):
            raise InvalidInputError("graph weights outside [0, 1]")
        row_sums = np.asarray(w.sum(axis=1)).ravel()
        if not np.allclose(row_sums, 1.0, atol=atol):
            raise InvalidInputError("graph rows must sum to 1")
        if np.abs(w.diagonal()).max(initial=0.0) > EDGE_TOL:
            raise InvalidInputError("graph has self-loop entries")
        per_row = np.diff(w.indptr)
        if per_row.max(initial=0) > self.row_capacity:
            raise InvalidInputError(
                f"row has {per_row.max()} entries, capacity {self.row_capacity}"
            )

    def to_dense(self):
        return self.weights.toarray()


@dataclass
class SpectralEmbedding:
    """Eigenvectors of a graph Laplacian, columns orthonormal."""

    matrix: np.ndarray

    @property
    def n(self):
        return self.matrix.shape[0]

    @property
    def c(self):
        return self.matrix.shape[1]

    def validate(self, atol=1e-6):
        gram = self.matrix.T @ self.matrix
        if not np.allclose(gram, np.eye(self.c), atol=atol):
            raise InvalidInputError("embedding columns are not orthonormal")


@dataclass
class RankDiagnostics:
    """State of the rank constraint after an eigen step.

    ``eigenvalues`` holds the c+1 smallest Laplacian eigenvalues ascending;
    ``zero_count`` is how many fall below the scale-relative zero tolerance;
    ``lam`` is the rank-penalty weight in force.  ``objective_trace`` records,
    per alternation, the objective before the eigen step, after it, and after
    the row update, all evaluated with that alternation's fixed weights.
    """

    eigenvalues: np.ndarray
    zero_count: int
    lam: float
    converged: bool = True
    n_iter: int = 0
    objective_trace: list = field(default_factory=list)


@dataclass
class ClusterAssignment:
    """Integer cluster labels with optional per-sample provenance."""

    labels: np.ndarray
    client_ids: np.ndarray | None = None
    local_indices: np.ndarray | None = None

    def __len__(self):
        return len(self.labels)


def as_points(data):
    """Validate and return a 2-D float array of sample vectors."""
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidInputError(f"points must be 2-D, got shape {x.shape}")
    if x.shape[0] < 2 or x.shape[1] < 1:
        raise InvalidInputError(f"need at least 2 samples and 1 feature, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("points contain non-finite entries")
    return x


def pairwise_sq_dists(points):
    """Squared Euclidean distances; symmetric with a zero diagonal."""
    x = as_points(points)
    d = cdist(x, x, "sqeuclidean")
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    np.maximum(d, 0.0, out=d)
    return d


def graph_laplacian(g):
    """Laplacian ``L = D - (E + E^T)/2`` of the symmetrized graph (sparse)."""
    w = 0.5 * (g.weights + g.weights.T)
    degrees = np.asarray(w.sum(axis=1)).ravel()
    return (sparse.diags(degrees) - w).tocsr()


def zero_eig_tolerance(eigenvalues):
    """Scale-relative threshold under which an eigenvalue counts as zero."""
    scale = max(abs(float(eigenvalues[-1])), 1e-6)
    return ZERO_EIG_REL_TOL * scale


def c_smallest_eigvecs(laplacian, c, lam=0.0):
    """Embedding from the ``c`` smallest eigenpairs, plus rank diagnostics.

    Reports the c+1 smallest eigenvalues so the caller can see whether the
    rank constraint is met (c zeros) and how close the next eigenvalue is.

    The Laplacian is decomposed along its connected components first: the
    nullspace is then known exactly (normalized component indicators), and
    each per-component solve has a simple zero eigenvalue.  A single Lanczos
    run on the whole matrix cannot reliably resolve a degenerate zero
    cluster, which silently miscounts the rank.
    """
    n = laplacian.shape[0]
    if not 1 <= c < n:
        raise InvalidInputError(f"need 1 <= c < n, got c={c}, n={n}")
    lap = laplacian.tocsr() if sparse.issparse(laplacian) else sparse.csr_matrix(laplacian)

    coo = lap.tocoo()
    off = (coo.row != coo.col) & (np.abs(coo.data) > EDGE_TOL)
    support = sparse.csr_matrix(
        (np.ones(off.sum()), (coo.row[off], coo.col[off])), shape=lap.shape
    )
    m, labels = csgraph.connected_components(support, directed=False)

    need_pos = max(0, c + 1 - m)
    comp_indices = [np.nonzero(labels == j)[0] for j in range(m)]

    vecs = np.zeros((n, c))
    vals = []
    col = 0
    for j in range(min(m, c)):
        idx = comp_indices[j]
        vecs[idx, col] = 1.0 / np.sqrt(len(idx))
        col += 1
    vals.extend([0.0] * min(m, c + 1))

    if need_pos:
        positives = []  # (eigenvalue, component, local eigenvector)
        for j, idx in enumerate(comp_indices):
            size = len(idx)
            want = min(size - 1, need_pos)
            if want < 1:
                continue
            sub = lap[idx][:, idx]
            sub_vals, sub_vecs = _connected_smallest_eigs(sub, want + 1)
            for t in range(1, want + 1):
                positives.append((float(sub_vals[t]), j, sub_vecs[:, t]))
        positives.sort(key=lambda item: (item[0], item[1]))
        for value, j, local in positives[:need_pos]:
            vals.append(value)
            if col < c:
                vecs[comp_indices[j], col] = local
                col += 1

    vals = np.array(sorted(vals)[: c + 1])
    if len(vals) < c + 1:
        raise NumericError(
            f"could only recover {len(vals)} of {c + 1} requested eigenvalues"
        )
    tol = zero_eig_tolerance(vals)
    zero_count = int(np.sum(vals < tol))
    embedding = SpectralEmbedding(matrix=np.ascontiguousarray(vecs))
    diag = RankDiagnostics(eigenvalues=vals.copy(), zero_count=zero_count, lam=lam)
    return embedding, diag


def _connected_smallest_eigs(lap, k, restarts=5):
    """Smallest eigenpairs of a connected component's Laplacian.

    Dense below the size threshold; above it, shift-invert Lanczos, which is
    dependable here because the zero eigenvalue is simple.
    """
    n = lap.shape[0]
    k = min(k, n)
    if n <= DENSE_EIG_MAX_N or k >= n - 1:
        dense = lap.toarray()
        if not np.allclose(dense, dense.T, atol=1e-8):
            raise InvalidInputError("laplacian is not symmetric")
        vals, vecs = scipy.linalg.eigh(dense, subset_by_index=[0, k - 1])
        return vals, vecs
    v0 = np.full(n, 1.0 / np.sqrt(n))
    sigma = -1e-3
    last_err = None
    for _ in range(restarts):
        try:
            vals, vecs = sparse_linalg.eigsh(
                lap.tocsc(), k=k, sigma=sigma, which="LM", v0=v0, tol=1e-10
            )
            order = np.argsort(vals)
            return vals[order], vecs[:, order]
        except (sparse_linalg.ArpackNoConvergence, RuntimeError) as err:
            last_err = err
            sigma *= 4.0  # move the shift away from the spectrum and retry
    raise NumericError(
        f"sparse eigensolver failed after {restarts} restarts (n={n}, k={k}): {last_err}"
    )


def estimate_gamma(sorted_row_dists, k):
    """Per-row simplex regularization weights and their mean.

    For a row whose neighbor distances (self excluded, ascending) are
    ``d_1 <= d_2 <= ...``, the weight that makes the closed-form row solution
    have exactly ``k`` nonzeros is ``(k/2) d_{k+1} - (1/2) sum_{j<=k} d_j``.
    """
    d = np.asarray(sorted_row_dists, dtype=np.float64)
    single = d.ndim == 1
    d = np.atleast_2d(d)
    if d.shape[1] < k + 1:
        raise InvalidInputError(
            f"need at least k+1={k + 1} neighbor distances per row, got {d.shape[1]}"
        )
    head = d[:, : k + 1]
    if np.any(np.diff(head, axis=1) < -1e-12):
        raise InvalidInputError("row distances must be sorted ascending")
    gamma_i = 0.5 * (k * head[:, k] - head[:, :k].sum(axis=1))
    mean = float(gamma_i.mean())
    return (gamma_i[0] if single else gamma_i), mean


def knn_row_solve(row_dists, k):
    """Closed-form simplex row given candidate distances (self excluded).

    The ``k`` nearest candidates get weight ``(d_{k+1} - d_j) / denom`` with
    ``denom = k d_{k+1} - sum_{h<=k} d_h``; everything else is zero.  Ties are
    broken by ascending candidate index; a vanishing denominator (the k+1
    nearest all equal) falls back to uniform ``1/k`` weights.
    """
    d = np.asarray(row_dists, dtype=np.float64)
    if d.ndim != 1:
        raise InvalidInputError("row_dists must be 1-D")
    if d.size < k + 1:
        raise InvalidInputError(f"need at least k+1={k + 1} candidates, got {d.size}")
    order = np.argsort(d, kind="stable")
    d_sorted = d[order]
    d_next = d_sorted[k]
    denom = k * d_next - d_sorted[:k].sum()
    w = np.zeros_like(d)
    if denom > EDGE_TOL:
        w[order[:k]] = (d_next - d_sorted[:k]) / denom
    else:
        w[order[:k]] = 1.0 / k
    return w


def _solve_all_rows(dists, k):
    """Vectorized closed-form update of every row; self-distances masked.

    Returns the CSR graph and the per-row gamma implied by the chosen support
    (``denom / 2``), used for objective tracking.
    """
    n = dists.shape[0]
    d = dists.copy()
    np.fill_diagonal(d, np.inf)
    order = np.argsort(d, axis=1, kind="stable")
    d_sorted = np.take_along_axis(d, order[:, : k + 1], axis=1)
    d_next = d_sorted[:, k]
    top = d_sorted[:, :k]
    denom = k * d_next - top.sum(axis=1)
    gamma_i = 0.5 * denom
    ok = denom > EDGE_TOL
    weights = np.where(
        ok[:, None], (d_next[:, None] - top) / np.where(ok, denom, 1.0)[:, None], 1.0 / k
    )
    rows = np.repeat(np.arange(n), k)
    graph = sparse.csr_matrix(
        (weights.ravel(), (rows, order[:, :k].ravel())), shape=(n, n)
    )
    graph.sort_indices()
    return StructuralGraph(weights=graph, row_capacity=k), gamma_i


def simplex_project(v):
    """Euclidean projection onto the probability simplex (sort-threshold)."""
    x = np.asarray(v, dtype=np.float64).ravel()
    if x.size == 0:
        raise InvalidInputError("cannot project an empty vector")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("vector contains non-finite entries")
    u = np.sort(x)[::-1]
    css = np.cumsum(u)
    j = np.arange(1, x.size + 1)
    rho = np.nonzero(u + (1.0 - css) / j > 0)[0][-1]
    theta = (css[rho] - 1.0) / (rho + 1)
    return np.maximum(x - theta, 0.0)


def batch_simplex_project(values, valid):
    """Row-wise simplex projection with a per-row support mask.

    Invalid positions take no mass; each row must have at least one valid
    entry.  Vectorized equivalent of calling ``simplex_project`` on each
    row's valid subvector.
    """
    v = np.where(valid, values, -np.inf)
    u = -np.sort(-v, axis=1)
    counts = valid.sum(axis=1)
    if np.any(counts == 0):
        raise InvalidInputError("every row needs at least one candidate")
    safe = np.where(np.isfinite(u), u, 0.0)
    css = np.cumsum(safe, axis=1)
    j = np.arange(1, v.shape[1] + 1)[None, :]
    cond = np.isfinite(u) & (u + (1.0 - css) / j > 0)
    rho = v.shape[1] - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = (css[np.arange(v.shape[0]), rho] - 1.0) / (rho + 1)
    out = np.maximum(v - theta[:, None], 0.0)
    out[~valid] = 0.0
    return out


def connected_components(g, tol=EDGE_TOL):
    """Components of the symmetrized support graph (edge if weight > tol)."""
    w = g.weights.tocoo()
    mask = np.abs(w.data) > tol
    support = sparse.csr_matrix(
        (np.ones(mask.sum()), (w.row[mask], w.col[mask])), shape=w.shape
    )
    count, labels = csgraph.connected_components(support, directed=False)
    return ClusterAssignment(labels=labels.astype(np.int64)), int(count)


def _graph_objective(graph, d_x, d_f, lam, gamma_i):
    """Alternation objective: linear distance terms plus the row penalty."""
    e = graph.weights.tocoo()
    linear = float(np.sum(e.data * (d_x[e.row, e.col] + lam * d_f[e.row, e.col])))
    quad = float(np.sum(gamma_i[e.row] * e.data**2))
    return linear + quad


def default_neighbor_count(n, c):
    """Sparsity default: generous but bounded support per cluster."""
    return max(3, min(10, n // max(c, 1) - 1))


def learn_private_graph(points, c, k=None, max_iter=30):
    """Learn a k-sparse row-stochastic graph with exactly ``c`` components.

    Alternates the spectral embedding step with closed-form row updates on
    ``d_x + lam * d_f`` where ``d_f`` are squared embedding distances.  The
    rank-penalty weight starts at the mean row regularization and doubles
    (halves) while the graph has too few (too many) zero eigenvalues.
    Non-convergence is reported through the diagnostics flag, not an error.
    """
    x = as_points(points)
    n = x.shape[0]
    if not 1 <= c < n:
        raise InvalidInputError(f"need 1 <= c < n, got c={c}, n={n}")
    if k is None:
        k = default_neighbor_count(n, c)
    if k + 1 >= n:
        raise InvalidInputError(f"need k+1 < n, got k={k}, n={n}")

    d_x = pairwise_sq_dists(x)
    graph, gamma_i = _solve_all_rows(d_x, k)
    lam = max(float(gamma_i.mean()), EDGE_TOL)

    embedding = None
    prev_dense = None
    prev_embedding = None
    trace = []
    diag = None
    best = None  # (rank-constraint miss, graph, embedding, diagnostics)
    lam_lo = lam_hi = None  # bracket: largest too-small / smallest too-big lam
    d_f = np.zeros_like(d_x)
    for it in range(max_iter):
        lap = graph_laplacian(graph)
        embedding, diag = c_smallest_eigvecs(lap, c, lam=lam)
        dense = graph.to_dense()
        miss = abs(diag.zero_count - c)
        if best is None or miss <= best[0]:
            best = (miss, graph, embedding, diag)
        if (
            diag.zero_count == c
            and prev_dense is not None
            and np.linalg.norm(dense - prev_dense) < GRAPH_CHANGE_TOL
        ):
            diag.converged = True
            diag.n_iter = it
            best = (0, graph, embedding, diag)
            break
        # Double (halve) while unbracketed; geometric bisection once the
        # exact-c window is bracketed, since one factor of 2 can jump it.
        if diag.zero_count < c:
            lam_lo = lam
            lam = lam * 2.0 if lam_hi is None else np.sqrt(lam_lo * lam_hi)
        elif diag.zero_count > c:
            lam_hi = lam
            lam = lam / 2.0 if lam_lo is None else np.sqrt(lam_lo * lam_hi)

        d_f_new = pairwise_sq_dists(embedding.matrix)
        combined = d_x + lam * d_f_new
        new_graph, gamma_i = _solve_all_rows(combined, k)
        # Objective with this alternation's fixed weights: before the eigen
        # step (previous embedding), after it, and after the row update.
        j_after_f = _graph_objective(graph, d_x, d_f_new, lam, gamma_i)
        j_after_rows = _graph_objective(new_graph, d_x, d_f_new, lam, gamma_i)
        if prev_embedding is not None:
            j_before = _graph_objective(graph, d_x, d_f, lam, gamma_i)
            trace.append((j_before, j_after_f, j_after_rows))
        else:
            trace.append((j_after_f, j_after_f, j_after_rows))
        prev_dense = dense
        prev_embedding = embedding
        d_f = d_f_new
        graph = new_graph
    else:
        diag = best[3]
        diag.converged = False
        diag.n_iter = max_iter

    _, graph, embedding, diag = best
    diag.lam = lam
    diag.objective_trace = trace
    graph.validate()
    return graph, embedding, diag
