"""Per-client Gaussian prototype extraction and differentially private release.

A prototype summarizes one local cluster as a Gaussian (mean, covariance,
weight).  Release under epsilon-DP adds elementwise Laplace noise calibrated
to worst-case sensitivities that hold whenever every sample's L1 norm is at
most 1; the privacy budget is split evenly between the mean stream and the
covariance stream.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp
from scipy.spatial.distance import cdist

from .errors import DegenerateFitError, InvalidInputError
from .graph import ClusterAssignment, as_points
from .kmeans import kmeans_pp_seeds

# Covariances switch from full to diagonal above this dimension: elementwise
# noise on a dense d*d matrix at high d destroys all utility.
FULL_COVARIANCE_MAX_DIM = 64
COV_REG = 1e-6
EM_MAX_ITER = 100
EM_LL_TOL = 1e-6
MAX_COLLAPSES = 3

# Draws from the noise generator, for auditing that epsilon=0 paths never
# touch it.
_noise_draws = 0


def noise_draw_count():
    return _noise_draws


def reset_noise_draw_count():
    global _noise_draws
    _noise_draws = 0


@dataclass
class Prototype:
    """Gaussian summary of one cluster."""

    mean: np.ndarray
    covariance: np.ndarray
    weight: float

    @property
    def dim(self):
        return len(self.mean)

    def validate(self):
        if not np.allclose(self.covariance, self.covariance.T, atol=1e-9):
            raise InvalidInputError("prototype covariance is not symmetric")
        if not -1e-9 <= self.weight <= 1 + 1e-9:
            raise InvalidInputError(f"prototype weight {self.weight} outside [0, 1]")


@dataclass
class PrototypeSet:
    """All cluster prototypes of one client (or of the server after fusion).

    ``space`` records which representation the means live in ("input" or
    "latent"), so feedback consumers know whether to re-encode them.
    """

    client_id: int
    prototypes: list
    noised: bool = False
    epsilon_spent: float = 0.0
    space: str = "input"

    @property
    def count(self):
        return len(self.prototypes)

    @property
    def dim(self):
        return self.prototypes[0].dim

    def means(self):
        return np.array([p.mean for p in self.prototypes])

    def weights(self):
        return np.array([p.weight for p in self.prototypes])

    def validate(self):
        for p in self.prototypes:
            p.validate()
        if not self.noised and abs(sum(p.weight for p in self.prototypes) - 1.0) > 1e-6:
            raise InvalidInputError("un-noised prototype weights must sum to 1")


@dataclass
class SensitivityBounds:
    """Worst-case L1 release sensitivities under max-row-L1 <= 1 data."""

    delta_mu: float
    delta_sigma: float
    n_c_min: int


@dataclass
class GmmFit:
    """Full EM output, including traces used by property tests."""

    prototypes: "PrototypeSet"
    assignment: ClusterAssignment
    responsibilities: np.ndarray
    log_likelihood_trace: list = field(default_factory=list)


def l1_normalize(points):
    """Scale each row to unit L1 norm.

    Note this is a radial projection: it collapses points that differ only
    in norm.  The federation pipeline uses :func:`l1_bound_rows` instead,
    which preserves geometry while still bounding every row's L1 norm by 1.
    """
    x = as_points(points)
    norms = np.abs(x).sum(axis=1)
    zero = np.nonzero(norms == 0.0)[0]
    if len(zero):
        raise InvalidInputError(f"row {zero[0]} has zero L1 norm")
    return x / norms[:, None]


def l1_bound_rows(points, center=True):
    """Shift and rescale so every row has L1 norm <= 1.

    Returns (scaled points, scale factor).  Centering first costs nothing
    (pairwise distances are translation invariant) but can shrink the scale
    factor several-fold when the data has a large mean offset, which
    directly improves the signal-to-noise of the DP release; the single
    shared factor keeps all pairwise geometry intact, and the sensitivity
    bounds only need the norm bound, not exact normalization.
    """
    x = as_points(points)
    if center:
        x = x - x.mean(axis=0)
    scale = max(float(np.abs(x).sum(axis=1).max()), 1.0)
    return x / scale, scale


def compute_sensitivities(n_c_min):
    """Release sensitivities for mean and covariance prototypes.

    With every sample's L1 norm at most 1, swapping one sample in a cluster
    of size ``n`` moves the mean by at most 2/n in L1 and the covariance by
    at most (2*sqrt(2)+4)/n.
    """
    if n_c_min < 1:
        raise InvalidInputError(f"smallest cluster size must be >= 1, got {n_c_min}")
    return SensitivityBounds(
        delta_mu=2.0 / n_c_min,
        delta_sigma=(2.0 * math.sqrt(2.0) + 4.0) / n_c_min,
        n_c_min=int(n_c_min),
    )


def psd_repair(m, floor=COV_REG):
    """Clip eigenvalues below ``floor`` up to it and reconstruct."""
    a = np.asarray(m, dtype=np.float64)
    if not np.allclose(a, a.T, atol=1e-6):
        raise InvalidInputError("matrix must be symmetric")
    a = 0.5 * (a + a.T)
    vals, vecs = np.linalg.eigh(a)
    if vals.min() >= floor:
        return a
    vals = np.maximum(vals, floor)
    out = (vecs * vals) @ vecs.T
    return 0.5 * (out + out.T)


def _laplace(rng, scale, shape):
    global _noise_draws
    _noise_draws += int(np.prod(shape))
    return rng.laplace(0.0, scale, shape)


def privatize_prototypes(proto_set, bounds, epsilon, rng_seed):
    """Release a prototype set under epsilon-DP via the Laplace mechanism.

    Half the budget covers the means, half the covariances (sequential
    composition), so each stream gets noise of scale sensitivity/(eps/2).
    Noised covariances are re-symmetrized and PSD-repaired.
    """
    if epsilon <= 0:
        raise InvalidInputError(f"privacy budget must be positive, got {epsilon}")
    if proto_set.noised:
        raise InvalidInputError("prototype set is already noised")
    rng = np.random.default_rng(rng_seed)
    b_mu = bounds.delta_mu / (epsilon / 2.0)
    b_sigma = bounds.delta_sigma / (epsilon / 2.0)
    # Covariance eigenvalues below the injected noise scale are pure noise;
    # flooring there keeps downstream KL divergences finite instead of
    # letting near-singular noised covariances blow them up.
    floor = max(COV_REG, b_sigma)
    released = []
    for p in proto_set.prototypes:
        d = p.dim
        mean = p.mean + _laplace(rng, b_mu, (d,))
        cov = p.covariance + _laplace(rng, b_sigma, (d, d))
        cov = psd_repair(0.5 * (cov + cov.T), floor=floor)
        released.append(Prototype(mean=mean, covariance=cov, weight=p.weight))
    return PrototypeSet(
        client_id=proto_set.client_id,
        prototypes=released,
        noised=True,
        epsilon_spent=float(epsilon),
        space=proto_set.space,
    )


def _log_gaussian(x, mean, cov):
    d = x.shape[1]
    chol = np.linalg.cholesky(cov)
    diff = x - mean
    solved = np.linalg.solve(chol, diff.T)
    maha = np.sum(solved**2, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (maha + logdet + d * math.log(2.0 * math.pi))


def _m_step(x, resp, diagonal):
    n, d = x.shape
    nk = resp.sum(axis=0)
    means = (resp.T @ x) / nk[:, None]
    covs = np.empty((resp.shape[1], d, d))
    for j in range(resp.shape[1]):
        diff = x - means[j]
        cov = (resp[:, j][:, None] * diff).T @ diff / nk[j]
        if diagonal:
            cov = np.diag(np.diag(cov))
        covs[j] = cov + COV_REG * np.eye(d)
    weights = nk / n
    return means, covs, weights, nk


def fit_gmm_full(points, c, seed, init_labels=None):
    """EM for a Gaussian mixture; k-means++ seeded unless labels are given.

    A collapsing component (no responsibility mass) is re-seeded at the point
    farthest from the current means; more than MAX_COLLAPSES re-seeds aborts
    with a degenerate-fit error.
    """
    x = as_points(points)
    n, d = x.shape
    if n < c:
        raise InvalidInputError(f"need at least c={c} samples, got {n}")
    diagonal = d > FULL_COVARIANCE_MAX_DIM
    rng = np.random.default_rng(seed)

    if init_labels is not None:
        init_labels = np.asarray(init_labels)
        if len(init_labels) != n or init_labels.max() >= c:
            raise InvalidInputError("init_labels inconsistent with data / c")
        resp = np.zeros((n, c))
        resp[np.arange(n), init_labels] = 1.0
        if np.any(resp.sum(axis=0) == 0):  # empty init cluster: fall back
            init_labels = None
    if init_labels is None:
        seeds = kmeans_pp_seeds(x, c, rng)
        hard = cdist(x, seeds, "sqeuclidean").argmin(axis=1)
        resp = np.zeros((n, c))
        resp[np.arange(n), hard] = 1.0
        for j in range(c):
            if resp[:, j].sum() == 0:
                resp[int(rng.integers(n))] = np.eye(c)[j]

    means, covs, weights, _ = _m_step(x, resp, diagonal)
    trace = []
    collapses = 0
    prev_ll = -np.inf
    for _ in range(EM_MAX_ITER):
        log_dens = np.column_stack(
            [np.log(max(weights[j], 1e-300)) + _log_gaussian(x, means[j], covs[j]) for j in range(c)]
        )
        norm = logsumexp(log_dens, axis=1)
        resp = np.exp(log_dens - norm[:, None])
        ll = float(norm.sum())
        trace.append(ll)

        nk = resp.sum(axis=0)
        dead = np.nonzero(nk < 1e-9)[0]
        if len(dead):
            collapses += len(dead)
            if collapses > MAX_COLLAPSES:
                raise DegenerateFitError(
                    f"mixture fit collapsed {collapses} times (c={c}, n={n})"
                )
            for j in dead:
                far = cdist(x, means, "sqeuclidean").min(axis=1).argmax()
                resp[:, j] = 0.0
                resp[far] = np.eye(c)[j]
            resp /= resp.sum(axis=1, keepdims=True)
            nk = resp.sum(axis=0)

        means, covs, weights, _ = _m_step(x, resp, diagonal)
        if abs(ll - prev_ll) < EM_LL_TOL:
            break
        prev_ll = ll

    hard = resp.argmax(axis=1)
    protos = [
        Prototype(mean=means[j].copy(), covariance=covs[j].copy(), weight=float(weights[j]))
        for j in range(c)
    ]
    proto_set = PrototypeSet(client_id=-1, prototypes=protos)
    return GmmFit(
        prototypes=proto_set,
        assignment=ClusterAssignment(labels=hard.astype(np.int64)),
        responsibilities=resp,
        log_likelihood_trace=trace,
    )


def fit_gmm(points, c, seed, init_labels=None):
    """Gaussian-mixture prototypes plus hard assignments."""
    fit = fit_gmm_full(points, c, seed, init_labels=init_labels)
    return fit.prototypes, fit.assignment


def prototypes_from_labels(points, labels, c):
    """Gaussian moment summaries of already-clustered data.

    Used when the structural graph has already produced the client's
    clustering: each prototype is the mean/covariance/weight of one cluster.
    Running full EM here would re-sort boundary points toward elliptical
    fits and decouple the prototypes from the graph components.
    """
    x = as_points(points)
    labels = np.asarray(labels)
    if len(labels) != len(x):
        raise InvalidInputError("labels length must match sample count")
    n, d = x.shape
    diagonal = d > FULL_COVARIANCE_MAX_DIM
    protos = []
    for j in range(c):
        members = x[labels == j]
        if len(members) == 0:
            raise InvalidInputError(f"cluster {j} has no members")
        mean = members.mean(axis=0)
        diff = members - mean
        cov = diff.T @ diff / len(members)
        if diagonal:
            cov = np.diag(np.diag(cov))
        cov += COV_REG * np.eye(d)
        protos.append(Prototype(mean=mean, covariance=cov, weight=len(members) / n))
    proto_set = PrototypeSet(client_id=-1, prototypes=protos)
    return proto_set, ClusterAssignment(labels=labels.astype(np.int64))
