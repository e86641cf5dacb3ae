"""Per-client representation learning for the iterative mode.

Two kinds: an identity pass-through, and a minimal linear autoencoder whose
loss couples reconstruction with a clustering term that pulls embeddings
toward shared global prototype centers (Student-t soft assignments matched
to a sharpened target distribution).  The gradient is fully analytic so it
can be checked against finite differences.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, NumericError
from .graph import as_points
from .kmeans import kmeans

DIVERGENCE_RESTARTS = 3


@dataclass
class EmbedderConfig:
    kind: str = "identity"  # "identity" | "linear_dec"
    latent_dim: int = 2
    lambda_dec: float = 0.1
    epochs: int = 200
    step_size: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("identity", "linear_dec"):
            raise InvalidInputError(f"unknown embedder kind {self.kind!r}")
        if self.latent_dim < 1:
            raise InvalidInputError("latent_dim must be >= 1")
        if self.lambda_dec < 0:
            raise InvalidInputError("lambda_dec must be >= 0")
        if self.step_size <= 0:
            raise InvalidInputError("step_size must be > 0")


@dataclass
class LatentSet:
    """Final embeddings plus the config that produced them."""

    embeddings: np.ndarray
    config: EmbedderConfig
    loss_trace: list = field(default_factory=list)
    encoder: tuple | None = None  # (W, b) of the trained encoder


def dec_soft_assign(z, centers):
    """Student-t soft assignment: q_j proportional to 1/(1 + ||z - mu_j||^2).

    Accepts a single latent vector or a batch (rows).
    """
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    mu = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    if mu.shape[0] < 1:
        raise InvalidInputError("need at least one center")
    sq = ((z[:, None, :] - mu[None, :, :]) ** 2).sum(axis=2)
    s = 1.0 / (1.0 + sq)
    q = s / s.sum(axis=1, keepdims=True)
    return q[0] if single else q


def dec_target_dist(q):
    """Sharpened target: p_ij proportional to q_ij^2 / column frequency."""
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    freq = q.sum(axis=0)
    safe = np.where(freq > 0, freq, 1.0)
    weighted = np.where(freq[None, :] > 0, q**2 / safe[None, :], 0.0)
    return weighted / weighted.sum(axis=1, keepdims=True)


def _init_params(d, latent, rng):
    """Orthogonal encoder init with a transposed decoder.

    An isometric starting map keeps the latent geometry faithful to the
    input (a plain Gaussian init is often badly conditioned at small
    dimensions and shears the data before training even starts), and makes
    reconstruction exact at initialization when latent == d.
    """
    gauss = rng.normal(size=(d, max(latent, 1)))
    q, r = np.linalg.qr(gauss)
    w_enc = q[:, :latent] * np.sign(np.diag(r))[None, :latent]
    b_enc = np.zeros(latent)
    w_dec = w_enc.T.copy()
    b_dec = np.zeros(d)
    return {"w_enc": w_enc, "b_enc": b_enc, "w_dec": w_dec, "b_dec": b_dec}


def encode(params, x):
    return x @ params["w_enc"] + params["b_enc"]


def loss_and_grads(params, x, centers, target, lambda_dec):
    """Total loss and analytic parameter gradients, centers and target fixed.

    Loss = ||X - X_hat||_F^2 / N + lambda_dec * KL(target || q) / N with q the
    Student-t soft assignment of the embeddings against ``centers``.
    """
    n = x.shape[0]
    z = encode(params, x)
    x_hat = z @ params["w_dec"] + params["b_dec"]
    resid = x_hat - x
    loss_rec = float(np.sum(resid**2)) / n

    grad_z = (2.0 / n) * resid @ params["w_dec"].T
    grads = {
        "w_dec": (2.0 / n) * z.T @ resid,
        "b_dec": (2.0 / n) * resid.sum(axis=0),
    }

    loss_dec = 0.0
    if lambda_dec > 0 and centers is not None:
        diff = z[:, None, :] - centers[None, :, :]
        s = 1.0 / (1.0 + (diff**2).sum(axis=2))
        q = s / s.sum(axis=1, keepdims=True)
        mask = target > 0
        loss_dec = float(np.sum(target[mask] * np.log(target[mask] / q[mask]))) / n
        # d KL / d z_i = 2 sum_j s_ij (p_ij - q_ij) (z_i - mu_j)
        coeff = 2.0 * s * (target - q)
        grad_z = grad_z + (lambda_dec / n) * np.einsum("ij,ijk->ik", coeff, diff)

    grads["w_enc"] = x.T @ grad_z
    grads["b_enc"] = grad_z.sum(axis=0)
    total = loss_rec + lambda_dec * loss_dec
    return total, grads


def train_embedder(data, global_protos, cfg, n_centers=None):
    """Return client embeddings under the configured embedder.

    identity: embeddings are the input, bit for bit.  linear_dec: gradient
    descent on the two-term loss; the clustering centers come from the
    global prototypes (encoded when they live in input space, used directly
    when already latent) or, lacking any, from k-means with ``n_centers``
    on the initial embedding.  Non-finite loss halves the step size and
    restarts, up to DIVERGENCE_RESTARTS times.
    """
    x = as_points(data)
    n, d = x.shape
    if cfg.kind == "identity":
        if cfg.latent_dim != d:
            raise InvalidInputError(
                f"identity embedder needs latent_dim == data dim ({d}), got {cfg.latent_dim}"
            )
        return LatentSet(embeddings=x.copy(), config=cfg)

    step = cfg.step_size
    for attempt in range(DIVERGENCE_RESTARTS + 1):
        rng = np.random.default_rng(cfg.seed)
        params = _init_params(d, cfg.latent_dim, rng)
        z = encode(params, x)
        centers = _resolve_centers(params, x, z, global_protos, cfg, rng, n_centers)
        trace = []
        diverged = False
        for _ in range(cfg.epochs):
            q = dec_soft_assign(z, centers) if centers is not None else None
            target = dec_target_dist(q) if q is not None else None
            loss, grads = loss_and_grads(params, x, centers, target, cfg.lambda_dec)
            if not np.isfinite(loss):
                diverged = True
                break
            trace.append(loss)
            for key in params:
                params[key] = params[key] - step * grads[key]
            z = encode(params, x)
            if global_protos is not None and global_protos.space == "input":
                centers = encode(params, global_protos.means())
        if not diverged:
            return LatentSet(
                embeddings=z,
                config=cfg,
                loss_trace=trace,
                encoder=(params["w_enc"].copy(), params["b_enc"].copy()),
            )
        step /= 2.0
    raise NumericError(
        f"embedder training diverged after {DIVERGENCE_RESTARTS} step-size restarts"
    )


def _resolve_centers(params, x, z, global_protos, cfg, rng, n_centers):
    if cfg.lambda_dec == 0:
        return None
    if global_protos is None:
        k = n_centers if n_centers is not None else 2
        seed = int(rng.integers(2**31))
        _, centers, _ = kmeans(z, min(len(z), k), seed=seed)
        return centers
    means = global_protos.means()
    if global_protos.space == "input":
        if means.shape[1] != x.shape[1]:
            raise InvalidInputError(
                "input-space prototypes must match the data dimension"
            )
        return encode(params, means)
    if means.shape[1] != cfg.latent_dim:
        raise InvalidInputError("latent prototypes must match latent_dim")
    return means