"""Synthetic generators, CSV ingestion, and heterogeneous client partitioning."""

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .graph import as_points


@dataclass
class LabeledDataset:
    """Sample matrix with optional ground-truth class labels."""

    points: np.ndarray
    labels: np.ndarray | None
    name: str
    class_count: int

    def __post_init__(self):
        self.points = as_points(self.points)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.points):
                raise InvalidInputError("labels length must match sample count")
            if self.labels.min() < 0 or self.labels.max() >= self.class_count:
                raise InvalidInputError("labels out of range for class_count")

    @property
    def n(self):
        return self.points.shape[0]


@dataclass
class PartitionPlan:
    """Disjoint, exhaustive per-client index lists."""

    client_indices: list
    heterogeneity: float
    seed: int

    def validate(self, n):
        seen = np.concatenate(self.client_indices)
        if len(seen) != n or len(np.unique(seen)) != n:
            raise InvalidInputError("partition must be disjoint and exhaustive")


def gen_moons(n, noise_sigma=0.06, seed=0):
    """Two interleaving half circles with isotropic Gaussian noise.

    Arc 0 is (cos t, sin t) and arc 1 is (1 - cos t, 0.5 - sin t) for t
    uniform in [0, pi], n/2 points each.
    """
    if n < 4 or n % 2 != 0:
        raise InvalidInputError(f"n must be even and >= 4, got {n}")
    rng = np.random.default_rng(seed)
    half = n // 2
    t0 = rng.uniform(0.0, np.pi, half)
    t1 = rng.uniform(0.0, np.pi, half)
    arc0 = np.column_stack([np.cos(t0), np.sin(t0)])
    arc1 = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    pts = np.vstack([arc0, arc1])
    if noise_sigma > 0:
        pts = pts + rng.normal(0.0, noise_sigma, pts.shape)
    labels = np.repeat([0, 1], half)
    return LabeledDataset(points=pts, labels=labels, name="moons", class_count=2)


def gen_ring(n, dim=20, classes=5, seed=0):
    """Concentric circles of radius 1..classes in the first two coordinates.

    The remaining dim-2 coordinates are pure Gaussian noise (sigma 0.05), so
    classes are separable only through the norm of the first two features.
    """
    if n % classes != 0:
        raise InvalidInputError(f"n={n} must be divisible by classes={classes}")
    if dim < 2:
        raise InvalidInputError("dim must be at least 2")
    rng = np.random.default_rng(seed)
    per = n // classes
    blocks = []
    for c in range(classes):
        theta = rng.uniform(0.0, 2.0 * np.pi, per)
        x = np.zeros((per, dim))
        x[:, 0] = (1.0 + c) * np.cos(theta)
        x[:, 1] = (1.0 + c) * np.sin(theta)
        if dim > 2:
            x[:, 2:] = rng.normal(0.0, 0.05, (per, dim - 2))
        blocks.append(x)
    pts = np.vstack(blocks)
    labels = np.repeat(np.arange(classes), per)
    return LabeledDataset(points=pts, labels=labels, name="ring", class_count=classes)


def load_csv(path, label_column=None):
    """Parse a rectangular numeric CSV, optionally factorizing a label column.

    A single leading header row is skipped when any of its cells is
    non-numeric.  Labels are mapped to 0..K-1 in first-appearance order.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]
    if not rows:
        raise InvalidInputError(f"{path}: file is empty")

    def numeric(cell):
        try:
            float(cell)
            return True
        except ValueError:
            return False

    # Header heuristic: row 0 is a header when some column is non-numeric
    # there but numeric in row 1 (a string label column stays non-numeric
    # in every row and does not trigger this).
    start = 0
    header = None
    if len(rows) > 1 and any(
        not numeric(a) and numeric(b) for a, b in zip(rows[0], rows[1])
    ):
        header = [c.strip() for c in rows[0]]
        start = 1

    width = len(rows[start])
    label_idx = None
    if label_column is not None:
        if isinstance(label_column, str):
            if header is None or label_column not in header:
                raise InvalidInputError(f"{path}: no header column named {label_column!r}")
            label_idx = header.index(label_column)
        else:
            label_idx = int(label_column)
            if label_idx < 0:
                label_idx += width

    features = []
    raw_labels = []
    for lineno, row in enumerate(rows[start:], start=start + 1):
        if len(row) != width:
            raise InvalidInputError(
                f"{path}:{lineno}: ragged row with {len(row)} cells, expected {width}"
            )
        feats = []
        for col, cell in enumerate(row):
            if col == label_idx:
                raw_labels.append(cell.strip())
                continue
            if not numeric(cell):
                raise InvalidInputError(
                    f"{path}:{lineno}: non-numeric feature cell {cell!r}"
                )
            feats.append(float(cell))
        features.append(feats)

    points = np.asarray(features, dtype=np.float64)
    labels = None
    class_count = 0
    if label_idx is not None:
        seen = {}
        labels = np.array([seen.setdefault(v, len(seen)) for v in raw_labels])
        class_count = len(seen)
    name = str(path).rsplit("/", maxsplit=1)[-1]
    return LabeledDataset(points=points, labels=labels, name=name, class_count=class_count)


def standardize(points):
    """Z-score each column; constant columns are left centered at zero."""
    x = as_points(points)
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd == 0.0] = 1.0
    return (x - mu) / sd


def partition_clients(ds, m, het=0.0, seed=0):
    """Split a dataset across ``m`` clients with tunable class imbalance.

    Each client draws a fraction ``het`` of its quota from its dominant
    classes (classes dealt round-robin to clients) and the rest uniformly
    from whatever remains.  ``het=0`` is a uniform random split.  Dominant
    pools that run short spill into the uniform pool with a warning.
    """
    if not 0.0 <= het < 1.0:
        raise InvalidInputError(f"heterogeneity must be in [0, 1), got {het}")
    if m < 1:
        raise InvalidInputError("need at least one client")
    if het > 0.0 and ds.labels is None:
        raise InvalidInputError("heterogeneous split needs labels")
    rng = np.random.default_rng(seed)
    n = ds.n
    quotas = [n // m + (1 if i < n % m else 0) for i in range(m)]

    if het == 0.0:
        perm = rng.permutation(n)
        cuts = np.cumsum(quotas)[:-1]
        parts = [np.sort(chunk) for chunk in np.split(perm, cuts)]
        return PartitionPlan(client_indices=parts, heterogeneity=het, seed=seed)

    available = np.ones(n, dtype=bool)
    dominant = {k: [] for k in range(m)}
    for cls in range(ds.class_count):
        dominant[cls % m].append(cls)

    parts = []
    for k in range(m):
        take = quotas[k] if k < m - 1 else int(available.sum())
        want_dom = int(round(het * take)) if dominant[k] else 0
        pool = np.nonzero(available & np.isin(ds.labels, dominant[k]))[0]
        if len(pool) < want_dom:
            warnings.warn(
                f"client {k}: dominant classes {dominant[k]} short by "
                f"{want_dom - len(pool)} samples, spilling to uniform pool"
            )
            want_dom = len(pool)
        chosen_dom = rng.choice(pool, size=want_dom, replace=False)
        available[chosen_dom] = False
        rest_pool = np.nonzero(available)[0]
        want_rest = min(take - want_dom, len(rest_pool))
        chosen_rest = rng.choice(rest_pool, size=want_rest, replace=False)
        available[chosen_rest] = False
        parts.append(np.sort(np.concatenate([chosen_dom, chosen_rest])))

    leftovers = np.nonzero(available)[0]
    if len(leftovers):
        parts[-1] = np.sort(np.concatenate([parts[-1], leftovers]))
    plan = PartitionPlan(client_indices=parts, heterogeneity=het, seed=seed)
    plan.validate(n)
    return plan
