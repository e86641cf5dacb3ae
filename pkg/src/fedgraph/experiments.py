"""Batch experiment driver: specs, runs, sweeps, ablations, and reports.

An experiment spec is a JSON-serializable description of one configuration:
a dataset source (generator or CSV), a federation config, a mode, ablation
flags, and a heterogeneity ratio.  Every run report embeds the resolved
spec and seed, so any report can be reproduced exactly from its own file.
"""

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .datasets import gen_moons, gen_ring, load_csv, partition_clients, standardize
from .embedder import EmbedderConfig
from .errors import ConfigError
from .federation import (
    FederationConfig,
    baseline_federated_kmeans,
    run_iterative,
    run_one_shot,
)
from .metrics import ari, hungarian_accuracy, nmi

REPORT_VERSION = 1
MODES = ("one_shot", "iterative", "baseline_kmeans")


@dataclass
class ExperimentSpec:
    """One experiment configuration; JSON round-trippable."""

    dataset: dict
    federation: FederationConfig
    mode: str = "one_shot"
    het: float = 0.0
    dp_off: bool = False
    psg_off: bool = False
    gsg_off: bool = False
    output: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        sources = [k for k in ("generator", "csv") if k in self.dataset]
        if len(sources) != 1:
            raise ConfigError("dataset needs exactly one of 'generator' or 'csv'")
        if not 0.0 <= self.het < 1.0:
            raise ConfigError(f"het must be in [0, 1), got {self.het}")
        if self.mode == "baseline_kmeans" and (self.psg_off or self.gsg_off):
            raise ConfigError("ablation flags do not apply to the k-means baseline")

    def to_dict(self):
        out = asdict(self)
        return out

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw)
        fed_raw = dict(raw.pop("federation", {}))
        emb_raw = dict(fed_raw.pop("embedder", {}))
        _check_keys(emb_raw, EmbedderConfig, "embedder")
        embedder = EmbedderConfig(**emb_raw)
        _check_keys(fed_raw, FederationConfig, "federation")
        federation = FederationConfig(embedder=embedder, **fed_raw)
        _check_keys(raw, cls, "experiment")
        return cls(federation=federation, **raw)

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _check_keys(raw, klass, what):
    allowed = set(klass.__dataclass_fields__)
    if what == "federation":
        allowed -= {"embedder"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown {what} config keys: {sorted(unknown)}")


@dataclass
class RunReport:
    """Metrics and provenance of a single run."""

    spec: dict
    seed: int
    mode: str
    metrics: dict
    trace: list = field(default_factory=list)
    message_stats: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0
    report_version: int = REPORT_VERSION

    def to_dict(self):
        return asdict(self)

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def build_dataset(spec, seed):
    """Materialize the spec's dataset; generator draws depend on the seed."""
    src = spec.dataset
    if "generator" in src:
        name = src["generator"]
        if name == "moons":
            return gen_moons(
                src.get("n", 1000), src.get("noise", 0.06), seed=src.get("seed", seed)
            )
        if name == "ring":
            return gen_ring(
                src.get("n", 5000),
                dim=src.get("dim", 20),
                classes=src.get("classes", 5),
                seed=src.get("seed", seed),
            )
        raise ConfigError(f"unknown generator {name!r}")
    ds = load_csv(src["csv"], label_column=src.get("label_column"))
    ds.points = standardize(ds.points)
    return ds


def run_experiment(spec, seed=None):
    """Execute one spec end to end and return its report."""
    if not isinstance(spec, ExperimentSpec):
        spec = ExperimentSpec.from_dict(spec)
    run_seed = spec.federation.seed if seed is None else int(seed)
    cfg = replace(spec.federation, seed=run_seed)
    if spec.dp_off:
        cfg = replace(cfg, epsilon=0.0)

    started = time.perf_counter()
    ds = build_dataset(spec, run_seed)
    plan = partition_clients(ds, cfg.num_clients, het=spec.het, seed=run_seed)
    datasets = [ds.points[idx] for idx in plan.client_indices]
    labels = (
        [ds.labels[idx] for idx in plan.client_indices] if ds.labels is not None else None
    )

    sizes = []
    trace = []
    if spec.mode == "one_shot":
        result = run_one_shot(
            datasets,
            cfg,
            psg_off=spec.psg_off,
            gsg_off=spec.gsg_off,
            size_collector=sizes,
        )
    elif spec.mode == "iterative":
        result, trace = run_iterative(
            datasets,
            cfg,
            true_labels=labels,
            psg_off=spec.psg_off,
            gsg_off=spec.gsg_off,
            size_collector=sizes,
        )
    else:
        result = baseline_federated_kmeans(datasets, cfg)

    metrics = {}
    if labels is not None:
        truth = np.concatenate(labels)
        predicted = result.assignments.labels
        metrics = {
            "acc": hungarian_accuracy(truth, predicted),
            "nmi": nmi(truth, predicted),
            "ari": ari(truth, predicted),
        }

    stats = {}
    if sizes:
        stats = {
            "uploads": len(sizes),
            "total_bytes": int(sum(s["bytes"] for s in sizes)),
            "max_nonzeros": int(max(s["nonzeros"] for s in sizes)),
            "bound": int(max(s["bound"] for s in sizes)),
            "within_bound": all(s["nonzeros"] <= s["bound"] for s in sizes),
        }

    report = RunReport(
        spec=spec.to_dict(),
        seed=run_seed,
        mode=spec.mode,
        metrics=metrics,
        trace=trace,
        message_stats=stats,
        wall_clock_s=time.perf_counter() - started,
    )
    if spec.output:
        os.makedirs(spec.output, exist_ok=True)
        report.write(os.path.join(spec.output, f"run_seed{run_seed}.json"))
    return report


def _worker(args):
    spec_dict, seed = args
    try:
        report = run_experiment(ExperimentSpec.from_dict(spec_dict), seed=seed)
        return {"ok": True, "report": report.to_dict()}
    except Exception as err:  # recorded per cell, sweep continues
        return {"ok": False, "error": f"{type(err).__name__}: {err}", "seed": seed}


def worker_count():
    """Worker cap from FEDGRAPH_THREADS (default 1 = run inline)."""
    raw = os.environ.get("FEDGRAPH_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"FEDGRAPH_THREADS must be an integer, got {raw!r}")


def run_sweep(specs, repeats=1, base_seed=0):
    """Run each spec with seeds base_seed..base_seed+repeats-1.

    Returns a list of aggregate rows (one per spec) with mean and standard
    deviation per metric; individual failures are recorded in the row and
    do not stop the sweep.
    """
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    jobs = []
    for spec in specs:
        spec = spec if isinstance(spec, ExperimentSpec) else ExperimentSpec.from_dict(spec)
        for r in range(repeats):
            jobs.append((spec.to_dict(), base_seed + r))

    workers = worker_count()
    if workers == 1:
        outcomes = [_worker(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_worker, jobs))

    rows = []
    for i, spec in enumerate(specs):
        spec_dict = (
            spec.to_dict() if isinstance(spec, ExperimentSpec) else dict(spec)
        )
        cell = outcomes[i * repeats : (i + 1) * repeats]
        reports = [o["report"] for o in cell if o["ok"]]
        failures = [o for o in cell if not o["ok"]]
        row = {
            "spec": spec_dict,
            "runs": len(cell),
            "failures": [
                {"seed": f["seed"], "error": f["error"]} for f in failures
            ],
            "metrics": {},
            "reports": reports,
        }
        if reports and reports[0]["metrics"]:
            for key in reports[0]["metrics"]:
                values = [r["metrics"][key] for r in reports]
                row["metrics"][key] = {
                    "mean": float(np.mean(values)),
                    "std": float(np.std(values)),
                }
        rows.append(row)
    return rows


def ablation_specs(spec):
    """The five ablation arms: full, no DP, no private graphs, no global
    refinement, and neither graph stage."""
    base = spec if isinstance(spec, ExperimentSpec) else ExperimentSpec.from_dict(spec)
    return {
        "full": replace(base),
        "dp_off": replace(base, dp_off=True),
        "psg_off": replace(base, psg_off=True),
        "gsg_off": replace(base, gsg_off=True),
        "both_off": replace(base, psg_off=True, gsg_off=True),
    }


def run_ablation(spec, repeats=5, base_seed=0):
    """Run every ablation arm on the same seed set."""
    arms = ablation_specs(spec)
    rows = run_sweep(list(arms.values()), repeats=repeats, base_seed=base_seed)
    return dict(zip(arms.keys(), rows))


def run_het_sweep(spec, ratios=(0.2, 0.4, 0.6, 0.8, 0.95), repeats=3, base_seed=0):
    """Sweep the heterogeneity ratio, holding everything else fixed."""
    base = spec if isinstance(spec, ExperimentSpec) else ExperimentSpec.from_dict(spec)
    specs = [replace(base, het=float(h)) for h in ratios]
    rows = run_sweep(specs, repeats=repeats, base_seed=base_seed)
    return dict(zip([float(h) for h in ratios], rows))


def run_bench(spec, scales=(1, 2), base_seed=0):
    """Message-size and runtime scaling across dataset sizes."""
    base = spec if isinstance(spec, ExperimentSpec) else ExperimentSpec.from_dict(spec)
    if "generator" not in base.dataset:
        raise ConfigError("bench needs a generator dataset to rescale")
    n0 = base.dataset.get("n", 1000)
    out = []
    for scale in scales:
        ds = dict(base.dataset)
        ds["n"] = int(n0 * scale)
        report = run_experiment(replace(base, dataset=ds), seed=base_seed)
        out.append(
            {
                "n": ds["n"],
                "total_bytes": report.message_stats.get("total_bytes", 0),
                "wall_clock_s": report.wall_clock_s,
                "metrics": report.metrics,
            }
        )
    return out


def format_table(rows_by_key, metric_keys=("acc", "nmi", "ari")):
    """Render aggregate rows as an aligned text table."""
    lines = []
    header = ["cell"] + [k.upper() for k in metric_keys] + ["runs", "failures"]
    widths = [max(18, len(header[0]))] + [16] * len(metric_keys) + [6, 10]
    lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for key, row in rows_by_key.items():
        cells = [str(key).ljust(widths[0])]
        for i, m in enumerate(metric_keys):
            stat = row["metrics"].get(m)
            text = f"{stat['mean']:.4f} ± {stat['std']:.4f}" if stat else "-"
            cells.append(text.ljust(widths[1 + i]))
        cells.append(str(row["runs"]).ljust(widths[-2]))
        cells.append(str(len(row["failures"])).ljust(widths[-1]))
        lines.append("  ".join(cells))
    return "\n".join(lines)


def export_csv(rows_by_key, path, metric_keys=("acc", "nmi", "ari")):
    """Write aggregate rows as CSV for external plotting."""
    import csv as csv_mod

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv_mod.writer(fh)
        writer.writerow(
            ["cell"]
            + [f"{k}_mean" for k in metric_keys]
            + [f"{k}_std" for k in metric_keys]
            + ["runs", "failures"]
        )
        for key, row in rows_by_key.items():
            means = [
                row["metrics"].get(k, {}).get("mean", "") for k in metric_keys
            ]
            stds = [row["metrics"].get(k, {}).get("std", "") for k in metric_keys]
            writer.writerow([key] + means + stds + [row["runs"], len(row["failures"])])
