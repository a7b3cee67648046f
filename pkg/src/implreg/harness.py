"""Experiment harness: JSON configs, seeded runs, CSV persistence,
Monte Carlo studies, and sweep aggregation.

Configs are single JSON documents with a top-level ``kind`` field
("matfac-run", "matfac-sweep", "detsign", "tenfac-sweep", "plot").
Every run gets a stable id (config hash plus seed); identical config
and seed reproduce byte-identical CSVs.  Floats are printed with 17
significant digits so parsing a CSV back recovers the exact doubles.
"""

from __future__ import annotations

import csv
import json
import hashlib
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import matfac, metrics, svgplot, tenfac
from .rng import stream

__all__ = [
    "TaskSpec",
    "InitSpec",
    "MatfacRunConfig",
    "MatfacSweepConfig",
    "DetSignConfig",
    "TenfacSweepConfig",
    "PlotConfig",
    "RunRecord",
    "parse_config",
    "load_config",
    "run_matfac",
    "run_matfac_sweep",
    "run_detsign",
    "run_tenfac_sweep",
    "run_config",
    "resolve_seed",
    "format_float",
    "write_csv",
    "read_csv",
    "MATFAC_BASE_COLUMNS",
]

SEED_ENV_VAR = "IMPLREG_SEED"


def format_float(x: float) -> str:
    """17-significant-digit rendering; round-trips every finite double."""
    if isinstance(x, float) and not math.isfinite(x):
        return "inf" if x > 0 else ("-inf" if x < 0 else "nan")
    if x != x:
        return "nan"
    return f"{x:.17g}"


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format_float(v) if isinstance(v, float) else v for v in row])
    return path


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def resolve_seed(flag_seed: int | None, config_seed: int) -> int:
    """Seed precedence: command-line flag, then IMPLREG_SEED, then config."""
    if flag_seed is not None:
        return flag_seed
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None and env != "":
        return int(env)
    return config_seed


# ---------------------------------------------------------------------------
# configs


@dataclass(frozen=True)
class TaskSpec:
    """Which completion problem to run.  ``kind``: "base", "perturbed",
    or "extended".  Positions in configs are 1-based (the top-left
    corner is [1, 1]), matching the w11 naming in logs."""

    kind: str = "base"
    z: float = 1.0
    z_prime: float = 1.0
    eps: float = 0.0
    unobserved: tuple[int, int] = (1, 1)
    rows: int = 2
    cols: int = 2

    def build(self) -> matfac.CompletionTask:
        if self.kind == "base":
            return matfac.make_base_task()
        if self.kind == "perturbed":
            i, j = self.unobserved
            return matfac.make_perturbed_task(self.z, self.z_prime, self.eps, (i - 1, j - 1))
        if self.kind == "extended":
            return matfac.make_extended_task(self.rows, self.cols)
        raise ValueError(f"unknown task kind {self.kind!r}")


@dataclass(frozen=True)
class InitSpec:
    """How to initialize the factors.  ``det_sign`` of +1/-1 redraws the
    initialization until the product's leading-minor determinant has
    that sign; 0 accepts the first draw.  "auto" (the default via
    ``det_sign=None`` in JSON) picks the sign under which the task's
    free entry is driven to grow."""

    kind: str = "balanced"
    alpha: float = 1e-3
    det_sign: int | None = 0

    def build(self, task_spec: TaskSpec, depth: int, rng) -> tuple[matfac.DeepNet, int]:
        task = task_spec.build()
        shape = task.shape

        def make(r):
            if self.kind == "balanced":
                return matfac.init_balanced(shape, depth, self.alpha, r)
            if self.kind == "unbalanced":
                return matfac.init_unbalanced(shape, depth, self.alpha, r)
            if self.kind == "identity":
                if shape[0] != shape[1]:
                    raise ValueError("identity init needs a square task")
                return matfac.init_identity(shape[0], depth, self.alpha)
            raise ValueError(f"unknown init kind {self.kind!r}")

        sign = self.det_sign
        if sign is None:
            sign = matfac.required_det_sign(task)
        if sign == 0 or self.kind == "identity":
            return make(rng), 1
        return matfac.resample_until_det_sign(make, sign, rng)


@dataclass(frozen=True)
class MatfacRunConfig:
    task: TaskSpec = TaskSpec()
    depth: int = 3
    learning_rate: float = 1e-2
    init: InitSpec = InitSpec()
    loss_threshold: float = 1e-4
    max_iters: int = 5_000_000
    log_stride: int = 500
    seed: int = 0
    out_dir: str = "runs"

    @property
    def run_id(self) -> str:
        return _run_id(self, self.seed)


@dataclass(frozen=True)
class MatfacSweepConfig:
    """Grid over depths, learning rates, init alphas and seeds.

    With ``pair_lr_alpha`` the learning-rate and alpha lists are zipped
    (the usual protocol: each rate comes with a matching init scale);
    otherwise the lists are crossed.
    """

    task: TaskSpec = TaskSpec()
    depths: tuple[int, ...] = (2, 3)
    learning_rates: tuple[float, ...] = (1e-2,)
    alphas: tuple[float, ...] = (1e-3,)
    pair_lr_alpha: bool = False
    init_kind: str = "balanced"
    det_sign: int | None = None
    loss_threshold: float = 1e-4
    max_iters: int = 5_000_000
    log_stride: int = 500
    seeds: tuple[int, ...] = (0,)
    out_dir: str = "runs"

    def expand(self) -> list[MatfacRunConfig]:
        if self.pair_lr_alpha:
            if len(self.learning_rates) != len(self.alphas):
                raise ValueError("pair_lr_alpha needs learning_rates and alphas of equal length")
            grid = list(zip(self.learning_rates, self.alphas))
        else:
            grid = [(lr, alpha) for lr in self.learning_rates for alpha in self.alphas]
        runs = []
        for depth in self.depths:
            for lr, alpha in grid:
                for seed in self.seeds:
                    runs.append(
                        MatfacRunConfig(
                            task=self.task,
                            depth=depth,
                            learning_rate=lr,
                            init=InitSpec(kind=self.init_kind, alpha=alpha, det_sign=self.det_sign),
                            loss_threshold=self.loss_threshold,
                            max_iters=self.max_iters,
                            log_stride=self.log_stride,
                            seed=seed,
                            out_dir=self.out_dir,
                        )
                    )
        return runs


@dataclass(frozen=True)
class DetSignConfig:
    samples: int = 10_000
    depth: int = 3
    dim: int = 2
    seed: int = 0
    out: str = "runs/detsign.csv"


@dataclass(frozen=True)
class TenfacSweepConfig:
    dims: tuple[int, ...] = (8, 8, 8)
    gt_rank: int = 1
    gt_seed: int = 0
    obs_seed: int = 1
    n_obs: tuple[int, ...] = (50, 100, 150, 200, 250, 300, 350, 400, 450, 511)
    init_stds: tuple[float, ...] = (1e-4,)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    terms: int | None = None
    mse_threshold: float = 1e-6
    max_iters: int = 1_000_000
    baseline: bool = True
    baseline_rank: bool = False
    out_dir: str = "runs"

    @property
    def run_id(self) -> str:
        return _run_id(self, self.gt_seed)


@dataclass(frozen=True)
class PlotConfig:
    inputs: tuple[str, ...]
    style: str = "loss-vs-entry"
    out: str = "plot.svg"
    title: str | None = None


@dataclass(frozen=True)
class RunRecord:
    """What a run produced: stable id, config echo, artifact paths,
    summary statistics."""

    run_id: str
    config: dict
    csv_path: str
    summary: dict

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _canonical(cfg) -> str:
    return json.dumps(asdict(cfg), sort_keys=True, separators=(",", ":"))


def _run_id(cfg, seed: int) -> str:
    digest = hashlib.sha256(_canonical(cfg).encode()).hexdigest()[:12]
    return f"{digest}-s{seed}"


_KINDS = {
    "matfac-run": MatfacRunConfig,
    "matfac-sweep": MatfacSweepConfig,
    "detsign": DetSignConfig,
    "tenfac-sweep": TenfacSweepConfig,
    "plot": PlotConfig,
}


def parse_config(doc: dict):
    """Build a typed config from a JSON document (kind-discriminated)."""
    if "kind" not in doc:
        raise ValueError("config needs a top-level 'kind'")
    kind = doc["kind"]
    if kind not in _KINDS:
        raise ValueError(f"unknown config kind {kind!r} (expected one of {sorted(_KINDS)})")
    body = {k: v for k, v in doc.items() if k != "kind"}
    try:
        if kind in ("matfac-run", "matfac-sweep"):
            if "task" in body:
                t = dict(body["task"])
                t_kind = t.pop("kind", "base")
                if "unobserved" in t:
                    t["unobserved"] = tuple(t["unobserved"])
                body["task"] = TaskSpec(kind=t_kind, **t)
            if "init" in body:
                body["init"] = InitSpec(**body["init"])
            for key in ("depths", "learning_rates", "alphas", "seeds"):
                if key in body:
                    body[key] = tuple(body[key])
        if kind == "tenfac-sweep":
            for key in ("dims", "n_obs", "init_stds", "seeds"):
                if key in body:
                    body[key] = tuple(body[key])
        if kind == "plot" and "inputs" in body:
            body["inputs"] = tuple(body["inputs"])
        return _KINDS[kind](**body)
    except TypeError as exc:
        raise ValueError(f"bad fields for config kind {kind!r}: {exc}") from exc


def load_config(path):
    with open(path) as fh:
        return parse_config(json.load(fh))


# ---------------------------------------------------------------------------
# matrix runs

MATFAC_BASE_COLUMNS = [
    "iter",
    "loss",
    "w11",
    "det",
    "sigma1",
    "sigma2",
    "erank",
    "nuclear_norm",
    "frob_norm",
    "spectral_norm",
    "schatten_half",
    "unbalancedness",
]

_NUCLEAR = metrics.nuclear()


def _bound_columns(task_spec: TaskSpec) -> list[str]:
    prefix = "thm2" if task_spec.kind == "perturbed" else "thm1"
    return [f"{prefix}_norm_lb", f"{prefix}_erank_ub", f"{prefix}_dist_ub"]


def _bounds_for(task_spec: TaskSpec, ell: float) -> tuple[float, float, float]:
    if task_spec.kind == "perturbed":
        b = metrics.perturbed_task_bounds(ell, task_spec.z, task_spec.z_prime, task_spec.eps, _NUCLEAR)
    else:
        b = metrics.base_task_bounds(ell, _NUCLEAR)
    return b[0].value, b[1].value, b[2].value


def trajectory_rows(samples, task_spec: TaskSpec):
    """Flatten trajectory samples into CSV rows (norm bounds use the
    nuclear spec's constants).  Unobserved entries beyond the (1,1)
    corner, if a task has them, get their own columns after w11."""
    extra_unobs = sorted({ij for s in samples for ij in s.unobserved} - {(0, 0)})
    extra_cols = [f"unobs_{i + 1}_{j + 1}" for (i, j) in extra_unobs]
    header = MATFAC_BASE_COLUMNS[:3] + extra_cols + MATFAC_BASE_COLUMNS[3:] + _bound_columns(task_spec)
    rows = []
    for s in samples:
        row = [s.iteration, s.loss, s.unobserved.get((0, 0), math.nan)]
        row += [s.unobserved.get(ij, math.nan) for ij in extra_unobs]
        row += [
            s.det,
            s.sigmas[0],
            s.sigmas[1] if len(s.sigmas) > 1 else 0.0,
            s.metrics["erank"],
            s.metrics["nuclear_norm"],
            s.metrics["frob_norm"],
            s.metrics["spectral_norm"],
            s.metrics["schatten_half"],
            s.unbalancedness,
        ]
        row += list(_bounds_for(task_spec, s.loss))
        rows.append(row)
    return header, rows


def run_matfac(cfg: MatfacRunConfig) -> RunRecord:
    """Execute one training run and persist its trajectory CSV plus a
    JSON record.  Divergence is recorded in the summary and the partial
    trajectory kept."""
    task = cfg.task.build()
    rng = stream(cfg.seed, 1)
    net, attempts = cfg.init.build(cfg.task, cfg.depth, rng)
    train_cfg = matfac.TrainConfig(
        learning_rate=cfg.learning_rate,
        max_iters=cfg.max_iters,
        loss_threshold=cfg.loss_threshold,
        log_stride=cfg.log_stride,
        seed=cfg.seed,
    )
    t0 = time.monotonic()
    diverged = False
    try:
        result = matfac.gd_train(net, task, train_cfg)
        trajectory = result.trajectory
        summary_tail = {
            "iterations": result.iterations,
            "final_loss": result.trajectory[-1].loss,
            "final_w11": result.trajectory[-1].unobserved.get((0, 0)),
            "converged": result.converged,
        }
    except matfac.DivergenceError as exc:
        diverged = True
        trajectory = exc.trajectory
        last = exc.last_sample
        summary_tail = {
            "iterations": last.iteration if last else 0,
            "final_loss": last.loss if last else math.nan,
            "final_w11": last.unobserved.get((0, 0)) if last else math.nan,
            "converged": False,
        }
    elapsed = time.monotonic() - t0

    header, rows = trajectory_rows(trajectory, cfg.task)
    out_dir = Path(cfg.out_dir)
    csv_path = write_csv(out_dir / f"{cfg.run_id}.csv", header, rows)
    record = RunRecord(
        run_id=cfg.run_id,
        config=asdict(cfg),
        csv_path=str(csv_path),
        summary={"diverged": diverged, "init_attempts": attempts, "runtime_s": elapsed, **summary_tail},
    )
    record.write(out_dir / f"{cfg.run_id}.json")
    return record


def run_matfac_sweep(cfg: MatfacSweepConfig, jobs: int = 1) -> list[RunRecord]:
    return _map_jobs(run_matfac, cfg.expand(), jobs)


def _map_jobs(fn, items, jobs):
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# determinant-sign Monte Carlo


def _det_batch(mats: np.ndarray) -> np.ndarray:
    if mats.shape[-1] == 2:
        return mats[:, 0, 0] * mats[:, 1, 1] - mats[:, 0, 1] * mats[:, 1, 0]
    return np.linalg.det(mats)


def run_detsign(n_samples: int, distributions: Sequence[str], seed: int, out=None):
    """Empirical P(det > 0) per distribution, with a 3-sigma binomial
    interval.  Distributions: "gaussian" (one square Gaussian matrix),
    "gaussian-product-L" (product of L of them), "identity" (sanity
    path, P = 1).  Append "@d" for a dimension other than 2.
    """
    if n_samples < 1000:
        raise ValueError("need at least 1000 samples for a meaningful estimate")
    rows = []
    for k, name in enumerate(distributions):
        base, _, dim_part = name.partition("@")
        dim = int(dim_part) if dim_part else 2
        gen = stream(seed, 23, k)
        if base == "identity":
            p = 1.0
        else:
            if base == "gaussian":
                factors = 1
            elif base.startswith("gaussian-product-"):
                factors = int(base.rsplit("-", 1)[1])
            else:
                raise ValueError(f"unknown distribution {name!r}")
            prod = None
            for _ in range(factors):
                draw = gen.standard_normal((n_samples, dim, dim))
                prod = draw if prod is None else draw @ prod
            p = float(np.mean(_det_batch(prod) > 0))
        half = 3.0 * math.sqrt(max(p * (1.0 - p), 1e-12) / n_samples)
        rows.append(
            {"distribution": name, "n": n_samples, "p_det_pos": p, "ci_low": p - half, "ci_high": p + half}
        )
    if out is not None:
        write_csv(
            out,
            ["distribution", "n", "p_det_pos", "ci_low", "ci_high"],
            [[r["distribution"], r["n"], r["p_det_pos"], r["ci_low"], r["ci_high"]] for r in rows],
        )
    return rows


# ---------------------------------------------------------------------------
# tensor sweep

TENFAC_COLUMNS = [
    "row",
    "method",
    "n_obs",
    "init_std",
    "seed",
    "recon_error",
    "est_rank",
    "recon_error_q25",
    "recon_error_q75",
    "est_rank_q25",
    "est_rank_q75",
]


@dataclass(frozen=True)
class _TenfacCell:
    cfg: TenfacSweepConfig
    n_obs: int
    init_std: float
    seed: int


def _run_tenfac_cell(cell: _TenfacCell):
    cfg = cell.cfg
    truth = tenfac.gen_ground_truth(cfg.dims, cfg.gt_rank, cfg.gt_seed)
    task = tenfac.sample_observations(truth, cell.n_obs, cfg.obs_seed)
    terms = cfg.terms if cfg.terms is not None else tenfac.default_terms(cfg.dims)
    try:
        result = tenfac.train_cp(
            task,
            terms,
            cell.init_std,
            cell.seed,
            mse_threshold=cfg.mse_threshold,
            max_iters=cfg.max_iters,
        )
        learned = tenfac.cp_compose(result.model)
        err = float(np.linalg.norm(learned - truth))
        rank = tenfac.estimate_rank(learned, threshold=cfg.mse_threshold)
        return ["cell", "tf", cell.n_obs, cell.init_std, cell.seed, err, rank, "", "", "", ""]
    except matfac.DivergenceError:
        return ["cell", "tf", cell.n_obs, cell.init_std, cell.seed, "", "", "", "", "", ""]


def _quartiles(values):
    q25, q50, q75 = np.percentile(np.asarray(values, dtype=float), [25, 50, 75])
    return float(q25), float(q50), float(q75)


def run_tenfac_sweep(cfg: TenfacSweepConfig, jobs: int = 1) -> Path:
    """Run the observation-count sweep and write one CSV holding per-cell
    rows plus median/IQR aggregate rows (merged by cell key, so job
    order never changes the output).

    The "linear" baseline keeps observed entries and zeros elsewhere;
    its reconstruction error has the closed form
    sqrt(sum of squared unobserved truth entries).  Its estimated rank
    is only computed when ``baseline_rank`` is set (a full ALS rank
    search on a near-full-rank tensor is slow and rarely wanted).
    """
    truth = tenfac.gen_ground_truth(cfg.dims, cfg.gt_rank, cfg.gt_seed)
    cells = [
        _TenfacCell(cfg, n, std, seed)
        for n in cfg.n_obs
        for std in cfg.init_stds
        for seed in cfg.seeds
    ]
    rows = _map_jobs(_run_tenfac_cell, cells, jobs)

    if cfg.baseline:
        for n in cfg.n_obs:
            task = tenfac.sample_observations(truth, n, cfg.obs_seed)
            base = np.zeros(cfg.dims)
            for idx, v in task.observations.items():
                base[idx] = v
            err = float(np.linalg.norm(base - truth))
            rank = tenfac.estimate_rank(base, threshold=cfg.mse_threshold) if cfg.baseline_rank else ""
            rows.append(["cell", "linear", n, "", "", err, rank, "", "", "", ""])

    # aggregate per (method, n_obs, init_std), order-independent
    groups: dict[tuple, list] = {}
    for row in rows:
        if row[0] != "cell" or row[5] == "":
            continue
        groups.setdefault((row[1], row[2], row[3]), []).append(row)
    for (method, n, std) in sorted(groups, key=str):
        members = groups[(method, n, std)]
        e25, e50, e75 = _quartiles([r[5] for r in members])
        ranks = [r[6] for r in members if r[6] != ""]
        if ranks:
            r25, r50, r75 = _quartiles(ranks)
            rows.append(["median_iqr", method, n, std, "", e50, r50, e25, e75, r25, r75])
        else:
            rows.append(["median_iqr", method, n, std, "", e50, "", e25, e75, "", ""])

    out = Path(cfg.out_dir) / f"tenfac-{cfg.run_id}.csv"
    return write_csv(out, TENFAC_COLUMNS, rows)


# ---------------------------------------------------------------------------
# dispatch


def run_config(cfg, jobs: int = 1):
    if isinstance(cfg, MatfacRunConfig):
        return run_matfac(cfg)
    if isinstance(cfg, MatfacSweepConfig):
        return run_matfac_sweep(cfg, jobs=jobs)
    if isinstance(cfg, DetSignConfig):
        dists = ["gaussian", f"gaussian-product-{cfg.depth}", "identity"]
        if cfg.dim != 2:
            dists = [f"{d}@{cfg.dim}" for d in dists]
        return run_detsign(cfg.samples, dists, cfg.seed, out=cfg.out)
    if isinstance(cfg, TenfacSweepConfig):
        return run_tenfac_sweep(cfg, jobs=jobs)
    if isinstance(cfg, PlotConfig):
        return svgplot.emit_plot(cfg.inputs, cfg.style, cfg.out, title=cfg.title)
    raise TypeError(f"cannot run config of type {type(cfg).__name__}")
