"""Experiment orchestration: repeated runs, bias studies, rule comparisons, the cleaning demo."""
from __future__ import annotations

import csv
import json
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ..adafbio import ScheduleConfig
from ..federation import RunTrace, run
from ..hypergrad import NeumannConfig, bias_bound, empirical_bias
from ..problems import (
    HyperCleanSpec,
    MetaLearnSpec,
    flip_labels,
    make_hyperclean_problem,
    make_logistic_data,
    make_metalearn_problem,
    make_quadratic_problem,
    partition_dataset,
    random_quadratic,
    random_tasks,
    sigmoid,
)
from ..rng import REPETITION, derive_seed, stream
from .config import ConfigValueError, ExperimentConfig

PROPERTY_NOTE = ("experiment acceptance is property-based: there are no published reference numbers "
                 "to reproduce")
BIAS_COLUMNS = ("K", "empirical_bias", "bound", "stderr", "num_samples")


def worker_count(default: int = 1) -> int:
    """Thread cap from ``FEDBILEVEL_THREADS`` (unset or invalid -> ``default``)."""
    raw = os.environ.get("FEDBILEVEL_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        return default
    return max(1, n)


def repetition_seed(root_seed: int, rep: int) -> int:
    return derive_seed(root_seed, REPETITION, rep)


# ---------------------------------------------------------------------------
# problem construction


@dataclass
class HyperCleanSetup:
    problem: object
    test: object
    corrupted: np.ndarray  # over the upper variable's coordinates


def build_hyperclean(params: dict) -> HyperCleanSetup:
    P = params
    n_tr, n_va, n_te = P["n_train"], P["n_val"], P["n_test"]
    pool, _ = make_logistic_data(n_tr + n_va + n_te, P["dim"], seed=P["seed"], margin=P["margin"])
    train = pool.subset(np.arange(n_tr))
    val = pool.subset(np.arange(n_tr, n_tr + n_va))
    test = pool.subset(np.arange(n_tr + n_va, n_tr + n_va + n_te))
    train, mask = flip_labels(train, P["corruption_rate"], seed=P["seed"] + 1)
    parts = partition_dataset(train, P["M"], P["partition"], seed=P["seed"] + 2, alpha=P["alpha"])
    vparts = partition_dataset(val, P["M"], "iid", seed=P["seed"] + 3)
    # train.index holds positions in ``pool``; the first n_tr of them are the train rows
    corrupted = [mask[part.index] for part in parts]
    spec = HyperCleanSpec(parts, vparts, nu=P["nu"], corruption_rate=P["corruption_rate"], corrupted=corrupted,
                          batch_size=P["batch_size"])
    return HyperCleanSetup(make_hyperclean_problem(spec), test, np.concatenate(corrupted))


def build_problem(cfg: ExperimentConfig):
    P = cfg.problem_params
    if cfg.problem == "quadratic":
        kw = {k: v for k, v in P.items()}
        return make_quadratic_problem(random_quadratic(**kw))
    if cfg.problem == "metalearn":
        train, test = random_tasks(M=P["M"], d=P["d"], task_dim=P["task_dim"], n_train=P["n_train"],
                                   n_test=P["n_test"], noise=P["noise"], seed=P["seed"])
        spec = MetaLearnSpec(train, test, dim_shared=P["d"], coupling=P["coupling"], reg=P["reg"],
                             upper_reg=P["upper_reg"], sigma=P["sigma"], batch_size=P["batch_size"])
        return make_metalearn_problem(spec)
    if cfg.problem == "hyperclean":
        return build_hyperclean(P).problem
    raise ConfigValueError(f"unknown problem {cfg.problem!r}")


def _metric(trace: RunTrace):
    """Per-iteration gradient norm: the true one when available, else ``||w_bar||``."""
    g = trace.column("grad_norm_true")
    if np.all(np.isnan(g)):
        return "grad_norm_wbar", trace.column("grad_norm_wbar")
    return "grad_norm_true", g


def _prepare_out_dir(path):
    os.makedirs(path, exist_ok=True)
    # fail before any computation if the directory is not writable
    with tempfile.NamedTemporaryFile(dir=path, prefix=".probe", delete=True):
        pass


def _dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# repeated runs


@dataclass
class ExperimentResult:
    out_dir: str
    traces: list
    seeds: list
    summary: dict
    files: dict = field(default_factory=dict)


def run_experiment(cfg: ExperimentConfig, out_dir=None, workers: int | None = None,
                   problem=None) -> ExperimentResult:
    """Run ``cfg.repetitions`` seeded runs and write traces, a summary and plot data.

    Everything but ``timing.json`` is byte-identical across re-runs.
    """
    out = cfg.out_dir if out_dir is None else os.fspath(out_dir)
    _prepare_out_dir(out)
    problem = build_problem(cfg) if problem is None else problem
    seeds = [repetition_seed(cfg.root_seed, r) for r in range(cfg.repetitions)]
    workers = worker_count() if workers is None else workers

    def one(r):
        return run(problem, cfg.schedule, cfg.rule, seeds[r])

    if workers > 1 and cfg.repetitions > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            traces = list(ex.map(one, range(cfg.repetitions)))
    else:
        traces = [one(r) for r in range(cfg.repetitions)]

    files = {"traces": [], "jsonl": [], "reports": []}
    reps = []
    for r, (seed, tr) in enumerate(zip(seeds, traces)):
        stem = os.path.join(out, f"rep{r:03d}")
        tr.to_csv(stem + "_trace.csv")
        tr.to_jsonl(stem + "_trace.jsonl")
        rep = tr.report()
        rep.pop("wall_time_s")
        rep["seed"] = seed
        rep["repetition"] = r
        _dump_json(rep, stem + "_report.json")
        files["traces"].append(stem + "_trace.csv")
        files["jsonl"].append(stem + "_trace.jsonl")
        files["reports"].append(stem + "_report.json")
        name, m = _metric(tr)
        reps.append({"repetition": r, "seed": seed, "trace": os.path.basename(stem + "_trace.csv"),
                     "avg_grad_norm": _nanmean(m), "final_grad_norm": _last(m), "metric": name,
                     "samples_total": tr.samples_total, "comm_rounds": tr.comm_rounds,
                     "selected_t": tr.output.index + 1})

    name, _ = _metric(traces[0])
    M = np.array([_metric(t)[1] for t in traces])
    mean, std = M.mean(axis=0), M.std(axis=0)
    plot = os.path.join(out, "plot.csv")
    with open(plot, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["t", "mean_grad_norm", "std_grad_norm", "band_lo", "band_hi", "repetitions"])
        for i in range(M.shape[1]):
            wr.writerow([i + 1, repr(float(mean[i])), repr(float(std[i])), repr(float(mean[i] - std[i])),
                         repr(float(mean[i] + std[i])), M.shape[0]])
    files["plot"] = plot

    summary = {
        "note": PROPERTY_NOTE,
        "metric": name,
        "config": cfg.to_dict(),
        "repetitions": reps,
        "avg_grad_norm": float(np.mean(M)) if not np.any(np.isnan(M)) else _nanmean(M.ravel()),
        "final_grad_norm_mean": float(np.mean(M[:, -1])),
        "final_grad_norm_std": float(np.std(M[:, -1])),
        "plot_std": "population standard deviation over repetitions (ddof=0)",
    }
    spath = os.path.join(out, "summary.json")
    _dump_json(summary, spath)
    files["summary"] = spath
    _dump_json({"wall_time_s": [t.wall_time for t in traces]}, os.path.join(out, "timing.json"))
    return ExperimentResult(out, traces, seeds, summary, files)


def _nanmean(a):
    a = np.asarray(a, dtype=float)
    return None if np.all(np.isnan(a)) else float(np.nanmean(a))


def _last(a):
    v = float(np.asarray(a)[-1])
    return None if np.isnan(v) else v


# ---------------------------------------------------------------------------
# bias study


def bias_study(cfg: ExperimentConfig, out_path=None, problem=None) -> list[dict]:
    """Empirical Neumann bias against its bound for each ``K`` in ``cfg.bias_study``."""
    problem = build_problem(cfg) if problem is None else problem
    if not getattr(problem, "has_exact", False):
        raise ConfigValueError("bias-study needs a problem with exact oracles (quadratic or metalearn)")
    b = cfg.bias_study
    client = b["client"]
    if not 0 <= client < problem.num_clients:
        raise ConfigValueError(f"[bias_study].client={client} out of range")
    rng = stream(cfg.root_seed, REPETITION, 1 << 20)
    x = rng.standard_normal(problem.dim_upper)
    y = rng.standard_normal(problem.dim_lower)
    rows = []
    for K in b["K_values"]:
        nc = NeumannConfig(K=K, step=cfg.schedule.neumann_step, seed=derive_seed(cfg.root_seed, REPETITION, K))
        n = b["num_samples"]
        bias, se = empirical_bias(problem, client, x, y, nc, num_samples=n, enumerate_k=b["enumerate"],
                                  return_stderr=True)
        rows.append({"K": K, "empirical_bias": bias, "bound": bias_bound(problem.constants, K), "stderr": se,
                     "num_samples": n})
    if out_path is not None:
        os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
        with open(out_path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(BIAS_COLUMNS)
            for r in rows:
                wr.writerow([r["K"], repr(r["empirical_bias"]), repr(r["bound"]), repr(r["stderr"]), r["num_samples"]])
    return rows


# ---------------------------------------------------------------------------
# rule comparison


@dataclass
class ComparisonReport:
    variants: list[str]
    metric: str
    per_variant: dict
    paired_differences: dict
    ranking: list[str]
    seeds: list[int]
    config: dict
    note: str = ("ordering only: adaptive and identity matrices carry the same convergence rate, "
                 "so no winner is claimed")

    def to_dict(self):
        return {k: getattr(self, k) for k in ("variants", "metric", "per_variant", "paired_differences", "ranking",
                                              "seeds", "config", "note")}


def compare_variants(cfg: ExperimentConfig, variants, problem=None, workers: int | None = None) -> ComparisonReport:
    """Run each variant on the same problem with the same repetition seeds.

    A variant is a rule name or a ``(rule, ScheduleConfig)`` pair; all must share ``T``.
    """
    if len(variants) < 2:
        raise ConfigValueError("compare needs at least two variants")
    specs = []
    for v in variants:
        rule, sched = (v, cfg.schedule) if isinstance(v, str) else (v[0], v[1])
        if not isinstance(sched, ScheduleConfig):
            raise ConfigValueError(f"variant {v!r} has no schedule")
        specs.append((rule, sched))
    Ts = {s.T for _, s in specs}
    if len(Ts) != 1:
        raise ConfigValueError(f"variants disagree on T: {sorted(Ts)}")
    problem = build_problem(cfg) if problem is None else problem
    seeds = [repetition_seed(cfg.root_seed, r) for r in range(cfg.repetitions)]
    labels = [r if [x for x, _ in specs].count(r) == 1 else f"{r}#{i}" for i, (r, _) in enumerate(specs)]
    workers = worker_count() if workers is None else workers
    jobs = [(i, r) for i in range(len(specs)) for r in range(len(seeds))]

    def one(job):
        i, r = job
        rule, sched = specs[i]
        return run(problem, sched, rule, seeds[r])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            traces = list(ex.map(one, jobs))
    else:
        traces = [one(j) for j in jobs]
    by = {(i, r): tr for (i, r), tr in zip(jobs, traces)}
    metric = _metric(traces[0])[0]
    vals = {}
    per = {}
    for i, lab in enumerate(labels):
        runs = [by[i, r] for r in range(len(seeds))]
        avg = np.array([np.nanmean(_metric(t)[1]) for t in runs])
        fin = np.array([_metric(t)[1][-1] for t in runs])
        vals[lab] = avg
        per[lab] = {
            "rule": specs[i][0],
            "mean_avg_grad_norm": float(avg.mean()),
            "std_avg_grad_norm": float(avg.std()),
            "final_grad_norm": fin.tolist(),
            "samples_total": runs[0].samples_total,
            "comm_rounds": runs[0].comm_rounds,
            "schedule": runs[0].config,
        }
    base = labels[0]
    diffs = {}
    for lab in labels[1:]:
        d = vals[lab] - vals[base]
        diffs[f"{lab} - {base}"] = {"per_seed": d.tolist(), "mean": float(d.mean()), "std": float(d.std())}
    ranking = sorted(labels, key=lambda lab: (per[lab]["mean_avg_grad_norm"], labels.index(lab)))
    return ComparisonReport(labels, metric, per, diffs, ranking, seeds, cfg.to_dict())


# ---------------------------------------------------------------------------
# hyper-cleaning demo


def _accuracy(ds, y):
    return float(np.mean((ds.features @ y > 0) == (ds.labels > 0.5)))


def hyperclean_demo(cfg: ExperimentConfig, workers: int = 1) -> dict:
    """Train sample weights with the federated solver and compare against uniform weights.

    The cleaned model is the lower-level solution at the final averaged iterate;
    the baseline is the lower-level solution with all weights equal.
    """
    if cfg.problem != "hyperclean":
        raise ConfigValueError("clean-demo needs problem = 'hyperclean'")
    setup = build_hyperclean(cfg.problem_params)
    prob = setup.problem
    tr = run(prob, cfg.schedule, cfg.rule, cfg.root_seed, workers=workers, metrics=False)
    x_final = tr.xbars[-1]
    x_sel = tr.output.x
    y_clean = prob.solve_lower(x_final)
    y_sel = prob.solve_lower(x_sel)
    y_base = prob.solve_lower(np.zeros(prob.dim_upper))
    w = sigmoid(x_final)
    corr = setup.corrupted
    rep = {
        "note": PROPERTY_NOTE,
        "n_train": int(prob.dim_upper),
        "n_corrupted": int(corr.sum()),
        "mean_weight_corrupted": float(w[corr].mean()) if corr.any() else None,
        "mean_weight_clean": float(w[~corr].mean()) if (~corr).any() else None,
        "test_accuracy_cleaned": _accuracy(setup.test, y_clean),
        "test_accuracy_baseline": _accuracy(setup.test, y_base),
        "test_accuracy_selected_output": _accuracy(setup.test, y_sel),
        "selected_t": tr.output.index + 1,
        "baseline": "uniform weights, lower-level training only",
        "cleaned_model": "lower-level solution at the final averaged iterate",
        "samples_total": tr.samples_total,
        "comm_rounds": tr.comm_rounds,
        "config": cfg.to_dict(),
    }
    if not corr.any():
        rep["vacuous"] = "no corrupted samples: the corrupted-vs-clean weight comparison is empty"
    return rep
