"""Simulated client/server loop with deterministic aggregation and accounting.

Row ``t`` of a :class:`RunTrace` holds metrics at the averaged iterate
``x_bar_t`` *before* iteration ``t`` updates it, and the sample and round
counters accumulated *through* iteration ``t``.  The first synchronisation
happens at ``t = q``.
"""
from __future__ import annotations

import csv
import io
import json
import math
import time
from collections.abc import Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .adafbio import (
    AdaptiveState,
    ClientState,
    ContractViolation,
    NumericalError,
    ScheduleConfig,
    alpha_next,
    beta_next,
    eta,
    init_estimators,
    local_step,
    select_output,
    storm_update_v,
    storm_update_w,
    update_adaptive,
)
from .hypergrad import HypergradSample, draw_hyper, hypergrad_from_draw
from .problems.base import InvalidArgument
from .rng import CLIENT, stream

TRACE_COLUMNS = ("t", "eta", "grad_norm_true", "grad_norm_wbar", "lower_gap", "tracking_err_w",
                 "samples_total", "comm_rounds")
CONVENTION = ("first sync at t=q (t mod q == 0); row t holds metrics at x_bar_t before iteration t "
              "and counters through iteration t")


def aggregate(vectors):
    """Mean over clients, summed in ascending client order.

    ``vectors`` is a sequence indexed by client or a mapping ``client -> vector``.
    """
    if isinstance(vectors, Mapping):
        vectors = [vectors[k] for k in sorted(vectors)]
    if len(vectors) == 0:
        raise InvalidArgument("nothing to aggregate")
    arrs = [np.asarray(v, dtype=float) for v in vectors]
    shape = arrs[0].shape
    acc = arrs[0].copy()
    for a in arrs[1:]:
        if a.shape != shape:
            raise InvalidArgument(f"dimension mismatch in aggregate: {a.shape} vs {shape}")
        acc += a
    return acc / len(arrs)


@dataclass
class ServerState:
    x_bar: np.ndarray
    y_bar: np.ndarray
    v_bar: np.ndarray
    w_bar: np.ndarray
    adapt: AdaptiveState
    comm_rounds: int = 0
    t: int = 0


def _varrho(cfg: ScheduleConfig, t: int, M: int):
    if cfg.varrho == "track_beta":
        return 1.0 - beta_next(max(t - 1, 0), cfg, M)
    return cfg.varrho


def server_sync(server: ServerState, clients: list[ClientState], cfg: ScheduleConfig):
    """Average, refresh the matrices, step the averages and broadcast; returns ``(server, clients)``.

    ``server.t`` must be the current iteration and a multiple of ``q``.
    """
    t = server.t
    if t < 1 or t % cfg.q != 0:
        raise ContractViolation(f"server_sync called at t={t}, which is not a multiple of q={cfg.q}")
    M = len(clients)
    v_bar = aggregate([c.v for c in clients])
    w_bar = aggregate([c.w for c in clients])
    y_bar = aggregate([c.y for c in clients])
    x_bar = aggregate([c.x for c in clients])
    adapt = update_adaptive(server.adapt, w_bar, v_bar, cfg, _varrho(cfg, t, M))
    e = eta(t, cfg, M)
    y_hat = y_bar - cfg.lam * v_bar / adapt.B_scalar
    x_hat = x_bar - cfg.gamma * (w_bar / adapt.A_diag)
    x_new = x_bar + e * (x_hat - x_bar)
    y_new = y_bar + e * (y_hat - y_bar)
    out = [replace(c, x=x_new.copy(), y=y_new.copy()) for c in clients]
    return ServerState(x_new, y_new, v_bar, w_bar, adapt, server.comm_rounds + 1, t), out


@dataclass
class RunTrace:
    rows: dict = field(default_factory=lambda: {c: [] for c in TRACE_COLUMNS})
    xbars: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    rule: str = "norm_scalar"
    root_seed: int = 0
    num_clients: int = 1
    batch_size: int = 1
    q_was_set: bool = True
    output: object = None
    wall_time: float = float("nan")
    failed_at: int | None = None
    # filled only with record_iterates=True
    iterates: dict | None = None

    def __len__(self):
        return len(self.rows["t"])

    def column(self, name):
        """Column as a float array; absent entries become NaN."""
        return np.array([np.nan if v is None else v for v in self.rows[name]], dtype=float)

    @property
    def T(self):
        return self.config.get("T", len(self))

    @property
    def q(self):
        return self.config.get("q")

    @property
    def K(self):
        return self.config.get("K")

    @property
    def samples_total(self):
        return self.rows["samples_total"][-1] if len(self) else 0

    @property
    def comm_rounds(self):
        return self.rows["comm_rounds"][-1] if len(self) else 0

    def records(self):
        for i in range(len(self)):
            yield {c: self.rows[c][i] for c in TRACE_COLUMNS}

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(TRACE_COLUMNS)
        for rec in self.records():
            wr.writerow(["" if rec[c] is None else _fmt(rec[c]) for c in TRACE_COLUMNS])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def to_jsonl(self, path=None) -> str:
        text = "".join(json.dumps(r) + "\n" for r in self.records())
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @staticmethod
    def read_csv(path) -> dict:
        """Columns of a trace CSV as float arrays (NaN where absent)."""
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return {c: np.array([float(r[c]) if r[c] != "" else np.nan for r in rows]) for c in TRACE_COLUMNS}

    def report(self, cfg=None) -> dict:
        acc = accounting(self, cfg)
        out = self.output
        gn = self.column("grad_norm_true")
        return {
            "convention": CONVENTION,
            "rule": self.rule,
            "root_seed": self.root_seed,
            "config": self.config,
            "num_clients": self.num_clients,
            "iterations": len(self),
            "samples_total": self.samples_total,
            "comm_rounds": self.comm_rounds,
            "accounting": acc,
            "final_grad_norm_true": None if not len(self) or np.isnan(gn[-1]) else float(gn[-1]),
            "avg_grad_norm": None if np.all(np.isnan(gn)) else float(np.nanmean(gn)),
            "selected_output": None if out is None else {
                "index": out.index,
                "t": out.index + 1,
                "x": out.x.tolist(),
            },
            "diagnostic_argmin_grad_norm": None if out is None or out.argmin_index is None else {
                "t": out.argmin_index + 1,
                "note": "diagnostic only; the algorithm's output is the uniform draw above",
            },
            "failed_at": self.failed_at,
            "wall_time_s": self.wall_time,
        }


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def accounting(trace: RunTrace, cfg: ScheduleConfig | None = None) -> dict:
    T = len(trace)
    q = cfg.q if cfg is not None and cfg.q is not None else trace.q
    K = cfg.K if cfg is not None and cfg.K is not None else trace.K
    M, B = trace.num_clients, trace.batch_size
    exp_samples = M * B * (q * (K + 2) + (K + 2) * T)
    exp_rounds = T // q
    flags = []
    if trace.samples_total != exp_samples:
        flags.append(f"samples_total {trace.samples_total} != M(q(K+2)+(K+2)T) = {exp_samples}")
    if trace.comm_rounds != exp_rounds:
        flags.append(f"comm_rounds {trace.comm_rounds} != floor(T/q) = {exp_rounds}")
    rec_q = recommended_q(T)
    rep = {
        "T": T,
        "q": q,
        "K": K,
        "expected_samples": exp_samples,
        "counted_samples": trace.samples_total,
        "expected_comm_rounds": exp_rounds,
        "counted_comm_rounds": trace.comm_rounds,
        "recommended_q": rec_q,
        "discrepancies": flags,
        "ok": not flags,
    }
    if not trace.q_was_set:
        rep["note"] = f"q was unset and defaulted to ceil(T^(1/3)) = {rec_q}"
    return rep


def recommended_q(T: int) -> int:
    return max(1, math.ceil(round(T ** (1 / 3), 12)))


class _Metrics:
    def __init__(self, problem):
        self.p = problem
        self.exact = problem.has_exact

    def __call__(self, xbar, ybar, wbar):
        gw = float(np.linalg.norm(wbar))
        if not self.exact:
            return None, gw, None, None
        p = self.p
        g = float(np.linalg.norm(p.exact_hypergradient(xbar)))
        gap = float(np.linalg.norm(ybar - p.exact_lower_solution(xbar)))
        target = aggregate([p.exact_indirect_grad(m, xbar, ybar) for m in range(p.num_clients)])
        return g, gw, gap, float(np.linalg.norm(wbar - target))


def _client_iter(problem, m, old: ClientState, new: ClientState, t, root_seed, K, step, alpha, beta):
    """Sample draws and STORM updates for one client at iteration ``t``."""
    rng = stream(root_seed, CLIENT, m, t)
    zeta = problem.draw(m, rng, "g")
    g_new = problem.grad_y_g(m, new.x, new.y, zeta)
    g_old = problem.grad_y_g(m, old.x, old.y, zeta)
    d = draw_hyper(problem, m, rng, K, seed=(m, t))
    h_new, h_old = hypergrad_from_draw(problem, m, [(new.x, new.y), (old.x, old.y)], d, K, step)
    v = storm_update_v(old.v, g_new, g_old, alpha)
    w = storm_update_w(old.w, HypergradSample(h_new, K + 1, d.k, d.seed),
                       HypergradSample(h_old, K + 1, d.k, d.seed), beta)
    return ClientState(new.x, new.y, v, w, old.samples_used + (K + 2) * problem.batch_size)


def run(problem, cfg: ScheduleConfig, rule: str = "norm_scalar", root_seed: int = 0, x1=None, y1=None,
        workers: int = 1, record_iterates: bool = False, metrics: bool = True) -> RunTrace:
    """Run the federated algorithm for ``cfg.T`` iterations.

    ``workers > 1`` advances clients on a thread pool; results are gathered in
    client order so the trace is identical to the sequential one.
    """
    M = problem.num_clients
    q_was_set = cfg.q is not None
    cfg = cfg.resolved(M, problem.constants)
    K, q, T = int(cfg.K), int(cfg.q), int(cfg.T)
    step = 1.0 / problem.constants.L_g if cfg.neumann_step is None else float(cfg.neumann_step)
    if not 0 < step <= (1 + 1e-12) / problem.constants.L_g:
        raise InvalidArgument(f"neumann_step {step} outside (0, 1/L_g]")
    d, p = problem.dim_upper, problem.dim_lower
    x1 = np.zeros(d) if x1 is None else np.asarray(x1, dtype=float).copy()
    y1 = np.zeros(p) if y1 is None else np.asarray(y1, dtype=float).copy()
    x1, y1 = problem.check_point(x1, y1)

    trace = RunTrace(config=cfg.to_dict(), rule=rule, root_seed=int(root_seed), num_clients=M,
                     batch_size=problem.batch_size, q_was_set=q_was_set)
    if record_iterates:
        trace.iterates = {k: [] for k in ("x", "y", "v", "w", "A_diag", "B_scalar", "sync", "eta")}
    t0 = time.perf_counter()

    clients = []
    for m in range(M):
        v, w, s = init_estimators(problem, m, x1, y1, q, K, stream(root_seed, CLIENT, m, 0), step)
        clients.append(ClientState(x1.copy(), y1.copy(), v, w, s))
    samples = sum(c.samples_used for c in clients)
    adapt = AdaptiveState.initial(rule, d, p, cfg.rho)
    # A_1, B_1 from the initial averages (a_0 = b_0 = 0)
    adapt = update_adaptive(adapt, aggregate([c.w for c in clients]), aggregate([c.v for c in clients]),
                            cfg, _varrho(cfg, 0, M))
    server = ServerState(x1.copy(), y1.copy(), aggregate([c.v for c in clients]),
                         aggregate([c.w for c in clients]), adapt)
    metric = _Metrics(problem) if metrics else None
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    rows = trace.rows
    try:
        for t in range(1, T + 1):
            xbar = aggregate([c.x for c in clients])
            ybar = aggregate([c.y for c in clients])
            wbar = aggregate([c.w for c in clients])
            trace.xbars.append(xbar)
            e = eta(t, cfg, M)
            sync = t % q == 0
            if record_iterates:
                it = trace.iterates
                it["x"].append(np.array([c.x for c in clients]))
                it["y"].append(np.array([c.y for c in clients]))
                it["v"].append(np.array([c.v for c in clients]))
                it["w"].append(np.array([c.w for c in clients]))
                it["sync"].append(sync)
                it["eta"].append(e)
            if metric is not None:
                g, gw, gap, trk = metric(xbar, ybar, wbar)
            else:
                g, gw, gap, trk = None, float(np.linalg.norm(wbar)), None, None

            if sync:
                server = replace(server, t=t)
                server, moved = server_sync(server, clients, cfg)
            else:
                moved = [local_step(c, server.adapt, e, cfg) for c in clients]
            if record_iterates:
                trace.iterates["A_diag"].append(server.adapt.A_diag.copy())
                trace.iterates["B_scalar"].append(server.adapt.B_scalar)

            a, b = alpha_next(t, cfg, M), beta_next(t, cfg, M)
            args = [(problem, m, clients[m], moved[m], t, root_seed, K, step, a, b) for m in range(M)]
            if pool is None:
                clients = [_client_iter(*x) for x in args]
            else:
                clients = list(pool.map(lambda x: _client_iter(*x), args))
            for c in clients:
                c.check_finite(t)
            samples += M * (K + 2) * problem.batch_size

            rows["t"].append(t)
            rows["eta"].append(e)
            rows["grad_norm_true"].append(g)
            rows["grad_norm_wbar"].append(gw)
            rows["lower_gap"].append(gap)
            rows["tracking_err_w"].append(trk)
            rows["samples_total"].append(samples)
            rows["comm_rounds"].append(server.comm_rounds)
            if g is not None and not math.isfinite(g):
                raise NumericalError("true gradient norm is not finite", t)
    except NumericalError as exc:
        trace.failed_at = exc.iteration
        trace.wall_time = time.perf_counter() - t0
        exc.trace = trace
        raise
    finally:
        if pool is not None:
            pool.shutdown()
    gn = trace.column("grad_norm_true")
    trace.output = select_output(trace.xbars, root_seed, None if np.all(np.isnan(gn)) else gn)
    trace.wall_time = time.perf_counter() - t0
    return trace
