"""Experiment orchestration: build problems, run training, persist CSV traces."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, streams
from .algorithms import DivergenceError, RoundConfig, RoundRecord, objective_metrics, train
from .channel import ChannelConfig, sigma_from_snr
from .config import ExperimentConfig, with_overrides
from .data import PartitionSpec, load_mnist, logistic_problem, partition_label_based, synth_quadratic
from .objectives import AssumptionConstants, LogisticProblem, estimate_constants, quadratic_optimum
from .oracles import (DisjointControlSpec, NoisySgdSpec, example1_fixed_point, example1_simulate,
                      lb_rhs, simulate_noisy_sgd)

log = logging.getLogger(__name__)

TRACE_SCHEMA_VERSION = "1"
TRACE_COLUMNS = (
    "t", "train_loss", "grad_norm2", "test_accuracy", "eta", "beta", "taus", "powers",
    "clip_count", "violations", "clamp_count", "noise_norm2", "pre_noise_digest",
)


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ";".join(_fmt(x) for x in v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def trace_row(rec: RoundRecord) -> list[str]:
    return [_fmt(getattr(rec, c)) for c in TRACE_COLUMNS]


def read_trace(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def evaluate(problem: LogisticProblem, x, test_set) -> dict:
    """Cross-entropy loss and top-1 accuracy of ``x`` on ``test_set``."""
    if len(test_set.labels) == 0:
        raise ValueError("empty test set")
    z = problem.logits(test_set.features, x)
    z -= z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    n = len(test_set.labels)
    loss = float(np.mean(lse - z[np.arange(n), test_set.labels]))
    acc = float(np.mean(z.argmax(axis=1) == test_set.labels))
    return {"loss": loss, "accuracy": acc}


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True, timeout=10)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


@dataclass
class Setup:
    problem: object
    evaluate: object = None
    test_set: object = None
    constants: AssumptionConstants | None = None
    F_star: float | None = None


_MNIST_CACHE: dict = {}


def _mnist(root: Path):
    key = str(root.resolve())
    if key not in _MNIST_CACHE:
        _MNIST_CACHE[key] = (load_mnist(root, "train"), load_mnist(root, "test"))
    return _MNIST_CACHE[key]


def build_problem(cfg: ExperimentConfig) -> Setup:
    if cfg.task == "mnist_logistic":
        train_set, test_set = _mnist(cfg.resolved_data_dir())
        spec = PartitionSpec(m=cfg.clients, p=cfg.non_iid_p, balance=cfg.balance,
                             gamma=cfg.dirichlet_gamma, seed=cfg.seed)
        problem = logistic_problem(train_set, partition_label_based(train_set, spec), lam=cfg.lam)
        consts = estimate_constants(problem, batch_size=cfg.batch_size,
                                    rng=streams.stream(cfg.seed, streams.PROBE))
        return Setup(problem, lambda x: evaluate(problem, x, test_set)["accuracy"], test_set, consts)
    if cfg.task == "synth_quadratic":
        alpha = None
        if cfg.balance == "dirichlet":
            alpha = streams.stream(cfg.seed, streams.PARTITION).dirichlet(
                np.full(cfg.clients, cfg.dirichlet_gamma))
            alpha = alpha / alpha.sum()
        q = synth_quadratic(cfg.clients, cfg.dim, cfg.heterogeneity, cfg.seed,
                            sigma=cfg.grad_sigma, alpha=alpha)
        x_star = quadratic_optimum(q)
        return Setup(q, constants=estimate_constants(q), F_star=q.global_value(x_star))
    raise ValueError(f"task {cfg.task!r} does not train a model")


def round_config(cfg: ExperimentConfig, constants: AssumptionConstants | None) -> RoundConfig:
    G = cfg.G if cfg.G > 0 else (constants.G if constants else None)
    return RoundConfig(rounds=cfg.rounds, eta=cfg.eta, eta_schedule=cfg.eta_schedule,
                       beta_rule=cfg.beta_rule, beta=cfg.beta, G=G,
                       g_bound_alpha=cfg.g_bound_alpha, tau_max=cfg.tau_max,
                       tau_fixed=cfg.tau_fixed, batch_size=cfg.batch_size, power=cfg.power,
                       seed=cfg.seed)


def channel_config(cfg: ExperimentConfig, d: int) -> ChannelConfig:
    # reference power is the smallest budget; budgets are uniform here
    return ChannelConfig(sigma_c2=sigma_from_snr(cfg.snr_db, cfg.power, d), fading=cfg.fading,
                         rayleigh_scale=cfg.rayleigh_scale, seed=cfg.seed)


@dataclass
class RunResult:
    status: int
    out_dir: Path
    summary: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)
    final_x: np.ndarray | None = None


def _write_manifest(path: Path, cfg: ExperimentConfig, extra: dict) -> None:
    lines = [cfg.to_ini()]
    for section, values in extra.items():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {_fmt(v)}" for k, v in values.items())
        lines.append("")
    path.write_text("\n".join(lines), encoding="utf-8")


def _write_summary(path: Path, summary: dict) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["key", "value"])
        for k, v in summary.items():
            w.writerow([k, _fmt(v)])


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    """Run one configured experiment and write its files under ``cfg.out``.

    Writes ``trace.csv`` (one row per round, flushed as it goes),
    ``manifest.ini``, ``summary.csv`` and ``timing.csv``.  Status is 0 on
    completion and 2 on divergence.
    """
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    log.info("resolved configuration:\n%s", cfg.to_ini())
    build = {"git_describe": git_describe(), "package_version": __version__,
             "trace_schema": TRACE_SCHEMA_VERSION}
    if cfg.task.startswith("oracle_"):
        summary = run_oracle(cfg)
        _write_manifest(out / "manifest.ini", cfg, {"build": build})
        _write_summary(out / "summary.csv", summary)
        return RunResult(0, out, summary)

    setup = build_problem(cfg)
    problem = setup.problem
    rcfg = round_config(cfg, setup.constants)
    chan = channel_config(cfg, problem.d)
    if setup.constants is not None:
        rcfg.check_step_size(setup.constants.L, problem.m)
    manifest = {
        "build": build,
        "problem": {"d": problem.d, "m": problem.m, "alpha": tuple(problem.alpha)},
        "channel_resolved": {"sigma_c2": chan.sigma_c2, "reference_power": cfg.power},
        "constants": ({"L": setup.constants.L, "sigma": setup.constants.sigma,
                       "G": setup.constants.G, "G_is_estimate": setup.constants.G_is_estimate}
                      if setup.constants else {}),
    }
    _write_manifest(out / "manifest.ini", cfg, manifest)

    records = []
    status, error, state = 0, "", None
    with open(out / "trace.csv", "w", newline="", encoding="utf-8") as fh, \
            open(out / "timing.csv", "w", newline="", encoding="utf-8") as th:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        timing = csv.writer(th, lineterminator="\n")
        timing.writerow(["t", "wall_time"])

        def on_round(rec):
            records.append(rec)
            writer.writerow(trace_row(rec))
            timing.writerow([rec.t, f"{rec.wall_time:.6f}"])
            fh.flush()

        started = time.perf_counter()
        try:
            state = train(problem, cfg.algorithm, chan, rcfg, evaluate=setup.evaluate,
                          on_round=on_round)
        except DivergenceError as exc:
            status, error = 2, str(exc)
            log.error("run diverged: %s", exc)
        elapsed = time.perf_counter() - started

    summary = {"status": "ok" if status == 0 else "diverged", "error": error,
               "rounds_completed": len(records), "elapsed_s": round(elapsed, 3)}
    if records:
        summary["min_grad_norm2"] = min(r.grad_norm2 for r in records)
        summary["total_clips"] = sum(r.clip_count for r in records)
        summary["total_violations"] = sum(r.violations for r in records)
        summary["total_clamps"] = sum(r.clamp_count for r in records)
        summary["mean_tau"] = float(np.mean([np.mean(r.taus) for r in records]))
    if state is not None:
        loss, g2 = objective_metrics(problem, state.x)
        summary["final_train_loss"] = loss
        summary["final_grad_norm2"] = g2
        if setup.F_star is not None:
            summary["final_suboptimality"] = loss - setup.F_star
        if setup.evaluate is not None:
            summary["final_test_accuracy"] = float(setup.evaluate(state.x))
        if setup.constants is not None:
            g_obs = max(float(np.linalg.norm(problem.local_gradient(i, state.x)))
                        for i in range(problem.m))
            summary["G_exceeded"] = g_obs > setup.constants.G
            if g_obs > setup.constants.G:
                log.warning("observed gradient norm %.4g exceeds the probe estimate G=%.4g",
                            g_obs, setup.constants.G)
    _write_summary(out / "summary.csv", summary)
    return RunResult(status, out, summary, records, None if state is None else state.x)


def run_oracle(cfg: ExperimentConfig) -> dict:
    rng = streams.stream(cfg.seed, streams.ORACLE)
    if cfg.task == "oracle_theorem1":
        spec = NoisySgdSpec(L=cfg.oracle_L, eta=cfg.eta, sigma=cfg.oracle_sigma,
                            sigma_c=cfg.oracle_sigma_c, T=cfg.oracle_T)
        est = simulate_noisy_sgd(spec, cfg.oracle_reps, rng)
        bound = lb_rhs(spec)
        return {"lb_rhs": bound, "estimate": est.mean, "stderr": est.stderr,
                "relative_gap": (est.mean - bound) / bound if bound else 0.0,
                "estimate_ge_bound_minus_3se": est.mean >= bound - 3 * est.stderr}
    if cfg.task == "oracle_example1":
        q = synth_quadratic(cfg.clients, cfg.dim, cfg.heterogeneity, cfg.seed)
        L = max(np.linalg.eigvalsh(H)[-1] for H in q.H)
        eta = min(cfg.eta, 0.9 / L)
        tau = tuple(int(v) for v in rng.integers(1, cfg.tau_max + 1, size=q.m))
        spec = DisjointControlSpec(q=q, eta=eta, tau=tau, beta_i=tuple(q.alpha), beta=1.0)
        x_hat = example1_fixed_point(spec)
        x_lim = example1_simulate(spec, cfg.rounds * 50, rng=rng)
        x_star = quadratic_optimum(q)
        return {"eta": float(eta), "tau": tau, "x_hat": tuple(map(float, x_hat)),
                "x_limit": tuple(map(float, x_lim)),
                "distance_hat_limit": float(np.linalg.norm(x_hat - x_lim)),
                "distance_hat_optimum": float(np.linalg.norm(x_hat - x_star))}
    raise ValueError(f"{cfg.task!r} is not an oracle task")


def _metric(summary: dict) -> float:
    for key in ("final_test_accuracy", "final_grad_norm2", "estimate", "distance_hat_limit"):
        if key in summary:
            return float(summary[key])
    return float("nan")


def sweep(template: ExperimentConfig, axes: dict[str, list]) -> list[dict]:
    """Run the cross product of ``axes`` and aggregate over seeds.

    Writes ``runs.csv`` (one row per child) and ``table.csv`` (rows are the
    non-SNR, non-seed axis values, columns are SNR mean/std) under
    ``template.out``.  Failed children are recorded and the sweep continues.
    """
    root = Path(template.out)
    root.mkdir(parents=True, exist_ok=True)
    names = list(axes)
    rows = []
    for combo in itertools.product(*(axes[n] for n in names)):
        changes = dict(zip(names, combo))
        tag = "_".join(f"{k}={v}" for k, v in changes.items()) or "run"
        row = dict(changes)
        try:
            cfg = with_overrides(template, out=str(root / tag), **changes)
            res = run_experiment(cfg)
            row.update(status=res.summary.get("status", "ok"), metric=_metric(res.summary),
                       clips=res.summary.get("total_clips", 0),
                       violations=res.summary.get("total_violations", 0))
        except Exception as exc:  # child failures must not stop the sweep
            log.exception("sweep child %s failed", tag)
            row.update(status=f"failed: {exc}", metric=float("nan"), clips=0, violations=0)
        rows.append(row)

    with open(root / "runs.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=[*names, "status", "metric", "clips", "violations"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    (root / "table.csv").write_text(table_csv(rows, names, template.snr_db), encoding="utf-8")
    return rows


def table_csv(rows: list[dict], names: list[str], default_snr: float) -> str:
    group_keys = [n for n in names if n not in ("snr_db", "seed")]
    snrs = sorted({r.get("snr_db", default_snr) for r in rows}, key=float)
    cells: dict = {}
    for r in rows:
        key = tuple(r[k] for k in group_keys)
        cells.setdefault(key, {}).setdefault(r.get("snr_db", default_snr), []).append(r["metric"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([*group_keys, *itertools.chain.from_iterable(
        (f"snr_{s}_mean", f"snr_{s}_std", f"snr_{s}_n") for s in snrs)])
    for key in sorted(cells, key=lambda k: tuple(str(v) for v in k)):
        line = list(key)
        for s in snrs:
            vals = np.array([v for v in cells[key].get(s, []) if np.isfinite(v)])
            if len(vals):
                line += [_fmt(vals.mean()), _fmt(vals.std()), len(vals)]
            else:
                line += ["nan", "nan", 0]
        w.writerow(line)
    return buf.getvalue()
