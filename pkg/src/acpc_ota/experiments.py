"""Reusable experiment drivers shared by the acceptance suite and ``scripts/``."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .algorithms import RoundConfig, ServerState, run_round_acpc
from .channel import ChannelConfig, sigma_from_snr
from .config import ExperimentConfig
from .data import synth_quadratic
from .harness import read_trace, sweep
from .objectives import estimate_constants, quadratic_optimum
from .oracles import BoundInputs, BoundTerms, theorem2_bound

# the two MNIST operating points with the algorithms compared at each
OPERATING_POINTS = {
    "p1_snr-1": dict(non_iid_p=1, snr_db=-1.0, algorithms=("acpc", "naive")),
    "p10_snr20": dict(non_iid_p=10, snr_db=20.0, algorithms=("acpc", "uniform", "naive")),
}


@dataclass(frozen=True)
class QuadraticRun:
    grad_norm2: np.ndarray   # ||grad F(x_t)||^2 for t = 0..T-1
    bound: BoundTerms
    eta: float
    L: float

    @property
    def min_grad_norm2(self) -> float:
        return float(self.grad_norm2.min())


def acpc_on_quadratic(seed: int, rounds: int = 300, m: int = 4, d: int = 5,
                      heterogeneity: float = 1.0, sigma: float = 0.1, snr_db: float = 10.0,
                      power: float = 1.0, eta_frac: float = 0.5, schedule: str = "constant",
                      tau_max: int = 10, fading: str = "none") -> QuadraticRun:
    """Train ACPC on a random quadratic and evaluate the four-term bound on the realized run.

    ``eta = eta_frac / L`` (times ``sqrt(m / T)`` under the ``sqrt`` schedule).
    ``G`` is probed along the server trajectory plus every client optimum.
    """
    q = synth_quadratic(m, d, heterogeneity, seed, sigma=sigma)
    consts = estimate_constants(q)
    sigma_c2 = sigma_from_snr(snr_db, power, d)
    cfg = RoundConfig(rounds=rounds, eta=eta_frac / consts.L, eta_schedule=schedule,
                      tau_max=tau_max, power=power, seed=seed)
    channel = ChannelConfig(sigma_c2=sigma_c2, fading=fading, seed=seed)
    state = ServerState(x=np.zeros(d))
    iterates = [state.x.copy()]
    for _ in range(rounds):
        run_round_acpc(state, q, channel, cfg)
        iterates.append(state.x.copy())
    iterates = np.array(iterates)
    x_star = quadratic_optimum(q)
    grads = np.array([float(np.sum(q.global_gradient(x) ** 2)) for x in iterates[:-1]])
    G = estimate_constants(q, probes=np.vstack([iterates, q.local_optima, x_star])).G
    eta = cfg.step_size(0, m)
    inputs = BoundInputs.from_rounds(
        q.global_value(iterates[0]) - q.global_value(x_star), eta, consts.L, consts.sigma, G,
        q.alpha, [r.taus for r in state.trace], [r.beta for r in state.trace], d * sigma_c2)
    return QuadraticRun(grads, theorem2_bound(inputs), eta, consts.L)


def rate_trend(seed: int, rounds: int, factor: int = 4, **kw) -> float:
    """Ratio of min grad-norm^2 at ``rounds`` to that at ``factor * rounds`` (sqrt schedule)."""
    short = acpc_on_quadratic(seed, rounds=rounds, schedule="sqrt", **kw)
    long = acpc_on_quadratic(seed, rounds=factor * rounds, schedule="sqrt", **kw)
    return short.min_grad_norm2 / long.min_grad_norm2


def trace_audit(run_dir) -> dict:
    """Total violations and clip fallbacks recorded in a run's ``trace.csv``."""
    rows = read_trace(Path(run_dir) / "trace.csv")
    return {"rounds": len(rows),
            "violations": sum(int(r["violations"]) for r in rows),
            "clips": sum(int(r["clip_count"]) for r in rows)}


def operating_point_accuracy(template: ExperimentConfig, point: str,
                             seeds) -> dict[str, list[float]]:
    """Final test accuracy per algorithm at one operating point, under ``template.out``."""
    spec = OPERATING_POINTS[point]
    base = replace(template, non_iid_p=spec["non_iid_p"], snr_db=spec["snr_db"],
                   out=str(Path(template.out) / point))
    rows = sweep(base, {"algorithm": list(spec["algorithms"]), "seed": list(seeds)})
    acc: dict[str, list[float]] = {a: [] for a in spec["algorithms"]}
    for r in rows:
        if r["status"] != "ok":
            raise RuntimeError(f"{point} {r['algorithm']} seed {r['seed']}: {r['status']}")
        acc[r["algorithm"]].append(float(r["metric"]))
    return acc
