"""Training loops: adaptive computation + power control, plus two baselines.

Every round follows the same pattern: the server broadcasts ``x_t`` over
an error-free downlink, clients train locally on private random streams
keyed by ``(seed, round, client)``, the channel superposes their scaled
updates, and the server rescales the noisy sum.

``acpc``     greedy per-client local steps under the power budget, precoder
             ``beta_t * alpha_i / (tau_i * h_i)``, receiver divides by ``beta_t``.
``uniform``  fixed local steps for everyone and one shared precoder
             ``beta_t / tau`` sized for the worst-case client.
``naive``    one local step, weighted model differences sent without any
             scaling, so channel noise lands on the model unattenuated.
"""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import streams
from .channel import ChannelConfig, check_power, draw_gains_with_clamps, precoder, superpose

log = logging.getLogger(__name__)

ALGORITHMS = ("acpc", "naive", "uniform")
BETA_RULES = ("known_delta", "g_bound", "fixed")


class DivergenceError(RuntimeError):
    pass


class PowerViolationError(AssertionError):
    pass


@dataclass(frozen=True)
class RoundConfig:
    """Knobs shared by all three training loops.

    ``eta_schedule="sqrt"`` uses ``eta * sqrt(m / T)`` for every round.
    ``power`` is a scalar, a per-client vector, or a ``(T, m)`` table.
    ``tau_forced`` bypasses greedy selection (int or per-client sequence).
    ``g_bound_alpha`` picks how the gradient-bound beta rule resolves
    ``alpha_i``: ``"max"`` (binding client) or ``"per_client"``.
    """

    rounds: int = 200
    eta: float = 0.05
    eta_schedule: str = "constant"
    beta_rule: str = "known_delta"
    beta: float = 1.0
    G: float | None = None
    g_bound_alpha: str = "max"
    tau_max: int = 50
    tau_fixed: int = 10
    tau_forced: int | tuple[int, ...] | None = None
    batch_size: int = 32
    power: float | tuple = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1 or self.tau_max < 1 or self.tau_fixed < 1 or self.batch_size < 1:
            raise ValueError("rounds, tau_max, tau_fixed and batch_size must be >= 1")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.eta_schedule not in ("constant", "sqrt"):
            raise ValueError(f"unknown eta schedule {self.eta_schedule!r}")
        if self.beta_rule not in BETA_RULES:
            raise ValueError(f"unknown beta rule {self.beta_rule!r}")
        if self.beta_rule == "fixed" and self.beta <= 0:
            raise ValueError("fixed beta must be positive")
        if self.g_bound_alpha not in ("max", "per_client"):
            raise ValueError(f"unknown g_bound_alpha {self.g_bound_alpha!r}")
        if np.any(np.asarray(self.power, dtype=float) <= 0):
            raise ValueError("power budgets must be positive")

    def step_size(self, t: int, m: int) -> float:
        if self.eta_schedule == "sqrt":
            return self.eta * math.sqrt(m / self.rounds)
        return self.eta

    def budgets(self, t: int, m: int) -> np.ndarray:
        P = np.asarray(self.power, dtype=float)
        if P.ndim == 0:
            return np.full(m, float(P))
        if P.ndim == 2:
            P = P[t]
        if P.shape != (m,):
            raise ValueError(f"power table has {P.size} entries for {m} clients")
        return P.copy()

    def forced_tau(self, i: int) -> int | None:
        if self.tau_forced is None:
            return None
        if isinstance(self.tau_forced, (int, np.integer)):
            return int(self.tau_forced)
        return int(self.tau_forced[i])

    def check_step_size(self, L: float, m: int) -> bool:
        """Warn when ``eta_t > 1/L`` (the descent analysis needs ``eta_t <= 1/L``)."""
        eta = self.step_size(0, m)
        if eta * L > 1.0:
            log.warning("step size %.4g exceeds 1/L = %.4g", eta, 1.0 / L)
            return False
        return True


@dataclass(frozen=True)
class ClientUpdate:
    """What client ``i`` puts on the air in one round.

    ``delta`` is the transmitted vector ``precoder * payload``; ``diff`` is the
    unscaled model difference ``x_{t,tau} - x_t``.  ``rescale < 1`` marks the
    infeasible-at-one-step fallback.
    """

    delta: np.ndarray
    payload: np.ndarray
    precoder: float
    diff: np.ndarray
    tau: int
    power_used: float
    rescale: float = 1.0

    @property
    def clipped(self) -> bool:
        return self.rescale < 1.0


@dataclass
class RoundRecord:
    t: int
    train_loss: float
    grad_norm2: float
    test_accuracy: float
    eta: float
    beta: float
    taus: tuple[int, ...]
    powers: tuple[float, ...]
    budgets: tuple[float, ...]
    clip_count: int
    violations: int
    clamp_count: int
    noise_norm2: float
    pre_noise_digest: str
    wall_time: float


@dataclass
class ServerState:
    x: np.ndarray
    t: int = 0
    trace: list[RoundRecord] = field(default_factory=list)
    beta_prev: float = 0.0


# client side ----------------------------------------------------------------


def local_train(problem, i, x_t, eta, tau, batch, rng) -> np.ndarray:
    """``tau`` sequential stochastic-gradient steps from ``x_t``."""
    if tau < 1:
        raise ValueError("tau must be >= 1")
    x = np.array(x_t, dtype=float)
    for k in range(tau):
        x = x - eta * problem.local_stochastic_gradient(i, x, batch, rng)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"client {i} produced a non-finite iterate at local step {k + 1}")
    return x


def _precode(diff, beta_t, alpha_i, tau, h_i):
    payload = (beta_t * alpha_i / tau) * diff
    p = precoder(h_i)
    return payload, p, p * payload


def scale_update(x_end, x_start, tau, alpha_i, beta_t, h_i=1.0) -> ClientUpdate:
    """Apply the precoder ``beta_t * alpha_i / (tau * h_i)`` to the model difference."""
    if tau < 1 or beta_t < 0:
        raise ValueError("need tau >= 1 and beta_t >= 0")
    if h_i <= 0:
        raise ValueError(f"channel gain must be positive, got {h_i}")
    diff = np.asarray(x_end, dtype=float) - np.asarray(x_start, dtype=float)
    payload, p, delta = _precode(diff, beta_t, alpha_i, tau, h_i)
    return ClientUpdate(delta=delta, payload=payload, precoder=p, diff=diff, tau=int(tau),
                        power_used=float(delta @ delta))


def _clip_to_budget(upd: ClientUpdate, P: float) -> ClientUpdate:
    s = math.sqrt(P / upd.power_used)
    while True:
        payload = s * upd.payload
        delta = upd.precoder * payload
        power = float(delta @ delta)
        if power <= P:
            return replace(upd, delta=delta, payload=payload, power_used=power, rescale=s)
        s = float(np.nextafter(s, 0.0))


def select_tau(problem, i, x_t, eta, beta_t, alpha_i, P_i, h_i, tau_max, batch, rng,
               tau_forced: int | None = None) -> ClientUpdate:
    """Greedy local-step choice: the largest ``k <= tau_max`` whose update fits ``P_i``.

    All ``tau_max`` steps are run; the kept iterate is the one the trajectory
    passed through at step ``k``, so the result equals
    ``local_train(..., tau=k)`` on the same stream.  If even ``k = 1`` is over
    budget the one-step update is shrunk onto the power sphere.
    """
    if P_i <= 0:
        raise ValueError("power budget must be positive")
    x_start = np.array(x_t, dtype=float)
    if tau_forced is not None:
        x_end = local_train(problem, i, x_start, eta, tau_forced, batch, rng)
        upd = scale_update(x_end, x_start, tau_forced, alpha_i, beta_t, h_i)
        return upd if upd.power_used <= P_i else _clip_to_budget(upd, P_i)

    # power of the step-k update is (beta*alpha/(k*h))^2 * ||diff_k||^2
    coef = (beta_t * alpha_i / h_i) ** 2
    x = x_start.copy()
    best_k, best_x, first_x = 0, None, None
    for k in range(1, tau_max + 1):
        x = x - eta * problem.local_stochastic_gradient(i, x, batch, rng)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"client {i} produced a non-finite iterate at local step {k}")
        if k == 1:
            first_x = x
        diff = x - x_start
        if coef * float(diff @ diff) / k**2 <= P_i:
            best_k, best_x = k, x
    if best_k == 0:
        return _clip_to_budget(scale_update(first_x, x_start, 1, alpha_i, beta_t, h_i), P_i)
    upd = scale_update(best_x, x_start, best_k, alpha_i, beta_t, h_i)
    # the screening test and the precoded vector can differ in the last ulp
    return upd if upd.power_used <= P_i else _clip_to_budget(upd, P_i)


# server side ----------------------------------------------------------------


def choose_beta(rule, P, alpha, taus, eta_t=None, G=None, diff_norm2=None, gains=None,
                beta_fixed=None, alpha_mode: str = "max") -> float:
    """Server scaling factor ``beta_t``.

    ``known_delta``: ``beta^2 = min_i P_i tau_i^2 h_i^2 / (||diff_i||^2 alpha_i^2)``
    over clients with a non-zero update (``inf`` if there are none).
    ``g_bound``: ``beta^2 = P h^2 / (alpha^2 eta^2 G^2)`` with the binding
    (``"max"``) or per-client (``"per_client"``) resolution of ``alpha``.
    """
    P = np.asarray(P, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    h = np.ones_like(P) if gains is None else np.asarray(gains, dtype=float)
    if rule == "fixed":
        if beta_fixed is None or beta_fixed <= 0:
            raise ValueError("fixed rule needs a positive beta")
        return float(beta_fixed)
    if rule == "known_delta":
        if diff_norm2 is None:
            raise ValueError("known_delta rule needs the update norms")
        taus = np.asarray(taus, dtype=float)
        n2 = np.asarray(diff_norm2, dtype=float)
        live = n2 > 0
        if not live.any():
            return math.inf
        ratio = P[live] * taus[live] ** 2 * h[live] ** 2 / (n2[live] * alpha[live] ** 2)
        return float(np.sqrt(ratio.min()))
    if rule == "g_bound":
        if eta_t is None or G is None or G <= 0:
            raise ValueError("g_bound rule needs eta_t and a positive G")
        if alpha_mode == "max":
            b2 = P.min() * h.min() ** 2 / (alpha.max() ** 2 * eta_t**2 * G**2)
        else:
            b2 = (P * h**2 / (alpha**2 * eta_t**2 * G**2)).min()
        return float(np.sqrt(b2))
    raise ValueError(f"unknown beta rule {rule!r}")


def _fit_beta(beta, diffs, scales, gains, P):
    """Shrink ``beta`` by ulps until every precoded update fits its budget."""
    for _ in range(64):
        ok = True
        for d, (a, tau), h, p in zip(diffs, scales, gains, P):
            delta = _precode(d, beta, a, tau, h)[2]
            ok &= float(delta @ delta) <= p
        if ok:
            return beta
        beta = float(np.nextafter(beta, 0.0))
    raise PowerViolationError("could not fit beta to the power budgets")


def _digest(v: np.ndarray) -> str:
    return hashlib.blake2b(np.ascontiguousarray(v).tobytes(), digest_size=8).hexdigest()


def objective_metrics(problem, x) -> tuple[float, float]:
    if hasattr(problem, "value_and_gradient"):
        value, grad = problem.value_and_gradient(x)
    else:
        value, grad = problem.global_value(x), problem.global_gradient(x)
    return float(value), float(grad @ grad)


def _finish_round(state, problem, x_next, record_kwargs, evaluate, started):
    if not np.all(np.isfinite(x_next)):
        raise DivergenceError(f"global model became non-finite in round {state.t}")
    loss, g2 = objective_metrics(problem, state.x)
    acc = float(evaluate(state.x)) if evaluate is not None else float("nan")
    rec = RoundRecord(t=state.t, train_loss=loss, grad_norm2=g2, test_accuracy=acc,
                      wall_time=time.perf_counter() - started, **record_kwargs)
    state.trace.append(rec)
    state.x = x_next
    state.t += 1
    return state


def _noise(channel: ChannelConfig, seed: int, t: int, d: int) -> np.ndarray:
    if channel.sigma_c2 == 0:
        return np.zeros(d)
    rng = streams.stream(seed, streams.NOISE, t)
    return math.sqrt(channel.sigma_c2) * rng.standard_normal(d)


def _target_beta(state, cfg: RoundConfig, P, alpha, eta_t, gains) -> float:
    if cfg.beta_rule == "fixed":
        return cfg.beta
    if cfg.beta_rule == "g_bound":
        return choose_beta("g_bound", P, alpha, None, eta_t=eta_t, G=cfg.G, gains=gains,
                           alpha_mode=cfg.g_bound_alpha)
    # known_delta: clients pick tau against last round's beta; round 0 is unconstrained
    return state.beta_prev


def run_round_acpc(state: ServerState, problem, channel: ChannelConfig, cfg: RoundConfig,
                   evaluate: Callable | None = None) -> ServerState:
    """One round of adaptive local computation with transmit power control.

    With the ``known_delta`` rule the round has two phases: clients select
    ``tau`` against the previous ``beta``, report ``tau`` and ``||diff||``,
    and the server broadcasts the largest ``beta_t`` that keeps every client
    inside its budget before they transmit.
    """
    started = time.perf_counter()
    t, m = state.t, problem.m
    if t >= cfg.rounds:
        raise ValueError(f"round {t} is past the configured {cfg.rounds} rounds")
    eta_t = cfg.step_size(t, m)
    P = cfg.budgets(t, m)
    alpha = problem.alpha
    gains, clamps = draw_gains_with_clamps(channel, m, t)
    target = _target_beta(state, cfg, P, alpha, eta_t, gains)

    updates = []
    for i in range(m):
        rng = streams.stream(cfg.seed, streams.CLIENT, t, i)
        updates.append(select_tau(problem, i, state.x, eta_t, target, alpha[i], P[i], gains[i],
                                  cfg.tau_max, cfg.batch_size, rng,
                                  tau_forced=cfg.forced_tau(i)))

    if cfg.beta_rule == "known_delta":
        taus = [u.tau for u in updates]
        beta = choose_beta("known_delta", P, alpha, taus,
                           diff_norm2=[float(u.diff @ u.diff) for u in updates], gains=gains)
        if not math.isfinite(beta):
            beta = target if target > 0 else 1.0
        beta = _fit_beta(beta, [u.diff for u in updates], [(alpha[i], taus[i]) for i in range(m)],
                         gains, P)
        rescaled = []
        for i, u in enumerate(updates):
            payload, p, delta = _precode(u.diff, beta, alpha[i], u.tau, gains[i])
            rescaled.append(replace(u, payload=payload, precoder=p, delta=delta, rescale=1.0))
        updates = rescaled
    else:
        beta = target

    for i, u in enumerate(updates):
        power = float(u.delta @ u.delta)
        if power > P[i]:
            raise PowerViolationError(f"client {i} uses {power!r} > budget {P[i]!r} in round {t}")
        updates[i] = replace(u, power_used=power)

    pre = superpose(np.stack([u.payload for u in updates]), gains, [u.precoder for u in updates])
    w = _noise(channel, cfg.seed, t, problem.d)
    x_next = state.x + (pre + w) / beta
    state.beta_prev = beta
    return _finish_round(state, problem, x_next, dict(
        eta=eta_t, beta=beta, taus=tuple(u.tau for u in updates),
        powers=tuple(u.power_used for u in updates), budgets=tuple(P),
        clip_count=sum(u.clipped for u in updates), violations=0, clamp_count=clamps,
        noise_norm2=float(w @ w), pre_noise_digest=_digest(pre)), evaluate, started)


def run_round_uniform(state: ServerState, problem, channel: ChannelConfig, cfg: RoundConfig,
                      evaluate: Callable | None = None) -> ServerState:
    """Fixed ``tau`` for every client and one shared precoder ``beta_t / tau``.

    The server divides the received sum by ``m * beta_t`` (plain average).
    """
    started = time.perf_counter()
    t, m = state.t, problem.m
    eta_t = cfg.step_size(t, m)
    P = cfg.budgets(t, m)
    tau = cfg.tau_fixed
    gains, clamps = draw_gains_with_clamps(channel, m, t)
    diffs = []
    for i in range(m):
        rng = streams.stream(cfg.seed, streams.CLIENT, t, i)
        diffs.append(local_train(problem, i, state.x, eta_t, tau, cfg.batch_size, rng) - state.x)
    ones = np.ones(m)
    if cfg.beta_rule == "known_delta":
        beta = choose_beta("known_delta", P, ones, [tau] * m,
                           diff_norm2=[float(d @ d) for d in diffs], gains=gains)
        if not math.isfinite(beta):
            beta = 1.0
    elif cfg.beta_rule == "g_bound":
        beta = choose_beta("g_bound", P, ones, None, eta_t=eta_t, G=cfg.G, gains=gains)
    else:
        beta = cfg.beta
    clip = 0
    if cfg.beta_rule == "known_delta":
        beta = _fit_beta(beta, diffs, [(1.0, tau)] * m, gains, P)
    payloads, precs, powers = [], [], []
    for i in range(m):
        payload, p, delta = _precode(diffs[i], beta, 1.0, tau, gains[i])
        power = float(delta @ delta)
        if power > P[i]:
            upd = _clip_to_budget(ClientUpdate(delta, payload, p, diffs[i], tau, power), P[i])
            payload, power = upd.payload, upd.power_used
            clip += 1
        payloads.append(payload)
        precs.append(p)
        powers.append(power)
    pre = superpose(np.stack(payloads), gains, precs)
    w = _noise(channel, cfg.seed, t, problem.d)
    x_next = state.x + (pre + w) / (m * beta)
    state.beta_prev = beta
    return _finish_round(state, problem, x_next, dict(
        eta=eta_t, beta=beta, taus=(tau,) * m, powers=tuple(powers), budgets=tuple(P),
        clip_count=clip, violations=0, clamp_count=clamps, noise_norm2=float(w @ w),
        pre_noise_digest=_digest(pre)), evaluate, started)


def run_round_naive(state: ServerState, problem, channel: ChannelConfig, cfg: RoundConfig,
                    evaluate: Callable | None = None) -> ServerState:
    """Over-the-air FedAvg with one local step and no transmit scaling.

    Clients send ``alpha_i (x_i - x_t)`` (channel-inverted under fading); the
    server adds the noisy sum to ``x_t``.  Budget overruns are counted, not
    prevented, since this scheme has no power control.
    """
    started = time.perf_counter()
    t, m = state.t, problem.m
    eta_t = cfg.step_size(t, m)
    P = cfg.budgets(t, m)
    gains, clamps = draw_gains_with_clamps(channel, m, t)
    payloads, precs, powers = [], [], []
    violations = 0
    for i in range(m):
        rng = streams.stream(cfg.seed, streams.CLIENT, t, i)
        x_i = local_train(problem, i, state.x, eta_t, 1, cfg.batch_size, rng)
        payload = problem.alpha[i] * (x_i - state.x)
        p = precoder(gains[i])
        check = check_power(p * payload, P[i])
        violations += not check.ok
        payloads.append(payload)
        precs.append(p)
        powers.append(check.power)
    pre = superpose(np.stack(payloads), gains, precs)
    w = _noise(channel, cfg.seed, t, problem.d)
    x_next = state.x + pre + w
    return _finish_round(state, problem, x_next, dict(
        eta=eta_t, beta=1.0, taus=(1,) * m, powers=tuple(powers), budgets=tuple(P),
        clip_count=0, violations=violations, clamp_count=clamps, noise_norm2=float(w @ w),
        pre_noise_digest=_digest(pre)), evaluate, started)


ROUND_FUNCTIONS = {
    "acpc": run_round_acpc,
    "naive": run_round_naive,
    "uniform": run_round_uniform,
}


def train(problem, algorithm: str, channel: ChannelConfig, cfg: RoundConfig, x0=None,
          evaluate: Callable | None = None,
          on_round: Callable[[RoundRecord], None] | None = None) -> ServerState:
    """Run ``cfg.rounds`` rounds of ``algorithm`` from ``x0`` (zeros by default)."""
    step = ROUND_FUNCTIONS[algorithm]
    x = np.zeros(problem.d) if x0 is None else np.array(x0, dtype=float)
    state = ServerState(x=x)
    for _ in range(cfg.rounds):
        step(state, problem, channel, cfg, evaluate)
        if on_round is not None:
            on_round(state.trace[-1])
    return state
