"""Numerical checks of the noise-floor bound, the disjoint-control fixed
point on quadratics, and the four-term convergence bound."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .objectives import QuadraticProblem, SingularityError


class SpectralRadiusError(ArithmeticError):
    pass


# noisy SGD noise floor --------------------------------------------------------


@dataclass(frozen=True)
class NoisySgdSpec:
    """``x_{t+1} = x_t - eta * g_t + w_t`` with Gaussian gradient and channel noise.

    ``sigma`` and ``sigma_c`` are per-coordinate standard deviations.
    """

    L: float
    eta: float
    sigma: float
    sigma_c: float
    x0: float = 1.0
    T: int = 500

    def __post_init__(self):
        if self.L <= 0:
            raise ValueError("L must be positive")
        if not 0 < self.eta * self.L < 1:
            raise ValueError(f"need 0 < eta*L < 1, got {self.eta * self.L}")
        if self.sigma < 0 or self.sigma_c < 0:
            raise ValueError("noise levels must be non-negative")


def lb_rhs(spec: NoisySgdSpec, d: int = 1) -> float:
    """Steady-state floor ``d (eta^2 sigma^2 + sigma_c^2) / (1 - (1 - eta L)^2)``."""
    if spec.eta * spec.L >= 1:
        raise ValueError("bound requires eta * L < 1")
    num = spec.eta**2 * spec.sigma**2 + spec.sigma_c**2
    return d * num / (1.0 - (1.0 - spec.eta * spec.L) ** 2)


@dataclass(frozen=True)
class MonteCarloEstimate:
    mean: float
    stderr: float
    reps: int


def simulate_noisy_sgd(spec: NoisySgdSpec, reps: int, rng: np.random.Generator) -> MonteCarloEstimate:
    """Average ``(x_T - x*)^2`` over ``reps`` runs on ``F = L/2 (x - x*)^2``.

    The contraction ``(1 - eta L)^T`` must be at most ``1e-3`` so that the
    estimate reflects the stationary regime.
    """
    if abs(1 - spec.eta * spec.L) ** spec.T > 1e-3:
        raise ValueError("T too small for the transient to die out")
    err = np.full(reps, float(spec.x0))  # x* = 0
    a = 1.0 - spec.eta * spec.L
    for _ in range(spec.T):
        step = a * err
        if spec.sigma > 0:
            step -= spec.eta * spec.sigma * rng.standard_normal(reps)
        if spec.sigma_c > 0:
            step += spec.sigma_c * rng.standard_normal(reps)
        err = step
    sq = err**2
    return MonteCarloEstimate(float(sq.mean()), float(sq.std(ddof=1) / math.sqrt(reps)), reps)


# disjoint power control on quadratics -----------------------------------------


@dataclass(frozen=True)
class DisjointControlSpec:
    """Quadratic clients taking ``tau_i`` GD steps, aggregated with ``beta_i / beta``."""

    q: QuadraticProblem
    eta: float
    tau: tuple[int, ...]
    beta_i: tuple[float, ...]
    beta: float = 1.0

    def __post_init__(self):
        if len(self.tau) != self.q.m or len(self.beta_i) != self.q.m:
            raise ValueError("tau and beta_i need one entry per client")
        if min(self.tau) < 1 or self.eta <= 0 or self.beta <= 0:
            raise ValueError("need tau_i >= 1, eta > 0, beta > 0")

    @property
    def ratios(self) -> np.ndarray:
        return np.asarray(self.beta_i, dtype=float) / self.beta


def sym_matrix_power(M: np.ndarray, n: int) -> np.ndarray:
    """``M**n`` for symmetric ``M`` by repeated squaring, re-symmetrizing each product."""
    result = np.eye(M.shape[0])
    base = 0.5 * (M + M.T)
    while n:
        if n & 1:
            result = result @ base
            result = 0.5 * (result + result.T)
        n >>= 1
        if n:
            base = base @ base
            base = 0.5 * (base + base.T)
    return result


def _aggregate(spec: DisjointControlSpec) -> tuple[np.ndarray, np.ndarray]:
    """``A = sum r_i K_i H_i`` and ``b = sum r_i K_i e_i`` with ``K_i = (I - (I - eta H_i)^tau_i) H_i^-1``."""
    q = spec.q
    eye = np.eye(q.d)
    A = np.zeros((q.d, q.d))
    b = np.zeros(q.d)
    for r, H, c, tau in zip(spec.ratios, q.H, q.local_optima, spec.tau):
        D = eye - sym_matrix_power(eye - spec.eta * H, tau)  # = K_i H_i
        A += r * D
        b += r * (D @ c)  # K_i e_i = D H_i^-1 e_i
    return A, b


def iteration_matrix(spec: DisjointControlSpec) -> np.ndarray:
    return np.eye(spec.q.d) - _aggregate(spec)[0]


def spectral_radius(spec: DisjointControlSpec) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(iteration_matrix(spec)))))


def example1_fixed_point(spec: DisjointControlSpec) -> np.ndarray:
    """Limit point ``x_hat = A^-1 b`` of the disjoint-control aggregation."""
    A, b = _aggregate(spec)
    try:
        x_hat = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise SingularityError("aggregate matrix is singular") from exc
    resid = np.linalg.norm(A @ x_hat - b)
    if resid > 1e-10 * max(1.0, np.linalg.norm(b)):
        raise SingularityError(f"fixed-point residual {resid:.3g}")
    return x_hat


def example1_simulate(spec: DisjointControlSpec, T: int, x0=None,
                      rng: np.random.Generator | None = None) -> np.ndarray:
    """Iterate ``x <- (I - A) x + b`` for ``T`` rounds from ``x0`` (random if omitted)."""
    rho = spectral_radius(spec)
    if rho >= 1.0:
        raise SpectralRadiusError(f"iteration matrix has spectral radius {rho:.6f} >= 1")
    A, b = _aggregate(spec)
    M = np.eye(spec.q.d) - A
    if x0 is None:
        rng = np.random.default_rng(0) if rng is None else rng
        x0 = rng.standard_normal(spec.q.d)
    x = np.array(x0, dtype=float)
    for _ in range(T):
        x = M @ x + b
    return x


def brute_force_fixed_point(spec: DisjointControlSpec, tol: float = 1e-13,
                            max_rounds: int = 10**6) -> np.ndarray:
    """Run the literal per-client GD and aggregation until the model stops moving."""
    q = spec.q
    x = np.zeros(q.d)
    for _ in range(max_rounds):
        step = np.zeros(q.d)
        for i in range(q.m):
            xi = x.copy()
            for _ in range(spec.tau[i]):
                xi = xi - spec.eta * (q.H[i] @ xi - q.e[i])
            step += spec.ratios[i] * (xi - x)
        x = x + step
        if np.linalg.norm(step) <= tol * max(1.0, np.linalg.norm(x)):
            return x
    raise SpectralRadiusError("brute-force iteration did not settle")


# four-term convergence bound ---------------------------------------------------


@dataclass(frozen=True)
class BoundInputs:
    """Everything the bound needs; ``sigma`` and ``sigma_c2`` are totals over coordinates.

    ``tau_rms[i]^2`` is the time average of ``tau_t^i^2``; ``beta_harmonic``
    satisfies ``1/beta_harmonic^2 = mean_t 1/beta_t^2``.
    """

    F0_minus_Fstar: float
    eta: float
    L: float
    sigma: float
    G: float
    alpha: tuple[float, ...]
    tau_rms: tuple[float, ...]
    beta_harmonic: float
    sigma_c2: float
    m: int
    T: int

    def __post_init__(self):
        vals = [self.F0_minus_Fstar, self.eta, self.L, self.sigma, self.G, self.beta_harmonic,
                self.sigma_c2, *self.alpha, *self.tau_rms]
        if min(vals) < 0:
            raise ValueError("bound inputs must be non-negative")

    @classmethod
    def from_rounds(cls, F0_minus_Fstar, eta, L, sigma, G, alpha, taus, betas, sigma_c2):
        """Build from realized per-round ``taus`` (``(T, m)``) and ``betas`` (``(T,)``)."""
        taus = np.asarray(taus, dtype=float)
        betas = np.asarray(betas, dtype=float)
        T, m = taus.shape
        tau_rms = np.sqrt((taus**2).mean(axis=0))
        beta_h = 1.0 / math.sqrt(float(np.mean(1.0 / betas**2)))
        return cls(float(F0_minus_Fstar), float(eta), float(L), float(sigma), float(G),
                   tuple(map(float, alpha)), tuple(map(float, tau_rms)), beta_h,
                   float(sigma_c2), m, T)


@dataclass(frozen=True)
class BoundTerms:
    optimization: float
    statistical: float
    local_update: float
    channel_noise: float

    @property
    def total(self) -> float:
        return self.optimization + self.statistical + self.local_update + self.channel_noise


def theorem2_bound(b: BoundInputs) -> BoundTerms:
    alpha = np.asarray(b.alpha)
    tau = np.asarray(b.tau_rms)
    return BoundTerms(
        optimization=2.0 * b.F0_minus_Fstar / (b.T * b.eta),
        statistical=b.L * b.eta * b.sigma**2 * float(np.sum(alpha**2)),
        local_update=b.m * b.L**2 * b.eta**2 * b.G**2 * float(np.sum(alpha**2 * tau**2)),
        channel_noise=b.L * b.sigma_c2 / (b.eta * b.beta_harmonic**2),
    )
