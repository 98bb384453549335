"""Federated objectives: weighted quadratics and softmax regression.

Both problem families expose the same surface (``m``, ``d``, ``alpha``,
``local_value``, ``local_gradient``, ``local_stochastic_gradient``) so the
training loops never need to know which one they are driving.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class ContractError(ValueError):
    """An input violates a documented precondition (shape, index, range)."""


class SingularityError(np.linalg.LinAlgError):
    pass


class EmptyDatasetError(ValueError):
    pass


def _check_alpha(alpha: np.ndarray) -> None:
    if np.any(alpha <= 0):
        raise ContractError("client weights must be positive")
    if abs(alpha.sum() - 1.0) > 1e-12:
        raise ContractError(f"client weights sum to {alpha.sum()!r}, expected 1")


def _as_model(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (d,):
        raise ContractError(f"model has shape {x.shape}, expected ({d},)")
    return x


@dataclass(frozen=True)
class QuadraticProblem:
    """``F_i(x) = 1/2 x'H_i x - e_i'x + 1/2 e_i'H_i^{-1}e_i`` with weights ``alpha``.

    Stochastic gradients are the exact gradient plus isotropic Gaussian
    noise with per-coordinate std ``sigma``.
    """

    H: np.ndarray
    e: np.ndarray
    alpha: np.ndarray
    sigma: float = 0.0
    cond_cap: float = 1e12

    def __post_init__(self):
        H = np.asarray(self.H, dtype=float)
        e = np.asarray(self.e, dtype=float)
        alpha = np.asarray(self.alpha, dtype=float)
        if H.ndim != 3 or H.shape[1] != H.shape[2]:
            raise ContractError(f"H must be (m, d, d), got {H.shape}")
        m, d, _ = H.shape
        if e.shape != (m, d) or alpha.shape != (m,):
            raise ContractError("e must be (m, d) and alpha (m,)")
        _check_alpha(alpha)
        if self.sigma < 0:
            raise ContractError("sigma must be non-negative")
        for i in range(m):
            cond = np.linalg.cond(H[i])
            if not np.isfinite(cond) or cond > self.cond_cap:
                raise SingularityError(f"H[{i}] has condition number {cond:.3g}")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "e", e)
        object.__setattr__(self, "alpha", alpha)
        # local optima c_i = H_i^{-1} e_i, reused by values and oracles
        c = np.stack([np.linalg.solve(H[i], e[i]) for i in range(m)])
        object.__setattr__(self, "_local_optima", c)

    @property
    def m(self) -> int:
        return self.H.shape[0]

    @property
    def d(self) -> int:
        return self.H.shape[1]

    @property
    def local_optima(self) -> np.ndarray:
        return self._local_optima

    @property
    def H_bar(self) -> np.ndarray:
        return np.einsum("i,ijk->jk", self.alpha, self.H)

    @property
    def e_bar(self) -> np.ndarray:
        return self.alpha @ self.e

    def _client(self, i: int) -> int:
        if not 0 <= i < self.m:
            raise ContractError(f"client index {i} out of range [0, {self.m})")
        return i

    def local_value(self, i: int, x) -> float:
        i = self._client(i)
        x = _as_model(x, self.d)
        Hi, ei = self.H[i], self.e[i]
        return float(0.5 * x @ Hi @ x - ei @ x + 0.5 * ei @ self._local_optima[i])

    def local_gradient(self, i: int, x) -> np.ndarray:
        i = self._client(i)
        x = _as_model(x, self.d)
        return self.H[i] @ x - self.e[i]

    def local_stochastic_gradient(self, i, x, batch_size, rng) -> np.ndarray:
        # batch_size has no meaning for the Gaussian-perturbation model
        g = self.local_gradient(i, x)
        if self.sigma == 0.0:
            return g
        return g + self.sigma * rng.standard_normal(self.d)

    def global_value(self, x) -> float:
        return float(sum(a * self.local_value(i, x) for i, a in enumerate(self.alpha)))

    def global_gradient(self, x) -> np.ndarray:
        x = _as_model(x, self.d)
        return self.H_bar @ x - self.e_bar


@dataclass(frozen=True)
class LogisticProblem:
    """Softmax regression with per-client data stored as contiguous slices.

    The parameter vector packs the ``(n_features, C)`` weight matrix
    row-major followed by the ``C`` biases.  ``alpha_i = n_i / N``.
    Arithmetic on the data runs in the features' dtype.
    """

    features: np.ndarray
    labels: np.ndarray
    offsets: np.ndarray
    num_classes: int
    lam: float = 0.0
    alpha: np.ndarray = field(init=False)

    def __post_init__(self):
        offsets = np.asarray(self.offsets, dtype=np.int64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(labels):
            raise ContractError("features must be (N, n_features) matching labels")
        if offsets[0] != 0 or offsets[-1] != len(labels):
            raise ContractError("offsets must start at 0 and end at N")
        sizes = np.diff(offsets)
        if len(sizes) == 0 or np.any(sizes < 1):
            raise EmptyDatasetError("every client needs at least one sample")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ContractError(f"labels must lie in [0, {self.num_classes})")
        if self.lam < 0:
            raise ContractError("lam must be non-negative")
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "alpha", sizes / sizes.sum())

    @classmethod
    def from_clients(cls, features, labels, num_classes, lam=0.0) -> "LogisticProblem":
        """Build from lists of per-client feature matrices and label vectors."""
        sizes = [len(y) for y in labels]
        if any(s == 0 for s in sizes):
            raise EmptyDatasetError("every client needs at least one sample")
        return cls(
            features=np.ascontiguousarray(np.concatenate(features)),
            labels=np.concatenate(labels),
            offsets=np.concatenate([[0], np.cumsum(sizes)]),
            num_classes=num_classes,
            lam=lam,
        )

    @property
    def m(self) -> int:
        return len(self.offsets) - 1

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def d(self) -> int:
        return (self.n_features + 1) * self.num_classes

    def client_data(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        if not 0 <= i < self.m:
            raise ContractError(f"client index {i} out of range [0, {self.m})")
        lo, hi = self.offsets[i], self.offsets[i + 1]
        return self.features[lo:hi], self.labels[lo:hi]

    def unpack(self, x) -> tuple[np.ndarray, np.ndarray]:
        x = _as_model(x, self.d)
        C = self.num_classes
        return x[: -C].reshape(self.n_features, C), x[-C:]

    def logits(self, X: np.ndarray, x) -> np.ndarray:
        W, b = self.unpack(x)
        return (X @ W.astype(X.dtype, copy=False)).astype(float) + b

    def _loss_and_grad(self, X, y, x, need_grad=True, need_loss=True, XT=None):
        z = self.logits(X, x)
        z -= z.max(axis=1, keepdims=True)
        ez = np.exp(z)
        s = ez.sum(axis=1)
        rows = np.arange(len(y))
        loss = None
        if need_loss:
            loss = float(np.mean(np.log(s) - z[rows, y]))
            if self.lam:
                loss += 0.5 * self.lam * float(x @ x)
        if not need_grad:
            return loss, None
        P = ez / s[:, None]
        P[rows, y] -= 1.0
        P /= len(y)
        C = self.num_classes
        grad = np.empty(self.d)
        grad[:-C] = ((X.T if XT is None else XT) @ P.astype(X.dtype, copy=False)).ravel()
        grad[-C:] = P.sum(axis=0)
        if self.lam:
            grad += self.lam * x
        return loss, grad

    def local_value(self, i: int, x) -> float:
        X, y = self.client_data(i)
        return self._loss_and_grad(X, y, _as_model(x, self.d), need_grad=False)[0]

    def local_gradient(self, i: int, x) -> np.ndarray:
        X, y = self.client_data(i)
        return self._loss_and_grad(X, y, _as_model(x, self.d), need_loss=False)[1]

    def local_stochastic_gradient(self, i, x, batch_size, rng) -> np.ndarray:
        X, y = self.client_data(i)
        n = len(y)
        if not 1 <= batch_size <= n:
            raise ContractError(f"batch size {batch_size} outside [1, {n}]")
        if batch_size == n:
            return self._loss_and_grad(X, y, _as_model(x, self.d), need_loss=False)[1]
        idx = rng.choice(n, size=batch_size, replace=False)
        return self._loss_and_grad(X[idx], y[idx], _as_model(x, self.d), need_loss=False)[1]

    def global_value(self, x) -> float:
        return float(sum(a * self.local_value(i, x) for i, a in enumerate(self.alpha)))

    def global_gradient(self, x) -> np.ndarray:
        x = _as_model(x, self.d)
        g = np.zeros(self.d)
        for i, a in enumerate(self.alpha):
            g += a * self.local_gradient(i, x)
        return g

    def value_and_gradient(self, x) -> tuple[float, np.ndarray]:
        """Global loss and gradient in one pass over all samples.

        Since ``alpha_i = n_i / N`` the weighted client average is the plain
        sample mean.  A transposed copy of the features is cached on first
        use; BLAS streams it much faster than the strided transpose.
        """
        x = _as_model(x, self.d)
        XT = self.__dict__.get("_features_t")
        if XT is None:
            XT = np.ascontiguousarray(self.features.T)
            object.__setattr__(self, "_features_t", XT)
        return self._loss_and_grad(self.features, self.labels, x, XT=XT)


# module-level API ----------------------------------------------------------


def global_value(problem, x) -> float:
    return problem.global_value(x)


def local_gradient(problem, i: int, x) -> np.ndarray:
    return problem.local_gradient(i, x)


def local_stochastic_gradient(problem, i, x, batch_size, rng) -> np.ndarray:
    return problem.local_stochastic_gradient(i, x, batch_size, rng)


def quadratic_optimum(q: QuadraticProblem) -> np.ndarray:
    """Solve ``H_bar x = e_bar`` directly."""
    H_bar, e_bar = q.H_bar, q.e_bar
    try:
        x = np.linalg.solve(H_bar, e_bar)
    except np.linalg.LinAlgError as exc:
        raise SingularityError("aggregate curvature matrix is singular") from exc
    resid = np.linalg.norm(H_bar @ x - e_bar)
    if resid > 1e-10 * max(np.linalg.norm(e_bar), 1.0):
        raise SingularityError(f"solve residual {resid:.3g} too large")
    return x


@dataclass(frozen=True)
class AssumptionConstants:
    """Smoothness ``L``, gradient-noise ``sigma`` and gradient bound ``G``.

    ``sigma`` and ``G`` are totals over all coordinates (``E||g - grad||^2 <=
    sigma^2``).  ``G`` comes from a probe sweep and is an estimate only.
    """

    L: float
    sigma: float
    G: float
    G_is_estimate: bool = True

    def __post_init__(self):
        if min(self.L, self.sigma, self.G) < 0:
            raise ContractError("assumption constants must be non-negative")


def estimate_constants(problem, probes=None, batch_size: int = 32, rng=None,
                       draws: int = 16) -> AssumptionConstants:
    """Quantify smoothness, noise and gradient bound for ``problem``.

    ``probes`` is an optional ``(k, d)`` array of points for the ``G`` sweep;
    by default a handful of structurally meaningful points is used.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    if isinstance(problem, QuadraticProblem):
        L = float(max(np.linalg.eigvalsh(H)[-1] for H in problem.H))
        sigma = problem.sigma * np.sqrt(problem.d)
        if probes is None:
            x_star = quadratic_optimum(problem)
            probes = np.vstack([np.zeros(problem.d), x_star, problem.local_optima])
        probes = np.atleast_2d(probes)
        g2 = max(
            float(np.sum(problem.local_gradient(i, p) ** 2))
            for p in probes for i in range(problem.m)
        )
        G = float(np.sqrt(g2 + sigma**2))
        return AssumptionConstants(L=L, sigma=float(sigma), G=G)

    if isinstance(problem, LogisticProblem):
        # softmax cross-entropy Hessian w.r.t. logits is bounded by I/2
        sq = np.einsum("ij,ij->i", problem.features, problem.features).astype(float) + 1.0
        L = max(0.5 * float(sq[lo:hi].mean())
                for lo, hi in zip(problem.offsets[:-1], problem.offsets[1:]))
        L += problem.lam
        if probes is None:
            probes = np.vstack([np.zeros(problem.d), 0.01 * rng.standard_normal((3, problem.d))])
        probes = np.atleast_2d(probes)
        var, gmax = 0.0, 0.0
        for p in probes:
            for i in range(problem.m):
                full = problem.local_gradient(i, p)
                b = min(batch_size, problem.offsets[i + 1] - problem.offsets[i])
                for _ in range(draws):
                    g = problem.local_stochastic_gradient(i, p, b, rng)
                    var = max(var, float(np.sum((g - full) ** 2)))
                    gmax = max(gmax, float(np.sum(g**2)))
        return AssumptionConstants(L=float(L), sigma=float(np.sqrt(var)), G=float(np.sqrt(gmax)))

    raise TypeError(f"unsupported problem type {type(problem).__name__}")
