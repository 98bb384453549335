"""Uplink Gaussian multiple-access channel with optional fading."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import streams


@dataclass(frozen=True)
class ChannelConfig:
    """Noise variance per coordinate plus the fading model.

    ``fading`` is ``"none"``, ``"rayleigh"`` (fresh gains each round with
    scale ``rayleigh_scale``) or ``"fixed"`` (``fixed_gains`` every round).
    Rayleigh draws below ``gain_floor * rayleigh_scale`` are clamped or
    redrawn according to ``floor_mode``.
    """

    sigma_c2: float = 0.0
    fading: str = "none"
    rayleigh_scale: float = 1.0
    fixed_gains: tuple[float, ...] | None = None
    gain_floor: float = 0.1
    floor_mode: str = "clamp"
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.sigma_c2) or self.sigma_c2 < 0:
            raise ValueError("sigma_c2 must be finite and non-negative")
        if self.fading not in ("none", "rayleigh", "fixed"):
            raise ValueError(f"unknown fading model {self.fading!r}")
        if self.rayleigh_scale <= 0:
            raise ValueError("rayleigh_scale must be positive")
        if self.fading == "fixed":
            if self.fixed_gains is None or min(self.fixed_gains) <= 0:
                raise ValueError("fixed fading needs positive fixed_gains")
        if self.floor_mode not in ("clamp", "redraw"):
            raise ValueError(f"unknown floor mode {self.floor_mode!r}")


@dataclass(frozen=True)
class PowerCheck:
    ok: bool
    power: float
    excess: float

    def __bool__(self) -> bool:
        return self.ok


def check_power(z, limit: float) -> PowerCheck:
    if limit <= 0:
        raise ValueError("power limit must be positive")
    power = float(np.dot(z, z))
    if power <= limit:
        return PowerCheck(True, power, 0.0)
    return PowerCheck(False, power, power - limit)


def sigma_from_snr(snr_db: float, reference_power: float, d: int) -> float:
    """Per-coordinate noise variance for a per-coordinate SNR of ``snr_db``."""
    if reference_power <= 0 or d < 1:
        raise ValueError("reference_power must be positive and d >= 1")
    return (reference_power / d) / 10.0 ** (snr_db / 10.0)


_ULP_STEPS = np.arange(1, 4097, dtype=float)
# 0, +1, -1, +2, -2, ... so the nearest admissible neighbour wins
_ULP_OFFSETS = np.concatenate([[0.0], np.column_stack([_ULP_STEPS, -_ULP_STEPS]).ravel()])


def _exactly_invertible(h: float) -> float:
    # failures of h * (1/h) == 1.0 come in runs of up to a few hundred ulps
    cand = h + _ULP_OFFSETS * np.spacing(h)
    ok = np.flatnonzero(cand * (1.0 / cand) == 1.0)
    if len(ok) == 0:
        raise ArithmeticError(f"no exactly invertible gain near {h!r}")
    return float(cand[ok[0]])


def precoder(h: float) -> float:
    """Channel-inversion precoder; ``h * precoder(h) == 1.0`` for drawn gains."""
    return 1.0 / h


def draw_gains_with_clamps(cfg: ChannelConfig, m: int, round_: int,
                           rng: np.random.Generator | None = None) -> tuple[np.ndarray, int]:
    """Gains for round ``round_`` and the number of floor events."""
    if cfg.fading == "none":
        return np.ones(m), 0
    if cfg.fading == "fixed":
        h = np.asarray(cfg.fixed_gains, dtype=float)
        if h.shape != (m,):
            raise ValueError(f"fixed_gains has {h.size} entries for {m} clients")
        return h.copy(), 0
    rng = streams.stream(cfg.seed, streams.GAINS, round_) if rng is None else rng
    h_min = cfg.gain_floor * cfg.rayleigh_scale
    h = rng.rayleigh(cfg.rayleigh_scale, size=m)
    low = h < h_min
    events = int(low.sum())
    if cfg.floor_mode == "clamp":
        h[low] = h_min
    else:
        while low.any():
            h[low] = rng.rayleigh(cfg.rayleigh_scale, size=int(low.sum()))
            low = h < h_min
    return np.array([_exactly_invertible(v) for v in h]), events


def draw_gains(cfg: ChannelConfig, m: int, round_: int,
               rng: np.random.Generator | None = None) -> np.ndarray:
    return draw_gains_with_clamps(cfg, m, round_, rng)[0]


def superpose(signals, gains, precoders=None) -> np.ndarray:
    """Noiseless channel output ``sum_i gains_i * precoders_i * z_i``.

    The scalar gain and precoder combine before touching the vector, and the
    reduction runs in client order, so results are reproducible bit for bit.
    """
    signals = np.asarray(signals, dtype=float)
    if signals.ndim != 2:
        raise ValueError("signals must be an (m, d) array")
    gains = np.asarray(gains, dtype=float)
    if gains.shape != (len(signals),):
        raise ValueError(f"{len(signals)} signals but {gains.size} gains")
    if precoders is not None:
        gains = gains * np.asarray(precoders, dtype=float)
    out = np.zeros(signals.shape[1])
    for g, z in zip(gains, signals):
        out += g * z
    return out


def transmit(signals, gains, cfg: ChannelConfig, rng: np.random.Generator,
             precoders=None) -> np.ndarray:
    """One synchronous channel use: superposition plus ``N(0, sigma_c2 I)`` noise."""
    y = superpose(signals, gains, precoders)
    if cfg.sigma_c2 > 0:
        y += np.sqrt(cfg.sigma_c2) * rng.standard_normal(y.shape)
    return y
