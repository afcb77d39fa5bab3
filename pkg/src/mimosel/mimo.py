"""System model and constraint machinery for selection + 1-bit hybrid beamforming.

Covers the spectral-efficiency objective, the hard/relaxed antenna-selection
operators, the 1-bit phase quantizer and its sigmoid relaxation, digital-power
normalization, water-filling, and the water-filling-optimal digital beamformer
for a fixed analog stage.

Most operations are polymorphic: handed plain numpy arrays they evaluate
eagerly; handed :class:`~mimosel.autodiff.Tensor` / ``ComplexPair`` inputs they
record onto the tape and stay differentiable end to end.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import ComplexPair, Tensor
from .errors import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    NumericalError,
)

__all__ = [
    "SystemConfig",
    "SelectionMatrix",
    "HybridBeamformer",
    "PhaseQuantizerConfig",
    "achieved_rate",
    "quantize_phase",
    "soft_quantize_phase",
    "analog_from_phases",
    "normalize_digital",
    "water_filling",
    "full_digital_precoder",
    "full_digital_rate",
    "optimal_digital_beamformer",
    "hard_select",
    "relaxed_select",
    "logits_to_probabilities",
    "selected_channel",
]

LN2 = math.log(2.0)
TWO_PI = 2.0 * math.pi


@dataclass
class SystemConfig:
    """Dimension and power bookkeeping for one link.

    ``snr`` is the linear ratio of received power to noise power.  Phase
    shifters are 1-bit (``n_b = 1``); the field exists so the constant-modulus
    set could be widened later.
    """

    n_t: int
    n_ts: int
    n_rf: int
    n_s: int
    n_r: int
    snr: float
    n_b: int = 1

    def __post_init__(self):
        if not (self.n_s <= self.n_rf <= self.n_ts <= self.n_t):
            raise ContractError(
                f"need n_s <= n_rf <= n_ts <= n_t, got "
                f"{self.n_s}/{self.n_rf}/{self.n_ts}/{self.n_t}"
            )
        if self.n_s > self.n_r:
            raise ContractError(f"need n_s <= n_r, got {self.n_s} > {self.n_r}")
        if self.snr <= 0:
            raise ContractError(f"snr must be positive, got {self.snr}")
        if self.n_b != 1:
            raise ContractError("only 1-bit phase shifters are supported (n_b = 1)")

    @classmethod
    def with_snr_db(cls, n_t, n_ts, n_rf, n_s, n_r, snr_db):
        return cls(n_t, n_ts, n_rf, n_s, n_r, 10.0 ** (snr_db / 10.0))

    @property
    def snr_db(self):
        return 10.0 * math.log10(self.snr)

    def replace_snr(self, snr):
        return SystemConfig(self.n_t, self.n_ts, self.n_rf, self.n_s, self.n_r, snr)


@dataclass
class SelectionMatrix:
    """Hard antenna selection: ``n_ts`` distinct column indices into ``[0, n_t)``."""

    indices: np.ndarray
    n_t: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 1:
            raise ContractError("selection indices must be 1-D")
        if len(set(self.indices.tolist())) != self.indices.size:
            raise ContractError(f"duplicate antenna indices: {self.indices}")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.n_t):
            raise ContractError(f"antenna index out of range [0, {self.n_t})")

    @property
    def n_ts(self):
        return self.indices.size

    def dense(self):
        a = np.zeros((self.n_t, self.n_ts))
        a[self.indices, np.arange(self.n_ts)] = 1.0
        return a


@dataclass
class HybridBeamformer:
    """Analog (constant-modulus) and digital beamformer parts."""

    t_rf: np.ndarray
    t_bb: np.ndarray
    phases: np.ndarray | None = None


@dataclass
class PhaseQuantizerConfig:
    alpha: float
    mode: str = "hard"

    def __post_init__(self):
        if self.alpha <= 0:
            raise ContractError(f"alpha must be positive, got {self.alpha}")
        if self.mode not in ("hard", "soft"):
            raise ContractError(f"mode must be 'hard' or 'soft', got {self.mode!r}")


def _dense_selection(a):
    if isinstance(a, SelectionMatrix):
        return a.dense()
    return np.asarray(a, dtype=np.float64)


def selected_channel(h, selection):
    """Channel restricted to the selected transmit antennas (``H A``)."""
    if isinstance(selection, SelectionMatrix):
        return np.asarray(h)[..., :, selection.indices]
    return np.asarray(h) @ _dense_selection(selection)


# --------------------------------------------------------------------------
# Achieved rate
# --------------------------------------------------------------------------


def _logdet2_pd(m):
    """log2 det of a Hermitian-PD complex matrix via Cholesky."""
    chol = np.linalg.cholesky(m)
    return 2.0 * np.sum(np.log2(np.diagonal(chol, axis1=-2, axis2=-1).real), axis=-1)


def achieved_rate(h, a, t_rf, t_bb, cfg):
    """Spectral efficiency ``log2 det(I + (snr/n_s) G G^H)``, ``G = H A T_RF T_BB``.

    Accepts hard or relaxed selections.  With ``ComplexPair``/``Tensor``
    operands the result is a :class:`Tensor` and gradients flow through every
    argument; with numpy operands it returns a float (or an array for stacked
    inputs).
    """
    c = cfg.snr / cfg.n_s
    if isinstance(t_rf, ComplexPair) or isinstance(t_bb, ComplexPair) or isinstance(a, Tensor):
        if not (isinstance(t_rf, ComplexPair) and isinstance(t_bb, ComplexPair)):
            raise ContractError("tape-mode achieved_rate needs ComplexPair beamformers")
        h = np.asarray(h, dtype=np.complex128)
        if isinstance(a, Tensor):
            ha = ComplexPair(np.ascontiguousarray(h.real) @ a, np.ascontiguousarray(h.imag) @ a)
        else:
            hs = selected_channel(h, a) if a is not None else h
            ha = ComplexPair.from_complex(hs)
        g = ha @ (t_rf @ t_bb)
        gg = g @ g.h()
        eye = np.eye(gg.shape[-1])
        m = ComplexPair(gg.re * c + eye, gg.im * c)
        from .autodiff import logdet_hermitian_pd

        return logdet_hermitian_pd(m) * (1.0 / LN2)

    h = np.asarray(h, dtype=np.complex128)
    a_dense = _dense_selection(a) if a is not None else np.eye(h.shape[-1])
    t_rf = np.asarray(t_rf, dtype=np.complex128)
    t_bb = np.asarray(t_bb, dtype=np.complex128)
    if h.shape[-1] != a_dense.shape[-2]:
        raise DimensionError(f"H {h.shape} and A {a_dense.shape} do not conform")
    if a_dense.shape[-1] != t_rf.shape[-2] or t_rf.shape[-1] != t_bb.shape[-2]:
        raise DimensionError(
            f"A {a_dense.shape}, T_RF {t_rf.shape}, T_BB {t_bb.shape} do not conform"
        )
    g = h @ a_dense @ t_rf @ t_bb
    gg = g @ np.swapaxes(g.conj(), -1, -2)
    m = np.eye(gg.shape[-1]) + c * gg
    out = _logdet2_pd(m)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# Phase quantization
# --------------------------------------------------------------------------


def _check_phase_domain(theta):
    if np.any(theta < 0.0) or np.any(theta > TWO_PI):
        raise ContractError("phase values must lie in [0, 2*pi]")


def quantize_phase(theta):
    """1-bit phase quantizer: 0 on [0, pi), pi on [pi, 2*pi]; 2*pi clamps to pi."""
    theta = np.asarray(theta, dtype=np.float64)
    _check_phase_domain(theta)
    q = np.pi * np.floor(theta / np.pi)
    return np.minimum(q, np.pi)


def _soft_branch_constants(theta_values):
    centers = np.where(
        theta_values <= 0.5 * np.pi,
        0.0,
        np.where(theta_values <= 1.5 * np.pi, np.pi, TWO_PI),
    )
    offsets = np.where(
        theta_values <= 0.5 * np.pi,
        -np.pi,
        np.where(theta_values <= 1.5 * np.pi, 0.0, np.pi),
    )
    return centers, offsets


def soft_quantize_phase(theta, alpha):
    """Differentiable sigmoid-staircase relaxation of :func:`quantize_phase`.

    Three sigmoid branches centred at 0, pi and 2*pi with scale ``alpha``;
    the branch is selected by the phase value, so the map is piecewise smooth.
    """
    if alpha <= 0:
        raise ContractError(f"alpha must be positive, got {alpha}")
    if isinstance(theta, Tensor):
        values = theta.data
        _check_phase_domain(values)
        centers, offsets = _soft_branch_constants(values)
        s = ((theta - centers) * (1.0 / alpha)).sigmoid()
        return s * np.pi + offsets
    theta = np.asarray(theta, dtype=np.float64)
    _check_phase_domain(theta)
    centers, offsets = _soft_branch_constants(theta)
    return np.pi / (1.0 + np.exp(-(theta - centers) / alpha)) + offsets


def analog_from_phases(omega, mode="hard", alpha=None):
    """Analog beamformer entries ``exp(j q(theta)) / sqrt(n_ts)``.

    ``omega`` is the ``(..., n_ts, n_rf)`` phase matrix.  Hard mode applies
    the 1-bit quantizer and returns a complex array whose entries are exactly
    ``+-1/sqrt(n_ts)``.  Soft mode applies the sigmoid relaxation; with a
    :class:`Tensor` input the result is a differentiable ``ComplexPair``.
    """
    if mode == "hard":
        values = omega.data if isinstance(omega, Tensor) else np.asarray(omega, dtype=np.float64)
        n_ts = values.shape[-2]
        q = quantize_phase(values)
        scale = 1.0 / math.sqrt(n_ts)
        re = np.where(q == 0.0, scale, -scale)
        return re.astype(np.complex128)
    if mode != "soft":
        raise ContractError(f"mode must be 'hard' or 'soft', got {mode!r}")
    if alpha is None:
        raise ContractError("soft mode requires alpha")
    if isinstance(omega, Tensor):
        n_ts = omega.data.shape[-2]
        scale = 1.0 / math.sqrt(n_ts)
        f = soft_quantize_phase(omega, alpha)
        return ComplexPair(f.cos() * scale, f.sin() * scale)
    omega = np.asarray(omega, dtype=np.float64)
    n_ts = omega.shape[-2]
    f = soft_quantize_phase(omega, alpha)
    return np.exp(1j * f) / math.sqrt(n_ts)


# --------------------------------------------------------------------------
# Digital normalization
# --------------------------------------------------------------------------


def normalize_digital(t_rf, t_bb_raw, n_s):
    """Scale the raw digital beamformer so ``||T_RF T_BB||_F^2 = n_s`` exactly.

    Positive rescalings of ``t_bb_raw`` leave the output unchanged.
    """
    if isinstance(t_rf, ComplexPair) or isinstance(t_bb_raw, ComplexPair):
        prod = t_rf @ t_bb_raw
        norm2 = prod.abs2().sum(axis=(-2, -1), keepdims=True)
        if np.any(norm2.data <= 0.0):
            raise DegenerateInputError("zero-norm analog/digital product")
        factor = (norm2 * (1.0 / n_s)).sqrt().reciprocal()
        return ComplexPair(t_bb_raw.re * factor, t_bb_raw.im * factor)
    t_rf = np.asarray(t_rf, dtype=np.complex128)
    t_bb_raw = np.asarray(t_bb_raw, dtype=np.complex128)
    prod = t_rf @ t_bb_raw
    norm = np.linalg.norm(prod, axis=(-2, -1))
    if np.any(norm == 0.0):
        raise DegenerateInputError("zero-norm analog/digital product")
    if t_bb_raw.ndim > 2:
        norm = norm[..., None, None]
    return math.sqrt(n_s) * t_bb_raw / norm


# --------------------------------------------------------------------------
# Water-filling and the optimal digital beamformer
# --------------------------------------------------------------------------


def water_filling(gains, total_power, noise_factor):
    """Capacity-optimal power allocation over parallel gains.

    Solves ``max sum log2(1 + c * g_i^2 * p_i)`` subject to ``sum p_i = P``,
    ``p_i >= 0``: the solution is ``p_i = max(mu - 1/(c g_i^2), 0)`` with the
    water level ``mu`` found by bisection.

    Parameters
    ----------
    gains : array_like
        Non-negative singular values, sorted descending.
    total_power : float
        Power budget ``P`` (> 0).
    noise_factor : float
        The factor ``c`` multiplying the squared gains (> 0).

    Returns
    -------
    np.ndarray
        Optimal powers, same length as ``gains``.
    """
    gains = np.asarray(gains, dtype=np.float64)
    if gains.ndim != 1 or gains.size == 0:
        raise ContractError("gains must be a non-empty 1-D array")
    if np.any(gains < 0):
        raise ContractError("gains must be non-negative")
    if np.any(np.diff(gains) > 0):
        raise ContractError("gains must be sorted in descending order")
    if total_power <= 0:
        raise ContractError(f"total_power must be positive, got {total_power}")
    if noise_factor <= 0:
        raise ContractError(f"noise_factor must be positive, got {noise_factor}")
    if gains[0] == 0.0:
        raise DegenerateInputError("all gains are zero")

    inv = [
        (1.0 / (noise_factor * g * g)) if g > 0.0 else math.inf
        for g in gains.tolist()
    ]
    p_target = float(total_power)
    lo = min(inv)
    hi = lo + p_target

    def allocated(mu):
        return sum(max(mu - a, 0.0) for a in inv)

    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if allocated(mid) > p_target:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-16 * max(1.0, abs(hi)):
            break
    mu = 0.5 * (lo + hi)
    powers = np.array([max(mu - a, 0.0) for a in inv])
    residual = abs(powers.sum() - p_target)
    if residual > 1e-12 * max(1.0, p_target):
        raise NumericalError(f"water level bisection residual {residual:.3e}")
    return powers


_RANK_TOL = 1e-12


def full_digital_precoder(h, cfg):
    """Unconstrained-precoder reference: right singular vectors + water-filling.

    Returns ``(F, rate)`` where ``F`` has ``||F||_F^2 = n_s`` and ``rate`` is
    the corresponding spectral efficiency.  Rank-deficient channels allocate
    over the available modes and pad zero columns.
    """
    h = np.asarray(h, dtype=np.complex128)
    _, s, vh = np.linalg.svd(h, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        raise DegenerateInputError("zero channel matrix")
    active = int(np.sum(s > _RANK_TOL * s[0]))
    k = min(cfg.n_s, active)
    c = cfg.snr / cfg.n_s
    powers = water_filling(s[:k], cfg.n_s, c)
    f = vh[:k].conj().T @ np.diag(np.sqrt(powers))
    if k < cfg.n_s:
        f = np.hstack([f, np.zeros((h.shape[-1], cfg.n_s - k))])
    rate = float(np.sum(np.log2(1.0 + c * s[:k] ** 2 * powers)))
    return f, rate


def full_digital_rate(h, cfg):
    return full_digital_precoder(h, cfg)[1]


def optimal_digital_beamformer(h_eff, t_rf, cfg):
    """Rate-optimal digital beamformer for a fixed analog stage.

    The coupled power constraint ``||T_RF T_BB||_F^2 = n_s`` is handled by a
    whitening change of variables: with ``Q = T_RF^H T_RF`` and
    ``W = Q^{1/2} T_BB`` the constraint becomes the plain ``||W||_F^2 = n_s``
    and the effective channel seen by ``W`` is ``H_eff Q^{-1/2}``.  The
    optimal ``W`` is then the standard SVD + water-filling solution, and
    ``T_BB = Q^{-1/2} W``.  A Gram matrix singular beyond tolerance falls
    back to the pseudo-inverse square root (with a ``RuntimeWarning``).
    """
    h_eff = np.asarray(h_eff, dtype=np.complex128)
    t_rf = np.asarray(t_rf, dtype=np.complex128)
    if h_eff.shape[-1] != t_rf.shape[-1]:
        raise DimensionError(
            f"h_eff {h_eff.shape} does not conform with t_rf {t_rf.shape}"
        )
    gram = t_rf.conj().T @ t_rf
    w, v = np.linalg.eigh(gram)
    tol = _RANK_TOL * max(w[-1], 0.0)
    if w[0] <= tol:
        warnings.warn(
            "optimal_digital_beamformer: singular analog Gram matrix, "
            "using pseudo-inverse",
            RuntimeWarning,
            stacklevel=2,
        )
    inv_sqrt_diag = np.where(w > tol, 1.0 / np.sqrt(np.maximum(w, tol)), 0.0)
    isqrt = (v * inv_sqrt_diag) @ v.conj().T
    h_w = h_eff @ isqrt
    _, s, vh = np.linalg.svd(h_w, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        raise DegenerateInputError("whitened effective channel is zero")
    active = int(np.sum(s > _RANK_TOL * s[0]))
    k = min(cfg.n_s, active)
    c = cfg.snr / cfg.n_s
    powers = water_filling(s[:k], cfg.n_s, c)
    w_mat = vh[:k].conj().T @ np.diag(np.sqrt(powers))
    if k < cfg.n_s:
        w_mat = np.hstack([w_mat, np.zeros((t_rf.shape[-1], cfg.n_s - k))])
    return isqrt @ w_mat


# --------------------------------------------------------------------------
# Antenna selection operators
# --------------------------------------------------------------------------


def hard_select(logits, noise=False, rng=None):
    """Sequential-exclusion argmax selection from per-slot logit rows.

    Row ``j`` of ``logits`` (shape ``(n_ts, n_t)``) scores the candidate
    antennas for the j-th slot; slots are filled in order, each taking the
    highest-scoring antenna not already taken (lowest index on ties).  With
    ``noise=True`` i.i.d. Gumbel(0, 1) draws from ``rng`` are added first.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ContractError(f"logits must be (n_ts, n_t), got {logits.shape}")
    n_ts, n_t = logits.shape
    scores = logits.copy()
    if noise:
        if rng is None:
            raise ContractError("noise=True requires an rng")
        scores = scores + rng.gumbel(size=scores.shape)
    taken = np.zeros(n_t, dtype=bool)
    indices = np.empty(n_ts, dtype=np.int64)
    for j in range(n_ts):
        row = np.where(taken, -np.inf, scores[j])
        indices[j] = int(np.argmax(row))
        taken[indices[j]] = True
    return SelectionMatrix(indices, n_t)


def relaxed_select(logits, tau, noise=True, rng=None):
    """Temperature-``tau`` softmax relaxation of :func:`hard_select`.

    Returns the relaxed selection matrix with shape ``(..., n_t, n_ts)``
    whose columns are softmax distributions over antennas; differentiable
    when ``logits`` is a :class:`Tensor`.
    """
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    if isinstance(logits, Tensor):
        shape = logits.data.shape
        if noise:
            if rng is None:
                raise ContractError("noise=True requires an rng")
            g = rng.gumbel(size=shape)
            scores = logits + g
        else:
            scores = logits
        soft = (scores * (1.0 / tau)).softmax(axis=-1)
        axes = tuple(range(len(shape) - 2)) + (len(shape) - 1, len(shape) - 2)
        return soft.transpose(axes)
    logits = np.asarray(logits, dtype=np.float64)
    if noise:
        if rng is None:
            raise ContractError("noise=True requires an rng")
        logits = logits + rng.gumbel(size=logits.shape)
    shifted = logits / tau
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    soft = e / e.sum(axis=-1, keepdims=True)
    return np.swapaxes(soft, -1, -2)


def logits_to_probabilities(logits):
    """Per-row softmax at temperature 1 with no noise."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)
