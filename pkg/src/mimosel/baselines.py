"""Classical reference algorithms for selection + 1-bit hybrid beamforming.

Includes the brute-force joint oracle, greedy and random antenna selection,
a coordinate-descent alternating-minimization hybrid beamformer, and the
full-array / switch-based reference architectures.
"""

from __future__ import annotations

import itertools
import math
import time
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, SearchSpaceError
from .mimo import (
    HybridBeamformer,
    SelectionMatrix,
    SystemConfig,
    achieved_rate,
    full_digital_precoder,
    full_digital_rate,
    normalize_digital,
    optimal_digital_beamformer,
)

__all__ = [
    "BaselineResult",
    "exhaustive_joint_search",
    "greedy_antenna_selection",
    "random_antenna_selection",
    "cdm_altmin",
    "full_array_reference",
    "switch_based_reference",
    "gas_cdm",
    "ras_cdm",
]

EXHAUSTIVE_GUARD = 10**6


@dataclass
class BaselineResult:
    selection: SelectionMatrix
    beamformer: HybridBeamformer
    rate: float
    elapsed: float
    algorithm: str


def _sign_patterns(n_ts, n_rf):
    """All 2^(n_ts*n_rf) one-bit analog matrices, scaled to constant modulus."""
    scale = 1.0 / math.sqrt(n_ts)
    count = n_ts * n_rf
    patterns = np.empty((2**count, n_ts, n_rf))
    for code in range(2**count):
        bits = (code >> np.arange(count)) & 1
        patterns[code] = np.where(bits.reshape(n_ts, n_rf) == 0, scale, -scale)
    return patterns.astype(np.complex128)


def exhaustive_joint_search(h, cfg):
    """Globally optimal selection and analog matrix by full enumeration.

    Every antenna subset is paired with every 1-bit analog matrix; the
    digital beamformer is the water-filling optimum for each candidate.
    Refuses to run when the candidate count exceeds ``EXHAUSTIVE_GUARD``.
    """
    n_candidates = math.comb(cfg.n_t, cfg.n_ts) * 2 ** (cfg.n_ts * cfg.n_rf * cfg.n_b)
    if n_candidates > EXHAUSTIVE_GUARD:
        raise SearchSpaceError(
            f"exhaustive search space has {n_candidates} candidates "
            f"(guard {EXHAUSTIVE_GUARD})"
        )
    h = np.asarray(h, dtype=np.complex128)
    start = time.perf_counter()
    patterns = _sign_patterns(cfg.n_ts, cfg.n_rf)
    best = None
    with warnings.catch_warnings():
        # rank-deficient sign patterns (e.g. repeated columns) are legitimate
        # candidates here; the pseudo-inverse fallback handles them
        warnings.simplefilter("ignore", RuntimeWarning)
        for subset in itertools.combinations(range(cfg.n_t), cfg.n_ts):
            h_s = h[:, subset]
            for t_rf in patterns:
                t_bb = optimal_digital_beamformer(h_s @ t_rf, t_rf, cfg)
                rate = achieved_rate(h_s, None, t_rf, t_bb, cfg)
                if best is None or rate > best[0]:
                    best = (rate, subset, t_rf.copy(), t_bb)
    rate, subset, t_rf, t_bb = best
    elapsed = time.perf_counter() - start
    return BaselineResult(
        selection=SelectionMatrix(np.array(subset), cfg.n_t),
        beamformer=HybridBeamformer(t_rf, t_bb),
        rate=float(rate),
        elapsed=elapsed,
        algorithm="exhaustive",
    )


def greedy_antenna_selection(h, cfg, rate_evaluator=None):
    """Incremental greedy selection maximizing a submatrix rate criterion.

    Starts empty and adds, at each of ``n_ts`` steps, the antenna whose
    inclusion maximizes ``rate_evaluator`` on the grown submatrix (ties break
    to the lowest antenna index).  The default criterion is the unconstrained
    SVD + water-filling rate.
    """
    h = np.asarray(h, dtype=np.complex128)
    if rate_evaluator is None:
        rate_evaluator = lambda h_sub: full_digital_rate(h_sub, cfg)
    chosen: list[int] = []
    remaining = list(range(cfg.n_t))
    for _ in range(cfg.n_ts):
        rates = [rate_evaluator(h[:, chosen + [cand]]) for cand in remaining]
        pick = remaining[int(np.argmax(rates))]
        chosen.append(pick)
        remaining.remove(pick)
    return SelectionMatrix(np.array(chosen), cfg.n_t)


def random_antenna_selection(cfg, rng):
    """Uniform random subset of ``n_ts`` antennas, without replacement."""
    indices = rng.choice(cfg.n_t, size=cfg.n_ts, replace=False)
    return SelectionMatrix(indices, cfg.n_t)


def cdm_altmin(h_s, cfg, max_iters=50, tol=1e-6, callback=None):
    """Alternating minimization of ``||F_opt - T_RF T_BB||_F`` with 1-bit entries.

    The target ``F_opt`` is the unconstrained SVD + water-filling precoder of
    the selected channel.  Each iteration performs a least-squares digital
    update ``T_BB = pinv(T_RF) F_opt`` followed by one coordinate-descent
    sweep over every analog entry, flipping any sign that lowers the
    objective.  Stops after ``max_iters`` iterations or when the relative
    objective decrease falls below ``tol``.  The returned digital beamformer
    is re-normalized to the exact power constraint.

    ``callback``, when given, receives the objective value after every
    iteration (non-increasing by construction).
    """
    h_s = np.asarray(h_s, dtype=np.complex128)
    n_ts = h_s.shape[-1]
    f_opt, _ = full_digital_precoder(h_s, cfg)
    scale = 1.0 / math.sqrt(n_ts)

    # warm start: copy the sign of the real part of the column-matched target
    col_map = np.arange(cfg.n_rf) % cfg.n_s
    signs = np.where(f_opt[:, col_map].real >= 0.0, scale, -scale)
    t_rf = signs.astype(np.complex128)

    prev_obj = math.inf
    t_bb = np.zeros((cfg.n_rf, cfg.n_s), dtype=np.complex128)
    for _ in range(max(1, max_iters)):
        t_bb = np.linalg.pinv(t_rf) @ f_opt
        obj = np.linalg.norm(f_opt - t_rf @ t_bb)
        for m in range(n_ts):
            for n in range(cfg.n_rf):
                t_rf[m, n] = -t_rf[m, n]
                trial = np.linalg.norm(f_opt - t_rf @ t_bb)
                if trial < obj:
                    obj = trial
                else:
                    t_rf[m, n] = -t_rf[m, n]
        if callback is not None:
            callback(obj)
        if prev_obj - obj < tol * max(prev_obj, 1.0):
            break
        prev_obj = obj

    try:
        t_bb = normalize_digital(t_rf, t_bb, cfg.n_s)
    except DegenerateInputError:
        # orthogonal-target corner case: fall back to a trivial digital stage
        t_bb = normalize_digital(t_rf, np.eye(cfg.n_rf, cfg.n_s), cfg.n_s)
    return HybridBeamformer(t_rf, t_bb)


def full_array_reference(h, cfg):
    """Conventional hybrid beamforming with every antenna active."""
    h = np.asarray(h, dtype=np.complex128)
    cfg_full = SystemConfig(cfg.n_t, cfg.n_t, cfg.n_rf, cfg.n_s, cfg.n_r, cfg.snr)
    start = time.perf_counter()
    beamformer = cdm_altmin(h, cfg_full)
    elapsed = time.perf_counter() - start
    selection = SelectionMatrix(np.arange(cfg.n_t), cfg.n_t)
    rate = achieved_rate(h, selection, beamformer.t_rf, beamformer.t_bb, cfg_full)
    return BaselineResult(selection, beamformer, float(rate), elapsed, "full-array")


def switch_based_reference(h, cfg):
    """Switch-only architecture: greedy n_rf-antenna selection, no phase shifters."""
    h = np.asarray(h, dtype=np.complex128)
    cfg_sw = SystemConfig(cfg.n_t, cfg.n_rf, cfg.n_rf, cfg.n_s, cfg.n_r, cfg.snr)
    start = time.perf_counter()
    selection = greedy_antenna_selection(h, cfg_sw)
    h_s = h[:, selection.indices]
    t_rf = np.eye(cfg.n_rf, dtype=np.complex128)
    t_bb = optimal_digital_beamformer(h_s, t_rf, cfg_sw)
    elapsed = time.perf_counter() - start
    rate = achieved_rate(h_s, None, t_rf, t_bb, cfg_sw)
    return BaselineResult(
        selection, HybridBeamformer(t_rf, t_bb), float(rate), elapsed, "switch-based"
    )


def gas_cdm(h, cfg, max_iters=50):
    """Greedy antenna selection followed by the alternating-minimization beamformer."""
    h = np.asarray(h, dtype=np.complex128)
    start = time.perf_counter()
    selection = greedy_antenna_selection(h, cfg)
    beamformer = cdm_altmin(h[:, selection.indices], cfg, max_iters=max_iters)
    elapsed = time.perf_counter() - start
    rate = achieved_rate(h, selection, beamformer.t_rf, beamformer.t_bb, cfg)
    return BaselineResult(selection, beamformer, float(rate), elapsed, "gas-cdm")


def ras_cdm(h, cfg, rng, max_iters=50):
    """Random antenna selection followed by the alternating-minimization beamformer."""
    h = np.asarray(h, dtype=np.complex128)
    start = time.perf_counter()
    selection = random_antenna_selection(cfg, rng)
    beamformer = cdm_altmin(h[:, selection.indices], cfg, max_iters=max_iters)
    elapsed = time.perf_counter() - start
    rate = achieved_rate(h, selection, beamformer.t_rf, beamformer.t_bb, cfg)
    return BaselineResult(selection, beamformer, float(rate), elapsed, "ras-cdm")
