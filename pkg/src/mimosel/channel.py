"""Synthetic clustered multipath (Saleh-Valenzuela) channel generation.

Channels are sums of L rank-1 outer products of receive/transmit steering
vectors weighted by complex path gains, rescaled per sample so that
``||H||_F^2 = N_R * N_T`` holds exactly.  Antenna spacing is fixed at half a
wavelength and is baked into the steering-vector phase term.

Datasets round-trip through a small binary container ("MCH1").
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateInputError, FormatError

__all__ = [
    "ChannelModelConfig",
    "Dataset",
    "steering_vector",
    "generate_channel",
    "generate_dataset",
    "split_dataset",
    "perturb_csi",
    "write_dataset",
    "read_dataset",
]

TWO_PI = 2.0 * np.pi


@dataclass
class ChannelModelConfig:
    """Path statistics for the synthetic channel draw.

    The defaults are implementer-chosen (five dominant paths, Rayleigh gain
    magnitudes whose mean power decays as ``exp(-gain_decay * l)`` across
    paths, uniform delays up to ``delay_max`` at bandwidth ``bandwidth``,
    uniform elevation angles within ``elevation_range`` and azimuth angles
    within ``azimuth_range``).  Gain phases are uniform on [0, 2*pi).
    """

    n_paths: int = 5
    bandwidth: float = 100e6
    delay_range: tuple[float, float] = (0.0, 100e-9)
    gain_decay: float = 1.0
    elevation_range: tuple[float, float] = (-np.pi / 3, np.pi / 3)
    azimuth_range: tuple[float, float] = (0.0, TWO_PI)
    seed: int = 0

    def __post_init__(self):
        if self.n_paths < 1:
            raise ContractError(f"n_paths must be >= 1, got {self.n_paths}")
        lo, hi = self.delay_range
        if lo < 0 or hi < lo:
            raise ContractError(f"invalid delay_range {self.delay_range}")
        elo, ehi = self.elevation_range
        if elo < -np.pi / 2 or ehi > np.pi / 2 or ehi < elo:
            raise ContractError(
                f"elevation_range must lie within [-pi/2, pi/2], got {self.elevation_range}"
            )
        alo, ahi = self.azimuth_range
        if alo < 0 or ahi > TWO_PI or ahi < alo:
            raise ContractError(
                f"azimuth_range must lie within [0, 2*pi), got {self.azimuth_range}"
            )


def steering_vector(n_elem, elevation, azimuth):
    """Uniform-linear-array steering vector at half-wavelength spacing.

    Element ``k`` equals ``exp(j * 2*pi * k * sin(elevation) * cos(azimuth))``
    for ``k = 0 .. n_elem-1``.
    """
    if n_elem < 1:
        raise ContractError(f"n_elem must be >= 1, got {n_elem}")
    phase = TWO_PI * np.arange(n_elem) * np.sin(elevation) * np.cos(azimuth)
    return np.exp(1j * phase)


def _uniform(rng, lo_hi, size=None):
    lo, hi = lo_hi
    return rng.uniform(lo, hi, size=size)


def generate_channel(cfg, n_r, n_t, rng):
    """Draw one ``n_r x n_t`` channel matrix.

    ``H = gamma * sum_l |a_l| e^{j phi_l} e^{j 2 pi tau_l B} a_r a_t^H`` with
    ``gamma`` chosen so ``||H||_F^2 = n_r * n_t`` exactly.  A degenerate
    all-zero sum (probability ~0) triggers a fresh draw.
    """
    target = float(n_r * n_t)
    for _ in range(16):
        h = np.zeros((n_r, n_t), dtype=np.complex128)
        for l in range(cfg.n_paths):
            power = np.exp(-cfg.gain_decay * l)
            mag = rng.rayleigh(scale=np.sqrt(power / 2.0))
            phase = rng.uniform(0.0, TWO_PI)
            tau = _uniform(rng, cfg.delay_range)
            gain = mag * np.exp(1j * phase) * np.exp(1j * TWO_PI * tau * cfg.bandwidth)
            a_r = steering_vector(n_r, _uniform(rng, cfg.elevation_range), _uniform(rng, cfg.azimuth_range))
            a_t = steering_vector(n_t, _uniform(rng, cfg.elevation_range), _uniform(rng, cfg.azimuth_range))
            h += gain * np.outer(a_r, a_t.conj())
        norm2 = np.vdot(h, h).real
        if norm2 > 0.0:
            return h * np.sqrt(target / norm2)
    raise DegenerateInputError("channel draw produced an all-zero sum repeatedly")


@dataclass
class Dataset:
    """An ordered collection of equal-size channel matrices."""

    samples: np.ndarray  # (count, n_r, n_t) complex128
    tag: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.complex128)
        if self.samples.ndim != 3:
            raise ContractError(
                f"samples must be (count, n_r, n_t), got shape {self.samples.shape}"
            )

    def __len__(self):
        return self.samples.shape[0]

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def n_r(self):
        return self.samples.shape[1]

    @property
    def n_t(self):
        return self.samples.shape[2]


def generate_dataset(cfg, n_r, n_t, count, tag=""):
    """Generate ``count`` channels, one independent substream per sample."""
    seeds = np.random.SeedSequence(cfg.seed).spawn(count)
    samples = np.empty((count, n_r, n_t), dtype=np.complex128)
    for i, ss in enumerate(seeds):
        samples[i] = generate_channel(cfg, n_r, n_t, np.random.default_rng(ss))
    return Dataset(samples, tag=tag)


def split_dataset(dataset, train_fraction, rng):
    """Shuffle-split into disjoint train/test datasets."""
    if not 0.0 < train_fraction < 1.0:
        raise ContractError(f"train_fraction must be in (0, 1), got {train_fraction}")
    count = len(dataset)
    order = rng.permutation(count)
    n_train = int(round(train_fraction * count))
    train = Dataset(dataset.samples[order[:n_train]], tag="train")
    test = Dataset(dataset.samples[order[n_train:]], tag="test")
    return train, test


def perturb_csi(h, nmse, rng):
    """Additive circular-Gaussian estimation-error surrogate.

    Returns ``H + E`` with ``E{||E||_F^2} / ||H||_F^2 = nmse``, re-normalized
    to the Frobenius constraint.  ``nmse = 0`` returns ``h`` unchanged.
    """
    if nmse < 0:
        raise ContractError(f"nmse must be >= 0, got {nmse}")
    h = np.asarray(h, dtype=np.complex128)
    if nmse == 0:
        return h.copy()
    n_r, n_t = h.shape
    scale = np.sqrt(nmse / 2.0)
    noise = scale * (rng.standard_normal(h.shape) + 1j * rng.standard_normal(h.shape))
    noisy = h + noise
    norm2 = np.vdot(noisy, noisy).real
    return noisy * np.sqrt(n_r * n_t / norm2)


# --------------------------------------------------------------------------
# Dataset container ("MCH1"): magic, LE u32 count / n_r / n_t, then per
# sample the row-major complex entries as interleaved (re, im) LE float64.
# --------------------------------------------------------------------------

_MAGIC = b"MCH1"
_HEADER = struct.Struct("<4sIII")


def write_dataset(path, dataset):
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, len(dataset), dataset.n_r, dataset.n_t))
        fh.write(dataset.samples.astype("<c16").tobytes())


def read_dataset(path, tag=""):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FormatError("truncated dataset header", len(blob))
    magic, count, n_r, n_t = _HEADER.unpack_from(blob, 0)
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {_MAGIC!r}", 0)
    expected = _HEADER.size + count * n_r * n_t * 16
    if len(blob) != expected:
        raise FormatError(
            f"dataset payload has {len(blob)} bytes, expected {expected}",
            min(len(blob), expected),
        )
    samples = (
        np.frombuffer(blob, dtype="<c16", offset=_HEADER.size)
        .reshape(count, n_r, n_t)
        .copy()
    )
    return Dataset(samples, tag=tag)
