"""Selection and beamforming networks sharing a small residual feature extractor.

The selection network maps the full channel matrix to per-slot antenna logits;
the beamforming network maps a selected channel to analog phases and a raw
digital beamformer.  Both stack Re/Im/modulus channels of their input, run
conv -> residual conv block -> conv -> flatten -> FC, and attach linear heads.

Forward passes are written once in tape primitives.  In deployment ("test")
mode parameters are wrapped as constants, so the same code runs eagerly and
the discrete steps (sequential argmax selection, 1-bit quantization, exact
power normalization) are applied in plain numpy.  In "train" mode the relaxed,
differentiable counterparts are used instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    BatchNormState,
    ComplexPair,
    Tape,
    Tensor,
    batch_norm,
    concat,
    conv2d,
    load_params,
    save_params,
)
from .errors import ConfigMismatchError, ContractError, FormatError
from .mimo import (
    HybridBeamformer,
    SystemConfig,
    analog_from_phases,
    hard_select,
    normalize_digital,
    relaxed_select,
)

__all__ = [
    "FeatureExtractorConfig",
    "JointModel",
    "TrainForward",
    "build_input_tensor",
    "extract_features",
    "asnet_forward",
    "bfnet_forward",
    "joint_forward",
    "save_model",
    "load_model",
]

TWO_PI = 2.0 * np.pi

_BN_KEYS = ("conv_in", "res1", "res2", "conv_out")


@dataclass
class FeatureExtractorConfig:
    """Width of the shared extractor: conv filters, kernel size, feature length.

    Defaults are desk-scale; :meth:`paper_defaults` selects the full-scale
    configuration (64 filters of size 3x3, 500 features).
    """

    filters: int = 16
    kernel: int = 3
    features: int = 64

    def __post_init__(self):
        if self.filters < 1 or self.features < 1:
            raise ContractError("filters and features must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ContractError(f"kernel size must be odd, got {self.kernel}")

    @classmethod
    def paper_defaults(cls):
        return cls(filters=64, kernel=3, features=500)


def _extractor_param_shapes(prefix, in_ch, rows, cols, feat):
    d, k, n = feat.filters, feat.kernel, feat.features
    shapes = {f"{prefix}.conv_in.w": (k, k, in_ch, d)}
    for name in ("res1", "res2", "conv_out"):
        shapes[f"{prefix}.{name}.w"] = (k, k, d, d)
    for name in _BN_KEYS:
        shapes[f"{prefix}.{name}.b"] = (d,)
        shapes[f"{prefix}.{name}.gamma"] = (d,)
        shapes[f"{prefix}.{name}.beta"] = (d,)
    shapes[f"{prefix}.fc.w"] = (rows * cols * d, n)
    shapes[f"{prefix}.fc.b"] = (n,)
    return shapes


def _param_shapes(sys_cfg, feat):
    shapes = {}
    shapes.update(_extractor_param_shapes("as", 3, sys_cfg.n_r, sys_cfg.n_t, feat))
    for j in range(sys_cfg.n_ts):
        shapes[f"as.head{j}.w"] = (feat.features, sys_cfg.n_t)
        shapes[f"as.head{j}.b"] = (sys_cfg.n_t,)
    shapes.update(_extractor_param_shapes("bf", 3, sys_cfg.n_r, sys_cfg.n_ts, feat))
    shapes["bf.phase.w"] = (feat.features, sys_cfg.n_ts * sys_cfg.n_rf)
    shapes["bf.phase.b"] = (sys_cfg.n_ts * sys_cfg.n_rf,)
    for part in ("re", "im"):
        shapes[f"bf.{part}.w"] = (feat.features, sys_cfg.n_rf * sys_cfg.n_s)
        shapes[f"bf.{part}.b"] = (sys_cfg.n_rf * sys_cfg.n_s,)
    return shapes


class JointModel:
    """Parameter store for both networks plus batch-norm running state."""

    def __init__(self, sys_cfg, feat_cfg, params, bn):
        self.sys_cfg = sys_cfg
        self.feat_cfg = feat_cfg
        self.params = params
        self.bn = bn

    @classmethod
    def init(cls, sys_cfg, feat_cfg=None, seed=0):
        """He-initialized weights, zero biases, warm (0, 1) running stats."""
        feat_cfg = feat_cfg or FeatureExtractorConfig()
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in _param_shapes(sys_cfg, feat_cfg).items():
            if name.endswith(".w"):
                fan_in = int(np.prod(shape[:-1]))
                params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
            elif name.endswith(".gamma"):
                params[name] = np.ones(shape)
            else:
                params[name] = np.zeros(shape)
        d = feat_cfg.filters
        bn = {
            f"{prefix}.{key}": BatchNormState(np.zeros(d), np.ones(d))
            for prefix in ("as", "bf")
            for key in _BN_KEYS
        }
        return cls(sys_cfg, feat_cfg, params, bn)

    def copy(self):
        return JointModel(
            self.sys_cfg,
            self.feat_cfg,
            {k: v.copy() for k, v in self.params.items()},
            {k: s.copy() for k, s in self.bn.items()},
        )

    def param_names(self, prefix=None):
        if prefix is None:
            return list(self.params)
        return [n for n in self.params if n.startswith(prefix + ".")]

    def tensors(self, tape=None, trainable=()):
        """Wrap parameters as tensors: tape leaves for ``trainable`` names,
        constants for the rest."""
        trainable = set(trainable)
        out = {}
        for name, value in self.params.items():
            if tape is not None and name in trainable:
                out[name] = tape.params.get(name) or tape.leaf(name, value)
            else:
                out[name] = Tensor(value)
        return out


# --------------------------------------------------------------------------
# Forward building blocks
# --------------------------------------------------------------------------


def build_input_tensor(h):
    """Stack Re, Im and entrywise modulus as a trailing 3-channel axis."""
    if isinstance(h, ComplexPair):
        re, im = h.re, h.im
        mod = (re * re + im * im).sqrt()
        parts = [t.reshape(t.data.shape + (1,)) for t in (re, im, mod)]
        return concat(parts, axis=-1)
    h = np.asarray(h, dtype=np.complex128)
    return np.stack([h.real, h.imag, np.abs(h)], axis=-1)


def _conv_block(x, pt, name, mode, bn, update_stats):
    y = conv2d(x, pt[f"{name}.w"], pt[f"{name}.b"])
    y = batch_norm(
        y, pt[f"{name}.gamma"], pt[f"{name}.beta"], mode, bn[name], update_stats=update_stats
    )
    return y.relu()


def extract_features(x, pt, prefix, mode, bn, update_stats=False):
    """conv block -> residual block (two conv blocks + shortcut) -> conv block
    -> flatten -> ReLU fully-connected feature vector."""
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=np.float64))
    if x.data.ndim != 4:
        raise ContractError(f"extract_features expects (batch, h, w, c), got {x.data.shape}")
    y = _conv_block(x, pt, f"{prefix}.conv_in", mode, bn, update_stats)
    r = _conv_block(y, pt, f"{prefix}.res1", mode, bn, update_stats)
    r = _conv_block(r, pt, f"{prefix}.res2", mode, bn, update_stats)
    y = r + y
    y = _conv_block(y, pt, f"{prefix}.conv_out", mode, bn, update_stats)
    batch = x.data.shape[0]
    flat = y.reshape((batch, -1))
    return (flat @ pt[f"{prefix}.fc.w"] + pt[f"{prefix}.fc.b"]).relu()


def _as_logits(v, pt, n_ts):
    rows = []
    for j in range(n_ts):
        row = v @ pt[f"as.head{j}.w"] + pt[f"as.head{j}.b"]
        rows.append(row.reshape((row.data.shape[0], 1, row.data.shape[1])))
    return concat(rows, axis=1)


def _bf_heads(v, pt, cfg):
    batch = v.data.shape[0]
    omega_flat = (v @ pt["bf.phase.w"] + pt["bf.phase.b"]).sigmoid() * TWO_PI
    omega = omega_flat.reshape((batch, cfg.n_ts, cfg.n_rf))
    re = (v @ pt["bf.re.w"] + pt["bf.re.b"]).reshape((batch, cfg.n_rf, cfg.n_s))
    im = (v @ pt["bf.im.w"] + pt["bf.im.b"]).reshape((batch, cfg.n_rf, cfg.n_s))
    return omega, ComplexPair(re, im)


def _batched(h):
    h = np.asarray(h, dtype=np.complex128)
    if h.ndim == 2:
        return h[None], True
    if h.ndim == 3:
        return h, False
    raise ContractError(f"channel input must be 2-D or 3-D, got shape {h.shape}")


@dataclass
class TrainForward:
    """Relaxed joint forward outputs, all attached to one tape."""

    a_relaxed: Tensor  # (batch, n_t, n_ts)
    logits: Tensor  # (batch, n_ts, n_t)
    t_rf: ComplexPair  # (batch, n_ts, n_rf)
    t_bb: ComplexPair  # (batch, n_rf, n_s)
    omega: Tensor  # (batch, n_ts, n_rf)


# --------------------------------------------------------------------------
# Network forwards
# --------------------------------------------------------------------------


def asnet_forward(model, h, mode, tau=None, rng=None, noise=None, pt=None, update_stats=False):
    """Selection network.

    Test mode returns ``(SelectionMatrix, logits)`` for a single channel or
    ``(list[SelectionMatrix], logits)`` for a batch; deployment noise is off
    unless requested.  Train mode returns the relaxed selection and logits as
    tape tensors; ``tau`` is required and Gumbel noise is on by default.
    """
    hb, single = _batched(h)
    cfg = model.sys_cfg
    pt = pt or model.tensors()
    bn_mode = "infer" if mode == "test" else "train"
    x = build_input_tensor(ComplexPair.from_complex(hb))
    v = extract_features(x, pt, "as", bn_mode, model.bn, update_stats)
    logits = _as_logits(v, pt, cfg.n_ts)

    if mode == "test":
        logit_values = logits.data
        selections = [
            hard_select(logit_values[k], noise=bool(noise), rng=rng)
            for k in range(logit_values.shape[0])
        ]
        if single:
            return selections[0], logit_values[0]
        return selections, logit_values
    if mode != "train":
        raise ContractError(f"mode must be 'train' or 'test', got {mode!r}")
    if tau is None:
        raise ContractError("train mode requires a temperature")
    noise = True if noise is None else noise
    a_relaxed = relaxed_select(logits, tau, noise=noise, rng=rng)
    return a_relaxed, logits


def bfnet_forward(model, h_s, mode, alpha=0.01, pt=None, update_stats=False):
    """Beamforming network on a selected (or relaxed-selected) channel.

    Test mode quantizes phases hard and returns :class:`HybridBeamformer`
    objects with exactly constant-modulus analog entries and an exactly
    power-normalized digital part.  Train mode keeps the sigmoid-relaxed
    quantizer and returns tape tensors.
    """
    cfg = model.sys_cfg
    pt = pt or model.tensors()
    if isinstance(h_s, ComplexPair):
        if mode != "train":
            raise ContractError("ComplexPair input is only meaningful in train mode")
        hs_pair = h_s
        single = False
    else:
        hb, single = _batched(h_s)
        if hb.shape[-1] != cfg.n_ts:
            raise ContractError(
                f"selected channel has {hb.shape[-1]} columns, expected {cfg.n_ts}"
            )
        hs_pair = ComplexPair.from_complex(hb)
    bn_mode = "infer" if mode == "test" else "train"
    x = build_input_tensor(hs_pair)
    v = extract_features(x, pt, "bf", bn_mode, model.bn, update_stats)
    omega, t_raw = _bf_heads(v, pt, cfg)

    if mode == "test":
        omega_values = omega.data
        raw_values = t_raw.to_complex()
        out = []
        for k in range(omega_values.shape[0]):
            t_rf = analog_from_phases(omega_values[k], mode="hard")
            t_bb = normalize_digital(t_rf, raw_values[k], cfg.n_s)
            out.append(HybridBeamformer(t_rf, t_bb, phases=omega_values[k]))
        return out[0] if single else out
    if mode != "train":
        raise ContractError(f"mode must be 'train' or 'test', got {mode!r}")
    t_rf = analog_from_phases(omega, mode="soft", alpha=alpha)
    t_bb = normalize_digital(t_rf, t_raw, cfg.n_s)
    return t_rf, t_bb, omega


def joint_forward(model, h, mode, tau=None, alpha=0.01, rng=None, noise=None,
                  pt=None, update_stats=False):
    """Full pipeline: select, restrict the channel, beamform.

    Test mode: hard selection feeds the column-selected channel into the
    beamforming network; returns ``(selection, beamformer)`` (lists for a
    batch).  Train mode: the relaxed selection multiplies the channel and
    everything stays differentiable; returns :class:`TrainForward`.
    """
    cfg = model.sys_cfg
    pt = pt or model.tensors()
    if mode == "test":
        hb, single = _batched(h)
        selections, _ = asnet_forward(
            model, hb, "test", rng=rng, noise=noise, pt=pt, update_stats=update_stats
        )
        h_sel = np.stack([hb[k][:, sel.indices] for k, sel in enumerate(selections)])
        beamformers = bfnet_forward(model, h_sel, "test", pt=pt, update_stats=update_stats)
        if single:
            return selections[0], beamformers[0]
        return selections, beamformers
    if mode != "train":
        raise ContractError(f"mode must be 'train' or 'test', got {mode!r}")
    hb, _ = _batched(h)
    a_relaxed, logits = asnet_forward(
        model, hb, "train", tau=tau, rng=rng, noise=noise, pt=pt, update_stats=update_stats
    )
    h_re = np.ascontiguousarray(hb.real)
    h_im = np.ascontiguousarray(hb.imag)
    hs_pair = ComplexPair(h_re @ a_relaxed, h_im @ a_relaxed)
    t_rf, t_bb, omega = bfnet_forward(
        model, hs_pair, "train", alpha=alpha, pt=pt, update_stats=update_stats
    )
    return TrainForward(a_relaxed, logits, t_rf, t_bb, omega)


# --------------------------------------------------------------------------
# Model files: the named-array container plus config and running statistics
# --------------------------------------------------------------------------

_CFG_FIELDS = ("n_t", "n_ts", "n_rf", "n_s", "n_r", "snr", "n_b")
_FEAT_FIELDS = ("filters", "kernel", "features")


def save_model(model, path):
    """Bit-exact model container: parameters, running stats and both configs."""
    entries = {}
    for field in _CFG_FIELDS:
        entries[f"cfg/{field}"] = np.float64(getattr(model.sys_cfg, field))
    for field in _FEAT_FIELDS:
        entries[f"cfg/{field}"] = np.float64(getattr(model.feat_cfg, field))
    for name, value in model.params.items():
        entries[f"param/{name}"] = value
    for key, state in model.bn.items():
        if state.initialized:
            entries[f"bn/{key}.mean"] = state.mean
            entries[f"bn/{key}.var"] = state.var
    save_params(path, entries)


def load_model(path, expected_sys=None, expected_feat=None):
    """Load a model container; verify configs when expectations are given."""
    entries = load_params(path)
    try:
        sys_cfg = SystemConfig(
            n_t=int(entries["cfg/n_t"]),
            n_ts=int(entries["cfg/n_ts"]),
            n_rf=int(entries["cfg/n_rf"]),
            n_s=int(entries["cfg/n_s"]),
            n_r=int(entries["cfg/n_r"]),
            snr=float(entries["cfg/snr"]),
            n_b=int(entries["cfg/n_b"]),
        )
        feat_cfg = FeatureExtractorConfig(
            filters=int(entries["cfg/filters"]),
            kernel=int(entries["cfg/kernel"]),
            features=int(entries["cfg/features"]),
        )
    except KeyError as exc:
        raise FormatError(f"model file is missing config entry {exc}") from None
    if expected_sys is not None and expected_sys != sys_cfg:
        raise ConfigMismatchError(
            f"system config mismatch: file has {sys_cfg}, expected {expected_sys}"
        )
    if expected_feat is not None and expected_feat != feat_cfg:
        raise ConfigMismatchError(
            f"feature config mismatch: file has {feat_cfg}, expected {expected_feat}"
        )

    shapes = _param_shapes(sys_cfg, feat_cfg)
    params = {}
    for name, shape in shapes.items():
        key = f"param/{name}"
        if key not in entries:
            raise FormatError(f"model file is missing parameter {name!r}")
        if entries[key].shape != shape:
            raise FormatError(
                f"parameter {name!r} has shape {entries[key].shape}, expected {shape}"
            )
        params[name] = entries[key]
    bn = {}
    for prefix in ("as", "bf"):
        for key in _BN_KEYS:
            full = f"{prefix}.{key}"
            if f"bn/{full}.mean" in entries:
                bn[full] = BatchNormState(entries[f"bn/{full}.mean"], entries[f"bn/{full}.var"])
            else:
                bn[full] = BatchNormState()
    return JointModel(sys_cfg, feat_cfg, params, bn)
