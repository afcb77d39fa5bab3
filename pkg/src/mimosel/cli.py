"""Experiment runner: dataset generation, training, evaluation sweeps,
oracle certification and timing benchmarks.

Subcommands: ``gen-data``, ``train``, ``eval``, ``oracle``, ``bench``.
Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import baselines as bl
from .channel import (
    ChannelModelConfig,
    Dataset,
    generate_dataset,
    perturb_csi,
    read_dataset,
    write_dataset,
)
from .errors import MimoselError, SearchSpaceError
from .mimo import SystemConfig, achieved_rate
from .nets import FeatureExtractorConfig, JointModel, joint_forward, load_model, save_model
from .training import TrainConfig, history_to_csv, phased_train

EVAL_ALGORITHMS = ("network", "gas-cdm", "ras-cdm", "full-array", "switch-based")
BENCH_ALGORITHMS = ("network", "gas", "cdm")
SWEEP_AXES = ("snr", "n_ts", "n_s", "nmse")


@dataclass
class ExperimentSpec:
    """A resolved evaluation sweep."""

    cfg: SystemConfig
    sweep: str
    values: list
    algorithms: list
    dataset: Dataset
    out: str
    seed: int
    model: JointModel | None = None
    threads: int = 1
    gumbel_noise: bool = False

    def __post_init__(self):
        if not self.values:
            raise MimoselError("sweep values must be non-empty")
        if sorted(self.values) != list(self.values):
            raise MimoselError("sweep values must be sorted ascending")


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(str(x) for x in row) + "\n")


# --------------------------------------------------------------------------
# gen-data
# --------------------------------------------------------------------------


def _cmd_gen_data(args):
    cfg = ChannelModelConfig(
        n_paths=args.paths,
        bandwidth=args.bandwidth,
        delay_range=(0.0, args.delay_max),
        gain_decay=args.gain_decay,
        elevation_range=(args.elev_lo, args.elev_hi),
        azimuth_range=(args.azim_lo, args.azim_hi),
        seed=args.seed,
    )
    if args.count == 0:
        print("warning: writing an empty dataset", file=sys.stderr)
        dataset = Dataset(np.empty((0, args.nr, args.nt), dtype=np.complex128))
    else:
        dataset = generate_dataset(cfg, args.nr, args.nt, args.count)
    write_dataset(args.out, dataset)
    if len(dataset):
        norms = np.sum(np.abs(dataset.samples) ** 2, axis=(1, 2))
        worst = float(np.max(np.abs(norms / (args.nr * args.nt) - 1.0)))
    else:
        worst = 0.0
    print(
        f"wrote {len(dataset)} channels of size {args.nr}x{args.nt} to {args.out} "
        f"(worst norm deviation {worst:.3e})"
    )
    return 0


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------


def _feat_from_args(args):
    if args.paper_scale:
        return FeatureExtractorConfig.paper_defaults()
    return FeatureExtractorConfig(args.filters, args.kernel, args.features)


def _cmd_train(args):
    train_set = read_dataset(args.train, tag="train")
    test_set = read_dataset(args.test, tag="test") if args.test else None
    if args.train_config:
        with open(args.train_config) as fh:
            tcfg = TrainConfig.from_json(fh.read())
    else:
        tcfg = TrainConfig()
    if args.seed is not None:
        tcfg.seed = args.seed
    if args.epochs is not None:
        tcfg.n1, tcfg.n2, tcfg.n3 = args.epochs
    if args.batch_size is not None:
        tcfg.batch_size = args.batch_size
    sys_cfg = SystemConfig.with_snr_db(
        train_set.n_t, args.nts, args.nrf, args.ns, train_set.n_r, args.snr_db
    )
    model = JointModel.init(sys_cfg, _feat_from_args(args), seed=tcfg.seed)
    t0 = time.perf_counter()
    history = phased_train(
        model,
        train_set,
        test_set,
        tcfg,
        log=lambda s: print(
            f"epoch {s.epoch:3d} phase {s.phase} train {s.train_loss:+.4f} "
            f"test {s.test_loss:+.4f} tau {s.tau:.3f}"
        )
        if args.verbose
        else None,
    )
    elapsed = time.perf_counter() - t0
    save_model(model, args.model_out)
    if args.history_out:
        history_to_csv(history, args.history_out)
    print(f"trained {len(history)} epochs in {elapsed:.1f}s; model -> {args.model_out}")
    return 0


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------


def _point_cfg(spec, value):
    cfg = spec.cfg
    if spec.sweep == "snr":
        return cfg.replace_snr(10.0 ** (value / 10.0))
    if spec.sweep == "n_ts":
        return SystemConfig(cfg.n_t, int(value), cfg.n_rf, cfg.n_s, cfg.n_r, cfg.snr)
    if spec.sweep == "n_s":
        # streams, RF chains (and at full scale receive antennas) move together
        v = int(value)
        return SystemConfig(cfg.n_t, cfg.n_ts, v, v, cfg.n_r, cfg.snr)
    return cfg  # nmse sweep keeps the system fixed


def _baseline_rate(tag, h_true, h_obs, cfg, sample_seed):
    if tag == "gas-cdm":
        res = bl.gas_cdm(h_obs, cfg)
        sel, bf = res.selection, res.beamformer
        return float(achieved_rate(h_true, sel, bf.t_rf, bf.t_bb, cfg))
    if tag == "ras-cdm":
        rng = np.random.default_rng(np.random.SeedSequence((sample_seed, 7)))
        res = bl.ras_cdm(h_obs, cfg, rng)
        sel, bf = res.selection, res.beamformer
        return float(achieved_rate(h_true, sel, bf.t_rf, bf.t_bb, cfg))
    if tag == "full-array":
        res = bl.full_array_reference(h_obs, cfg)
        cfg_full = SystemConfig(cfg.n_t, cfg.n_t, cfg.n_rf, cfg.n_s, cfg.n_r, cfg.snr)
        bf = res.beamformer
        return float(achieved_rate(h_true, res.selection, bf.t_rf, bf.t_bb, cfg_full))
    if tag == "switch-based":
        res = bl.switch_based_reference(h_obs, cfg)
        cfg_sw = SystemConfig(cfg.n_t, cfg.n_rf, cfg.n_rf, cfg.n_s, cfg.n_r, cfg.snr)
        bf = res.beamformer
        h_sel = h_true[:, res.selection.indices]
        return float(achieved_rate(h_sel, None, bf.t_rf, bf.t_bb, cfg_sw))
    raise MimoselError(f"unknown algorithm tag {tag!r}")


def run_eval(spec):
    """Per sweep point and algorithm: mean/std/count of the hard-mode rate."""
    rows = []
    samples = spec.dataset.samples
    for value in spec.values:
        cfg = _point_cfg(spec, value)
        if spec.sweep == "nmse":
            rngs = [
                np.random.default_rng(np.random.SeedSequence((spec.seed, i, 11)))
                for i in range(len(samples))
            ]
            observed = np.stack(
                [perturb_csi(h, value, rng) for h, rng in zip(samples, rngs)]
            )
        else:
            observed = samples
        for tag in spec.algorithms:
            if tag == "network":
                model = spec.model
                if model.sys_cfg.n_ts != cfg.n_ts or model.sys_cfg.n_s != cfg.n_s:
                    raise MimoselError(
                        f"model trained for n_ts={model.sys_cfg.n_ts}, n_s="
                        f"{model.sys_cfg.n_s} cannot be evaluated at sweep point {value}"
                    )
                rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 3)))
                sels, bfs = joint_forward(
                    model, observed, "test", rng=rng, noise=spec.gumbel_noise
                )
                rates = [
                    float(achieved_rate(h, sel, bf.t_rf, bf.t_bb, cfg))
                    for h, sel, bf in zip(samples, sels, bfs)
                ]
            else:
                work = [
                    (tag, samples[i], observed[i], cfg, spec.seed + i)
                    for i in range(len(samples))
                ]
                if spec.threads > 1:
                    with ThreadPoolExecutor(max_workers=spec.threads) as pool:
                        rates = list(pool.map(lambda w: _baseline_rate(*w), work))
                else:
                    rates = [_baseline_rate(*w) for w in work]
            rows.append(
                (
                    spec.sweep,
                    value,
                    tag,
                    float(np.mean(rates)),
                    float(np.std(rates)),
                    len(rates),
                )
            )
    _write_csv(spec.out, ("sweep", "value", "algorithm", "mean_rate", "std_rate", "count"), rows)
    return rows


def _parse_values(text, sweep):
    values = [float(v) for v in text.split(",") if v.strip() != ""]
    if sweep in ("n_ts", "n_s"):
        values = [int(v) for v in values]
    return values


def _cmd_eval(args):
    for tag in args.algorithms:
        if tag not in EVAL_ALGORITHMS:
            print(
                f"error: unknown algorithm {tag!r}; valid: {', '.join(EVAL_ALGORITHMS)}",
                file=sys.stderr,
            )
            return 2
    dataset = read_dataset(args.data)
    model = None
    if "network" in args.algorithms:
        if not args.model:
            print("error: --model is required for the network algorithm", file=sys.stderr)
            return 2
        model = load_model(args.model)
        base_cfg = model.sys_cfg
        if args.snr_db is not None:
            base_cfg = base_cfg.replace_snr(10.0 ** (args.snr_db / 10.0))
    else:
        if args.nts is None or args.nrf is None or args.ns is None or args.snr_db is None:
            print(
                "error: --nts, --nrf, --ns and --snr-db are required without a model",
                file=sys.stderr,
            )
            return 2
        base_cfg = SystemConfig.with_snr_db(
            dataset.n_t, args.nts, args.nrf, args.ns, dataset.n_r, args.snr_db
        )
    spec = ExperimentSpec(
        cfg=base_cfg,
        sweep=args.sweep,
        values=_parse_values(args.values, args.sweep),
        algorithms=args.algorithms,
        dataset=dataset,
        out=args.out,
        seed=args.seed,
        model=model,
        threads=args.threads,
        gumbel_noise=args.gumbel_noise,
    )
    rows = run_eval(spec)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


# --------------------------------------------------------------------------
# oracle
# --------------------------------------------------------------------------


def run_oracle(dataset, cfg, model=None, seed=0, limit=None):
    """Per-sample brute-force certification of the network and baselines."""
    rows = []
    count = len(dataset) if limit is None else min(limit, len(dataset))
    samples = dataset.samples[:count]
    if model is not None:
        sels, bfs = joint_forward(model, samples, "test")
    for i in range(count):
        h = samples[i]
        oracle = bl.exhaustive_joint_search(h, cfg)
        gas = bl.gas_cdm(h, cfg)
        ras = bl.ras_cdm(h, cfg, np.random.default_rng(np.random.SeedSequence((seed + i, 7))))
        if model is not None:
            net_rate = float(
                achieved_rate(h, sels[i], bfs[i].t_rf, bfs[i].t_bb, cfg)
            )
        else:
            net_rate = float("nan")
        rows.append(
            (
                i,
                oracle.rate,
                net_rate,
                net_rate / oracle.rate,
                gas.rate,
                gas.rate / oracle.rate,
                ras.rate,
                ras.rate / oracle.rate,
            )
        )
    return rows


def _cmd_oracle(args):
    dataset = read_dataset(args.data)
    model = load_model(args.model) if args.model else None
    if model is not None:
        cfg = model.sys_cfg
        if args.snr_db is not None:
            cfg = cfg.replace_snr(10.0 ** (args.snr_db / 10.0))
    else:
        if args.nts is None or args.nrf is None or args.ns is None or args.snr_db is None:
            print(
                "error: --nts, --nrf, --ns and --snr-db are required without a model",
                file=sys.stderr,
            )
            return 2
        cfg = SystemConfig.with_snr_db(
            dataset.n_t, args.nts, args.nrf, args.ns, dataset.n_r, args.snr_db
        )
    try:
        rows = run_oracle(dataset, cfg, model=model, seed=args.seed, limit=args.limit)
    except SearchSpaceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    header = (
        "sample",
        "oracle_rate",
        "network_rate",
        "network_ratio",
        "gas_cdm_rate",
        "gas_cdm_ratio",
        "ras_cdm_rate",
        "ras_cdm_ratio",
    )
    _write_csv(args.out, header, rows)
    ratios = np.array([r[3] for r in rows])
    if model is not None:
        print(f"mean network/oracle ratio over {len(rows)} samples: {np.mean(ratios):.4f}")
    else:
        print(f"certified {len(rows)} samples")
    return 0


# --------------------------------------------------------------------------
# bench
# --------------------------------------------------------------------------


def run_bench(nt_grid, nts_grid, algorithms, n_rf, n_s, n_r, snr_db, samples,
              feat_cfg=None, seed=0):
    """Median per-sample wall-clock times (batch size 1) over a dimension grid."""
    feat_cfg = feat_cfg or FeatureExtractorConfig()
    rows = []
    for n_t in nt_grid:
        for n_ts in nts_grid:
            if not (n_s <= n_rf <= n_ts <= n_t):
                continue
            cfg = SystemConfig.with_snr_db(n_t, n_ts, n_rf, n_s, n_r, snr_db)
            chan_cfg = ChannelModelConfig(seed=seed)
            data = generate_dataset(chan_cfg, n_r, n_t, samples)
            timers = {}
            if "network" in algorithms:
                model = JointModel.init(cfg, feat_cfg, seed=seed)
                joint_forward(model, data.samples[0], "test")  # warm up
                timers["network"] = lambda h, model=model: joint_forward(model, h, "test")
            if "gas" in algorithms:
                timers["gas"] = lambda h, cfg=cfg: bl.greedy_antenna_selection(h, cfg)
            if "cdm" in algorithms:
                timers["cdm"] = lambda h, cfg=cfg, n_ts=n_ts: bl.cdm_altmin(
                    h[:, :n_ts], cfg
                )
            for tag, fn in timers.items():
                times = []
                for i in range(samples):
                    t0 = time.perf_counter()
                    fn(data.samples[i])
                    times.append(time.perf_counter() - t0)
                rows.append((n_t, n_ts, tag, float(np.median(times)), samples))
    return rows


def _cmd_bench(args):
    for tag in args.algorithms:
        if tag not in BENCH_ALGORITHMS:
            print(
                f"error: unknown algorithm {tag!r}; valid: {', '.join(BENCH_ALGORITHMS)}",
                file=sys.stderr,
            )
            return 2
    rows = run_bench(
        args.nt_grid,
        args.nts_grid,
        args.algorithms,
        args.nrf,
        args.ns,
        args.nr,
        args.snr_db,
        args.samples,
        feat_cfg=_feat_from_args(args),
        seed=args.seed,
    )
    _write_csv(args.out, ("n_t", "n_ts", "algorithm", "median_seconds", "samples"), rows)
    print(f"wrote {len(rows)} timing rows to {args.out}")
    return 0


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------


def _int_list(text):
    return [int(v) for v in text.split(",") if v.strip() != ""]


def build_parser():
    parser = argparse.ArgumentParser(prog="mimosel", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic channel dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--nt", type=int, required=True)
    p.add_argument("--nr", type=int, required=True)
    p.add_argument("--paths", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bandwidth", type=float, default=100e6)
    p.add_argument("--delay-max", type=float, default=100e-9)
    p.add_argument("--gain-decay", type=float, default=1.0)
    p.add_argument("--elev-lo", type=float, default=-np.pi / 3)
    p.add_argument("--elev-hi", type=float, default=np.pi / 3)
    p.add_argument("--azim-lo", type=float, default=0.0)
    p.add_argument("--azim-hi", type=float, default=2 * np.pi)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="run the three-phase training procedure")
    p.add_argument("--train", required=True)
    p.add_argument("--test")
    p.add_argument("--model-out", required=True)
    p.add_argument("--history-out")
    p.add_argument("--nts", type=int, required=True)
    p.add_argument("--nrf", type=int, required=True)
    p.add_argument("--ns", type=int, required=True)
    p.add_argument("--snr-db", type=float, required=True)
    p.add_argument("--train-config", help="JSON file with TrainConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, nargs=3, metavar=("N1", "N2", "N3"))
    p.add_argument("--batch-size", type=int)
    p.add_argument("--filters", type=int, default=16)
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--features", type=int, default=64)
    p.add_argument("--paper-scale", action="store_true",
                   help="use the full-scale extractor (64 filters, 500 features)")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="rate sweeps for the network and baselines")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sweep", choices=SWEEP_AXES, required=True)
    p.add_argument("--values", required=True, help="comma-separated, ascending")
    p.add_argument("--algorithms", type=lambda s: s.split(","), required=True)
    p.add_argument("--model")
    p.add_argument("--nts", type=int)
    p.add_argument("--nrf", type=int)
    p.add_argument("--ns", type=int)
    p.add_argument("--snr-db", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--gumbel-noise", action="store_true",
                   help="sample selection noise at deployment (off by default)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("oracle", help="certify against the exhaustive joint search")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model")
    p.add_argument("--nts", type=int)
    p.add_argument("--nrf", type=int)
    p.add_argument("--ns", type=int)
    p.add_argument("--snr-db", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit", type=int)
    p.set_defaults(func=_cmd_oracle)

    p = sub.add_parser("bench", help="per-sample inference timing over a dimension grid")
    p.add_argument("--out", required=True)
    p.add_argument("--nt-grid", type=_int_list, default=[32, 64, 128])
    p.add_argument("--nts-grid", type=_int_list, default=[4, 8, 16])
    p.add_argument("--algorithms", type=lambda s: s.split(","),
                   default=list(BENCH_ALGORITHMS))
    p.add_argument("--nrf", type=int, default=2)
    p.add_argument("--ns", type=int, default=2)
    p.add_argument("--nr", type=int, default=4)
    p.add_argument("--snr-db", type=float, default=10.0)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--filters", type=int, default=16)
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--features", type=int, default=64)
    p.add_argument("--paper-scale", action="store_true")
    p.set_defaults(func=_cmd_bench)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except MimoselError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
