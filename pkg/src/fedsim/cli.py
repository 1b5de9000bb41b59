"""Command-line front end: run one experiment, replay a sweep grid, or run
the built-in self-test battery."""

import argparse
import itertools
import math
import os
import sys

import numpy as np

from . import audit
from .orchestrator import (
    ExperimentConfig, config_from_file, parse_config_value, run_experiment,
    with_overrides, write_metrics,
)

LINK_CODES = {"dd": ("digital", "digital"), "da": ("digital", "analog"),
              "ad": ("analog", "digital"), "aa": ("analog", "analog")}


def _link_modes(code: str):
    if code not in LINK_CODES:
        raise SystemExit(f"unknown link code {code!r}; pick one of "
                         f"{'/'.join(LINK_CODES)}")
    return LINK_CODES[code]


def _run_overrides(args) -> dict:
    overrides = dict(protocol=args.protocol, channel_uses=args.T,
                     pu_db=args.pu_db, pd_db=args.pd_db, num_devices=args.k,
                     global_iterations=args.iters, master_seed=args.seed,
                     data=args.data)
    if args.link is not None:
        overrides["uplink_mode"], overrides["downlink_mode"] = \
            _link_modes(args.link)
    return overrides


def cmd_run(args) -> int:
    overrides = _run_overrides(args)
    if args.config:
        config = config_from_file(args.config, **overrides)
    else:
        config = with_overrides(ExperimentConfig(), **overrides)
    records = run_experiment(config)
    write_metrics(records, args.out)
    final = [r for r in records if r.device_scope == "avg"][-1]
    print(f"{config.protocol} {config.uplink_mode[0]}-"
          f"{config.downlink_mode[0]} T={config.channel_uses} "
          f"seed={config.master_seed}: final accuracy "
          f"{final.test_accuracy:.4f} -> {args.out}")
    return 0


def parse_grid_text(text: str) -> dict:
    """key = v1, v2, ... lines; `link` expands to uplink/downlink modes and
    `pd_db` accepts `pu+<offset>` to track the uplink SNR."""
    grid = {}
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise SystemExit(f"grid line {number}: expected key = values")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        values = [v.strip() for v in raw.split(",") if v.strip()] \
            if key != "data" else [raw.strip()]
        if key == "link":
            grid[key] = values
        elif key == "pd_db":
            grid[key] = [v if v.startswith("pu") else
                         parse_config_value(key, v) for v in values]
        else:
            grid[key] = [parse_config_value(key, v) for v in values]
    return grid


def _resolve_pd(pd_value, pu_db: float) -> float:
    if isinstance(pd_value, str):  # "pu+10" style offset
        return pu_db + float(pd_value[2:] or 0)
    return float(pd_value)


def cmd_sweep(args) -> int:
    with open(args.grid, "r", encoding="utf-8") as f:
        grid = parse_grid_text(f.read())
    os.makedirs(args.out, exist_ok=True)
    keys = list(grid)
    combos = list(itertools.product(*(grid[k] for k in keys)))
    print(f"sweep: {len(combos)} runs -> {args.out}")
    for combo in combos:
        values = dict(zip(keys, combo))
        link = values.pop("link", None)
        overrides = dict(values)
        if link is not None:
            overrides["uplink_mode"], overrides["downlink_mode"] = \
                _link_modes(link)
        pu = overrides.get("pu_db", ExperimentConfig().pu_db)
        if "pd_db" in overrides:
            overrides["pd_db"] = _resolve_pd(overrides["pd_db"], pu)
        config = with_overrides(ExperimentConfig(), **overrides)
        name = (f"{config.protocol}_{config.uplink_mode[0]}"
                f"{config.downlink_mode[0]}_T{config.channel_uses}"
                f"_pu{config.pu_db:g}_pd{config.pd_db:g}"
                f"_seed{config.master_seed}.csv")
        records = run_experiment(config)
        write_metrics(records, os.path.join(args.out, name))
        final = [r for r in records if r.device_scope == "avg"][-1]
        print(f"  {name}: accuracy {final.test_accuracy:.4f}")
    return 0


def _selftest_checks():
    from .analog_link import (
        ProjectionMatrix, cs_decode, mmse_factor_uplink, pack_complex,
        repetition_decode, repetition_encode, unpack_complex,
    )
    from .channel import ChannelState, sample_channel, uplink_mac
    from .compression import (
        ErrorAccumulator, accumulate_error, log2_binomial,
        sparse_binary_compress, top_k_sparsify,
    )
    from .learning import (
        MlpArchitecture, init_weights, loss_and_gradient, softmax,
    )

    rng = np.random.default_rng(0)

    def check_channel_stats():
        state = sample_channel(np.random.default_rng(1), 50_000)
        return abs(np.mean(np.abs(state.uplink_gains) ** 2) - 1.0) < 0.03

    def check_sparse_compress():
        out = sparse_binary_compress(np.array([3.0, -1.0, 2.0, -4.0]), 1)
        return np.array_equal(out, [0.0, 0.0, 0.0, -4.0])

    def check_pack_roundtrip():
        v = rng.standard_normal(32)
        return np.array_equal(unpack_complex(pack_complex(v)), v)

    def check_error_feedback():
        acc = ErrorAccumulator.zeros(32)
        total_u = np.zeros(32)
        total_s = np.zeros(32)
        for _ in range(50):
            u = rng.standard_normal(32)
            s = top_k_sparsify(u + acc.residual, 4)
            acc = accumulate_error(acc, u, s)
            total_u += u
            total_s += s
        return np.allclose(total_s + acc.residual, total_u, rtol=1e-8)

    def check_mmse_factor():
        return abs(mmse_factor_uplink(np.array([1.0]), np.array([1.0]))
                   - 2.0 / 3.0) < 1e-12

    def check_repetition():
        s = rng.standard_normal(9)
        return np.allclose(repetition_decode(repetition_encode(s, 4), 4), s)

    def check_cs_recovery():
        proj = ProjectionMatrix(rows=120, cols=400, seed=7)
        truth = np.zeros(400)
        truth[rng.choice(400, 10, replace=False)] = rng.standard_normal(10)
        est = cs_decode(proj, proj.matrix @ truth, 10)
        return np.sum((est - truth) ** 2) / np.sum(truth ** 2) < 1e-3

    def check_gradient():
        arch = MlpArchitecture((3, 4, 2))
        w = init_weights(arch, rng)
        x = rng.uniform(0, 1, (5, 3))
        y = rng.integers(0, 2, 5)
        _, grad = loss_and_gradient(w, x, y, arch)
        h = 1e-6
        fd = np.zeros_like(w)
        for i in range(w.size):
            e = np.zeros_like(w)
            e[i] = h
            fd[i] = (loss_and_gradient(w + e, x, y, arch)[0]
                     - loss_and_gradient(w - e, x, y, arch)[0]) / (2 * h)
        return np.linalg.norm(grad - fd) / np.linalg.norm(fd) < 1e-4

    def check_softmax():
        return np.allclose(softmax(np.array([0.0, math.log(3.0)])),
                           [0.25, 0.75])

    def check_budget_assertions():
        audit.reset()
        config = ExperimentConfig(protocol="fl", channel_uses=50,
                                  num_devices=2, global_iterations=2,
                                  samples_per_device=8, test_samples=20,
                                  data="synthetic:classes=2,dim=4",
                                  model="linear", master_seed=7)
        run_experiment(config)
        return audit.budget_checks > 0 and audit.violations == 0

    return [
        ("rayleigh gain statistics", check_channel_stats),
        ("sign-mean sparse compression", check_sparse_compress),
        ("complex packing roundtrip", check_pack_roundtrip),
        ("error feedback telescoping", check_error_feedback),
        ("uplink MMSE factor", check_mmse_factor),
        ("repetition code roundtrip", check_repetition),
        ("sparse recovery", check_cs_recovery),
        ("analytic gradient vs finite differences", check_gradient),
        ("softmax closed form", check_softmax),
        ("bit-budget assertions live", check_budget_assertions),
    ]


def cmd_selftest(_args) -> int:
    failures = 0
    for name, check in _selftest_checks():
        try:
            ok = check()
        except Exception as exc:  # a crash is a failure, keep going
            ok = False
            name = f"{name} ({exc})"
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
        failures += not ok
    print(f"{'all checks passed' if not failures else f'{failures} failed'}")
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsim",
        description="cooperative training over simulated fading channels")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment and write a CSV")
    run.add_argument("--protocol", choices=("il", "fl", "fd", "hfd"))
    run.add_argument("--link", choices=tuple(LINK_CODES),
                     help="uplink/downlink modes, e.g. da = digital up, "
                          "analog down")
    run.add_argument("--T", type=int, dest="T",
                     help="channel uses per direction")
    run.add_argument("--pu-db", type=float, dest="pu_db")
    run.add_argument("--pd-db", type=float, dest="pd_db")
    run.add_argument("--k", type=int, help="number of devices")
    run.add_argument("--iters", type=int, help="global iterations")
    run.add_argument("--seed", type=int, help="master seed")
    run.add_argument("--data",
                     help="synthetic[:opts] or idx:<images>,<labels>")
    run.add_argument("--config", help="key=value config file; flags override")
    run.add_argument("--out", required=True, help="output CSV path")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="cross-product a grid file")
    sweep.add_argument("--grid", required=True,
                       help="key = v1, v2, ... file; list-valued keys are "
                            "crossed")
    sweep.add_argument("--out", required=True, help="output directory")
    sweep.set_defaults(func=cmd_sweep)

    selftest = sub.add_parser("selftest", help="run the property battery")
    selftest.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
