"""Scratch harness for picking the desk-scale acceptance configuration.

Not part of the package; runs the criterion-8/9/10 orderings for a candidate
configuration and prints the margins.
"""

import sys
import time

import numpy as np

sys.path.insert(0, "src")

from fedsim.orchestrator import ExperimentConfig, run_experiment

COMBOS = [("digital", "digital"), ("digital", "analog"),
          ("analog", "digital"), ("analog", "analog")]


def final_avg_accuracy(config):
    records = run_experiment(config)
    return [r for r in records if r.device_scope == "avg"][-1].test_accuracy


def build(candidate, protocol, up, down, T, seed):
    return ExperimentConfig(
        protocol=protocol, uplink_mode=up, downlink_mode=down,
        num_devices=10, channel_uses=T, pu_db=0.0, pd_db=10.0,
        global_iterations=10, alpha=0.001, quantizer_bits=16,
        samples_per_device=64, master_seed=seed, **candidate)


def sweep_T100(candidate, seeds):
    t0 = time.time()
    acc = {}
    for seed in seeds:
        acc[("il", "-", seed)] = final_avg_accuracy(
            build(candidate, "il", "digital", "digital", 100, seed))
    for protocol in ("fl", "fd", "hfd"):
        for up, down in COMBOS:
            for seed in seeds:
                acc[(protocol, up[0] + down[0], seed)] = final_avg_accuracy(
                    build(candidate, protocol, up, down, 100, seed))
    print(f"[T=100 sweep took {time.time()-t0:.0f}s]")
    return acc


def report(acc, seeds):
    def mean(protocol, combo):
        return float(np.mean([acc[(protocol, combo, s)] for s in seeds]))

    il = mean("il", "-")
    print(f"IL: {il:.3f}")
    ok = True
    for up, down in COMBOS:
        combo = up[0] + down[0]
        fl, fd, hfd = (mean(p, combo) for p in ("fl", "fd", "hfd"))
        c8a = fd - fl >= 0.05 and hfd - fl >= 0.05
        c8b = fd > il and hfd > il
        ok &= c8a and c8b
        print(f"{combo}: FL {fl:.3f}  FD {fd:.3f}  HFD {hfd:.3f} | "
              f"FD-FL {fd-fl:+.3f} HFD-FL {hfd-fl:+.3f} "
              f"FD-IL {fd-il:+.3f} HFD-IL {hfd-il:+.3f} "
              f"{'OK' if c8a and c8b else 'FAIL'}")
    fl_aa, fl_dd = mean("fl", "aa"), mean("fl", "dd")
    c10 = fl_aa >= fl_dd
    print(f"c10 FL aa {fl_aa:.3f} vs dd {fl_dd:.3f}: "
          f"{'OK' if c10 else 'FAIL'}")
    return ok and c10


if __name__ == "__main__":
    candidate = dict(
        data="synthetic:classes=2,dim=24,noise=0.30,spread=0.20",
        model="mlp:32,16", local_epochs=8, reg_weight=0.5,
        hfd_distill_steps=8, test_samples=500,
    )
    seeds = [0, 1, 2]
    acc = sweep_T100(candidate, seeds)
    report(acc, seeds)
