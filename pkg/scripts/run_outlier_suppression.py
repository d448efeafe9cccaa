#!/usr/bin/env python3
"""Compare binary input confidence against the learned estimator.

Trains ncnn-binary and ncnn-conf on the same disturbed synthetic data and
reports (a) how much confidence the estimator assigns to disturbed vs
clean input points, and (b) the test RMSE of both variants.
"""
import argparse
import sys

import numpy as np

from nconv.evaluation import evaluate_samples
from nconv.networks import PipelineConfig, build_pipeline, input_confidence
from nconv.synth import DisturbSpec, SceneSpec, synth_dataset
from nconv.training import TrainConfig, train


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-train", type=int, default=64)
    ap.add_argument("--n-test", type=int, default=16)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--density", type=float, default=0.05)
    ap.add_argument("--outlier-frac", type=float, default=0.1)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    disturb = DisturbSpec(density=args.density, outlier_frac=args.outlier_frac,
                          outlier_model="swap")
    train_data = synth_dataset(SceneSpec(seed=args.seed, size=(args.size, args.size)),
                               disturb, args.n_train)
    test_data = synth_dataset(SceneSpec(seed=args.seed + 1000,
                                        size=(args.size, args.size)),
                              disturb, args.n_test)
    tcfg = TrainConfig(epochs=args.epochs, batch=4, seed=args.seed)

    results = {}
    for variant in ("ncnn-binary", "ncnn-conf"):
        pipeline = build_pipeline(PipelineConfig(variant=variant), seed=args.seed)
        print(f"training {variant} ({pipeline.parameter_count} parameters) ...")
        train(pipeline, train_data, tcfg)
        report = evaluate_samples(pipeline, test_data)
        results[variant] = (pipeline, report)
        print(f"  test rmse {report.rmse:.4f} m, mae {report.mae:.4f} m, "
              f"ause {report.ause:.4f}")

    conf_net = results["ncnn-conf"][0]
    disturbed, clean = [], []
    for sample in test_data:
        c0 = input_confidence(conf_net, sample.sparse)
        kept = sample.sparse != 0
        disturbed.append(c0[kept & sample.outlier_mask])
        clean.append(c0[kept & ~sample.outlier_mask])
    disturbed = np.concatenate(disturbed)
    clean = np.concatenate(clean)

    print("\nestimated input confidence at kept pixels")
    print(f"  disturbed: {disturbed.mean():.4f}   clean: {clean.mean():.4f}   "
          f"ratio: {disturbed.mean() / clean.mean():.3f}")
    r_bin = results["ncnn-binary"][1].rmse
    r_conf = results["ncnn-conf"][1].rmse
    print(f"test rmse: binary {r_bin:.4f} m vs learned confidence {r_conf:.4f} m "
          f"(ratio {r_conf / r_bin:.3f})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
