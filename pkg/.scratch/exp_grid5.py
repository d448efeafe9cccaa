import itertools, time
import numpy as np
from nconv.networks import PipelineConfig, build_pipeline, input_confidence
from nconv.synth import DisturbSpec, SceneSpec, synth_dataset
from nconv.training import TrainConfig, train
from nconv.evaluation import evaluate_samples

train_data = synth_dataset(SceneSpec(seed=0, size=(64, 64)),
                           DisturbSpec(density=0.05, outlier_frac=0.1,
                                       outlier_model="swap"), 64)
test_data = synth_dataset(SceneSpec(seed=1000, size=(64, 64)),
                          DisturbSpec(density=0.05, outlier_frac=0.1,
                                      outlier_model="swap"), 16)

def conf_ratio(p):
    dist, clean = [], []
    for s in test_data:
        c0 = input_confidence(p, s.sparse)
        kept = s.sparse != 0
        dist.append(c0[kept & s.outlier_mask]); clean.append(c0[kept & ~s.outlier_mask])
    d = np.concatenate(dist).mean(); c = np.concatenate(clean).mean()
    return d / c, d, c

for decay_every, scale in itertools.product((3, 10), (1.0, 0.1)):
    tcfg = TrainConfig(epochs=30, batch=4, seed=0, decay_every=decay_every)
    rmse = {}
    for variant in ("ncnn-conf", "ncnn-binary"):
        p = build_pipeline(PipelineConfig(variant=variant, input_scale=scale), seed=0)
        t0 = time.time()
        train(p, train_data, tcfg, log=None)
        rep = evaluate_samples(p, test_data)
        rmse[variant] = rep.rmse
        if variant == "ncnn-conf":
            ratio, d, c = conf_ratio(p)
    print(f"decay={decay_every:2d} scale={scale:4.1f}: conf-ratio {ratio:.3f} "
          f"(d {d:.3f} c {c:.3f})  rmse conf {rmse['ncnn-conf']:.4f} "
          f"bin {rmse['ncnn-binary']:.4f} ratio {rmse['ncnn-conf']/rmse['ncnn-binary']:.3f}",
          flush=True)
