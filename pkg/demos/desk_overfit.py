"""Train the desk-scale model on four synthetic scans and report training-set DSC.

    python demos/desk_overfit.py [epochs]

With the default 12 epochs this takes about three minutes on one core.
"""
import sys
import time

import numpy as np

from voxmamba.metrics import evaluate_pair
from voxmamba.network import ModelConfig, build_model, count_parameters
from voxmamba.pipeline import SegmentConfig, segment_volume
from voxmamba.training import SyntheticSpec, TrainConfig, gen_synthetic, train


def main(epochs=12):
    data = gen_synthetic(SyntheticSpec(size=48, n_classes=6, count=4), seed=0)
    model = build_model(ModelConfig.desk_scale(), seed=0)
    print(f"desk model: {count_parameters(model):,} parameters")

    def report(epoch, step, _opt):
        print(f"epoch {epoch:2d}  optimizer steps {step:4d}  {time.perf_counter() - t0:6.1f}s", flush=True)

    t0 = time.perf_counter()
    result = train(model, data, TrainConfig(epochs=epochs, lr_max=3e-3, patches_per_axis=2, accumulation_count=2),
                   on_epoch_end=report)
    print(f"loss {result.records[0]['loss']:.3f} -> {result.records[-1]['loss']:.3f}")
    for i, (vol, truth) in enumerate(data):
        rep = evaluate_pair(segment_volume(model, vol, SegmentConfig(truth.class_table, stride=16)), truth)
        print(f"scan {i}: mean foreground DSC {rep.means['dsc']:.3f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 12)
