"""A short MSR pretraining run on gray synthetic silhouettes, then linear probes.

Takes under a minute on one core.  Eight epochs are only 72 SGD steps, and at
that length the trained encoder probes no better than its random initialization;
the acceptance suite runs the 50-epoch version.
"""
import time

import numpy as np

from msr import nn
from msr.data import SynthSpec, synth_dataset
from msr.evaluation import ProbeConfig, knn_probe, linear_probe
from msr.trainer import TrainConfig, pretrain, tune_allocator

tune_allocator()
train = synth_dataset(SynthSpec(per_class=150, seed=0, recipe="silhouettes"))
test = synth_dataset(SynthSpec(per_class=75, seed=1000, recipe="silhouettes"))
print(f"train {train.images.shape}, test {test.images.shape}, classes {train.class_count}")

cfg = TrainConfig(arch="cifar-tiny", epochs=8, batch_size=64, lr0=0.05)
start = time.perf_counter()


def report(state, m):
    if state.k % state.steps_per_epoch == 0:
        print(f"epoch {state.k // state.steps_per_epoch:2d}  loss {m.loss:.4f}  beta {m.beta:.3f}  lr {m.lr:.4f}")


state = pretrain(cfg, train, callback=report)
print(f"{state.K} steps in {time.perf_counter() - start:.0f} s, "
      f"{state.log[-1]['backward']} backward passes per step")

probe = ProbeConfig()
random_init = nn.init_models(cfg.arch, seed=cfg.seed, dtype=np.float32).online
for name, params in (("random init", random_init), ("MSR", state.pair.online)):
    lin = linear_probe(params, train, test, probe).accuracy
    print(f"{name:12s} linear {100 * lin:5.1f}%  kNN {100 * knn_probe(params, train, test):5.1f}%")
