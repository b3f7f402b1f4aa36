"""Weak and aggressive views of a few synthetic images, written as PPMs.

Run from the repository root; files land in demo_views/.
"""
import os

import numpy as np

from msr import augment as A
from msr.data import SynthSpec, synth_dataset

out = "demo_views"
os.makedirs(out, exist_ok=True)

ds = synth_dataset(SynthSpec(per_class=2, seed=0))
images = ds.images[:4]
print("source batch:", images.shape, images.dtype)

views = A.make_views(images, step_seed=7)
for name in ("v_w", "v_w_prime", "v_a", "v_a_prime"):
    v = getattr(views, name)
    print(f"{name:10s} mean {v.mean():.3f}  range [{v.min():.2f}, {v.max():.2f}]")

# the aggressive view is stage two applied to the weak view, and can be replayed alone
rng = A.sample_rng(*views.seed(0, A.AGGR))
replay = A.aggressive_augment(views.v_w[0], rng)
print("replayed v_a[0] matches:", np.array_equal(replay, views.v_a[0]))

# doubling the jitter strengths is the noisy setting used for the grid comparison
noisy = A.make_views(images, step_seed=7, spec=A.AugSpec().noisy(2.0))
gap = np.abs(noisy.v_a - noisy.v_w).mean() / np.abs(views.v_a - views.v_w).mean()
print(f"noisy aggressive views drift {gap:.2f}x further from their weak views")

for i in range(len(images)):
    A.write_ppm(os.path.join(out, f"{i}_source.ppm"), images[i])
    for name in ("v_w", "v_a", "v_w_prime", "v_a_prime"):
        A.write_ppm(os.path.join(out, f"{i}_{name}.ppm"), getattr(views, name)[i])
print("wrote", len(os.listdir(out)), "files to", out)
