#!/usr/bin/env python3
"""Sliding-window dense prediction and Dice scoring on a held-out phantom.

Trains the miniature two-pathway model briefly, then tiles a whole volume
with the 4-class head and evaluates the three aggregated lesion regions.
"""

import numpy as np

from densevox.data import PhantomSpec, generate_phantom
from densevox.infer import aggregate_regions, predict_volume, tile_origins
from densevox.metrics import evaluate
from densevox.model import NetworkSpec
from densevox.train import TrainConfig, run_training

spec = NetworkSpec(growth=4, init_kernels=6, layers_per_block=2, output_extent=6)

print("tiling arithmetic (stride = prediction block extent):")
for extent in (36, 40):
    origins = tile_origins(extent, spec.output_extent)
    print(f"  extent {extent}: origins {origins}"
          f"{'  (last tile shifted to the far edge)' if extent % spec.output_extent else ''}")

# gentler noise than the default: this is a minute-scale miniature model
gentle = dict(extents=(36, 36, 36), noise_std=0.2, bias_amplitude=0.1)
train_vols = [generate_phantom(PhantomSpec(seed=s, **gentle))
              for s in (10, 11, 12)]
held_out = generate_phantom(PhantomSpec(seed=99, **gentle))

config = TrainConfig(epochs=6, patches_per_epoch=60, mini_batch_size=4, seed=1)
print(f"\ntraining on {len(train_vols)} phantoms "
      f"({config.epochs} x {config.patches_per_epoch} patches)...")
params, _, history = run_training(train_vols, config, spec=spec)
print(f"final training loss: {history[-1][2]:.4f}")

print("predicting the held-out volume (inference mode, running BN stats)...")
pred = predict_volume(held_out, params, spec, tile_batch=8)

scores = evaluate(pred, held_out.labels)
print("\nDice on the held-out phantom:")
for region in ("complete", "core", "enhancing"):
    truth_n = int(aggregate_regions(held_out.labels)[region].sum())
    pred_n = int(aggregate_regions(pred)[region].sum())
    print(f"  {region:9s}: {scores[region]:.3f}   "
          f"(truth {truth_n} voxels, predicted {pred_n})")

agree = float(np.mean(pred == held_out.labels))
print(f"voxel accuracy: {agree:.3%}")
print("\n(the full-size network and schedule are exercised by the acceptance "
      "suite: pytest tests/test_acceptance.py -s)")
