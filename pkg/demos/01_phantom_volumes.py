#!/usr/bin/env python3
"""Synthetic phantom volumes: nested lesion regions, bias field, noise.

Generates a phantom, reports how the lesion regions nest, then renders an
axial slice as ASCII so you can eyeball the geometry without a viewer.
"""

import numpy as np

from densevox.data import PhantomSpec, generate_phantom, normalize

spec = PhantomSpec(extents=(64, 64, 64), seed=42)
vol = generate_phantom(spec)

print("phantom extents:", vol.extents)
print("modalities: FLAIR, T1, T1-CE, T2  (float32)")
for label, name in [(0, "background/brain"), (1, "NCR/NET"), (2, "ED"), (4, "ET")]:
    n = int(np.sum(vol.labels == label))
    print(f"  label {label} ({name:16s}): {n:7d} voxels")
lesion = vol.labels != 0
print(f"lesion fraction: {lesion.mean():.3%}")

# the enhancing and necrotic cores always sit inside the edema region
cores = np.isin(vol.labels, (1, 4))
shell = vol.labels == 2
print("cores present:", bool(cores.any()), "| edema shell present:", bool(shell.any()))

# intensity separation per modality (lesion classes vs healthy tissue)
print("\nmean intensity by region (raw):")
print(f"{'':10s} {'brain':>8s} {'ED':>8s} {'NCR/NET':>8s} {'ET':>8s}")
brain = (vol.labels == 0) & (vol.modalities[0] != 0)
for m, name in enumerate(("FLAIR", "T1", "T1-CE", "T2")):
    grid = vol.modalities[m]
    row = [grid[brain].mean(), grid[vol.labels == 2].mean(),
           grid[vol.labels == 1].mean(), grid[vol.labels == 4].mean()]
    print(f"{name:10s} " + " ".join(f"{v:8.3f}" for v in row))

# normalization: zero mean, unit variance over the nonzero (tissue) voxels
norm = normalize(vol)
grid = norm.modalities[0]
mask = grid != 0
print(f"\nafter normalization: FLAIR tissue mean {grid[mask].mean():+.2e}, "
      f"std {grid[mask].std():.6f}, background still exactly zero: "
      f"{bool(np.all(grid[~mask] == 0))}")

# ASCII axial slice through the lesion center
zc = int(np.round(np.mean(np.argwhere(lesion)[:, 0])))
glyphs = {0: ".", 1: "n", 2: "e", 4: "E"}
print(f"\naxial label slice z={zc}  (. background, e ED, n NCR/NET, E ET)")
for row in vol.labels[zc, ::2, ::2]:
    print("".join(glyphs[v] for v in row))
