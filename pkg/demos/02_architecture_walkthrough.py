#!/usr/bin/env python3
"""Architecture bookkeeping: stage shapes, channel growth, receptive fields.

Prints the per-stage (spatial, channels, receptive field) ledger for the
proposed network and each ablation variant, plus the dense-block channel
arithmetic d_l = d0 + g*l that the builders enforce.
"""

from densevox.layers import receptive_field
from densevox.model import NetworkSpec, build, shape_ledger

print("receptive-field fold (kernel 3, stride 1):")
for depth, note in [(1, "initial conv"), (7, "after stage 1"), (13, "after stage 2")]:
    rf = receptive_field([(3, 1)] * depth)
    print(f"  {depth:2d} conv layers -> {rf}^3   ({note})")

for variant in ("proposed", "non_dense", "non_hierarchical", "single_scale"):
    spec = NetworkSpec(variant=variant)
    params = build(spec, seed=0)
    print(f"\n=== {variant} ===")
    print(f"input patch {spec.input_extent}^3 x {spec.in_channels} per pathway, "
          f"{spec.pathways} pathway(s), predicts center {spec.output_extent}^3")
    print(f"{'stage':10s} {'spatial':>8s} {'channels':>9s} {'recep. field':>13s}")
    for name, extent, channels, rf in shape_ledger(spec):
        print(f"{name:10s} {extent:7d}^3 {channels:9d} {rf:11d}^3")
    print(f"trainable parameters: {params.total_parameters():,}")

# channel growth inside a dense block: each layer consumes the concatenation
# of everything before it and contributes `growth` new feature maps
spec = NetworkSpec()
block = spec.block_spec(1)
widths = [block.width_at(l) for l in range(block.num_layers + 1)]
print("\nstage-1 dense block concat widths per layer:", widths)
block2 = spec.block_spec(2)
widths2 = [block2.width_at(l) for l in range(block2.num_layers + 1)]
print("stage-2 dense block concat widths per layer:", widths2)
