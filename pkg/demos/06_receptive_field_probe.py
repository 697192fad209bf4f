#!/usr/bin/env python3
"""Black-box locality check: perturbations outside the receptive field.

For a random-weight model in inference mode, changing any input voxel
outside an output voxel's deepest receptive-field window must leave that
voxel's scores byte-identical; changes inside the stage-1 window should
essentially always register. Runs the miniature spec here; the paper-scale
run (27^3 deep window, 15^3 stage-1 window) is acceptance criterion 3.
"""

from densevox.model import NetworkSpec, build, receptive_field_probe

spec = NetworkSpec(growth=4, init_kernels=6, layers_per_block=2, output_extent=6)
params = build(spec, seed=5)

print(f"spec: input {spec.input_extent}^3, output {spec.output_extent}^3")
print(f"stage receptive fields: "
      f"{[spec.stage_receptive_field(s) for s in (1, spec.stages)]}")

rep = receptive_field_probe(params, spec, seed=0, n_voxels=5, n_out=20, n_in=20)

print(f"\nprobed {rep['n_voxels']} random output voxels")
print(f"out-of-window perturbations changing the output: "
      f"{rep['out_of_window_changed']} / {rep['out_of_window_total']} "
      f"(locality requires exactly 0)")
print(f"in-window perturbations changing the output: "
      f"{rep['in_window_changed_fraction']:.2%}")
print(f"in-window perturbations changing the stage-1 score component: "
      f"{rep['stage1_changed_fraction']:.2%}")

ok = rep["out_of_window_changed"] == 0 and rep["in_window_changed_fraction"] > 0.99
print("\nPASS" if ok else "\nFAIL")
