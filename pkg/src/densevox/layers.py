"""Composite layers: pre-activation conv units, dense blocks, transitions.

A unit applies BN -> ReLU -> conv in that order. A dense block feeds each
unit the channel-concatenation of the block input and every previous unit
output; valid convolution shrinks the spatial extent by ``kernel - 1`` per
unit, so earlier maps are center-cropped to the current extent before
concatenation. Channel bookkeeping follows d_l = d0 + g*l.
"""

from dataclasses import dataclass

from . import tensor as T


@dataclass(frozen=True)
class DenseBlockSpec:
    num_layers: int
    growth: int
    kernel: int
    input_channels: int

    @property
    def output_channels(self):
        return self.input_channels + self.growth * self.num_layers

    @property
    def spatial_shrink(self):
        return self.num_layers * (self.kernel - 1)

    def width_at(self, layer):
        """Concat width entering unit ``layer`` (0-based)."""
        return self.input_channels + self.growth * layer


def receptive_field(layer_sequence):
    """Fold kernel/stride pairs into a receptive-field extent, r0 = 1."""
    r = 1
    s_prod = 1
    for kernel, stride in layer_sequence:
        if kernel < 1 or stride < 1:
            raise ValueError(f"kernels and strides must be >= 1, got ({kernel}, {stride})")
        r = r + (kernel - 1) * s_prod
        s_prod *= stride
    return r


def composite_unit_forward(x, unit_params, mode):
    """BN -> ReLU -> conv. ``unit_params`` carries gamma/beta/run_*/w/b."""
    h = T.batch_norm(x, unit_params["gamma"], unit_params["beta"],
                     unit_params["run_mean"], unit_params["run_var"], mode)
    h = T.relu(h)
    return T.conv3d_valid(h, unit_params["w"], unit_params["b"])


def _spatial(t):
    off = 1 if t.data.ndim == 5 else 0
    return t.data.shape[off:off + 3]


def dense_block_forward(x0, spec, units, mode):
    """Densely connected block; returns the concat of (cropped) x0..x_L.

    ``units`` is one parameter dict per layer, sized for the running concat
    width. Output: spatial extents shrink by spec.spatial_shrink, channels
    grow to spec.output_channels.
    """
    if x0.data.shape[-1] != spec.input_channels:
        raise T.ShapeError(f"dense block expects {spec.input_channels} input "
                           f"channels, got {x0.data.shape[-1]}")
    min_extent = spec.spatial_shrink + 1
    if min(_spatial(x0)) < min_extent:
        raise T.ShapeError(f"dense block needs spatial extents >= {min_extent}, "
                           f"got {_spatial(x0)}")
    if len(units) != spec.num_layers:
        raise T.ShapeError(f"expected {spec.num_layers} unit parameter sets, "
                           f"got {len(units)}")

    feats = [x0]
    for layer, unit in enumerate(units):
        target = tuple(s - (spec.kernel - 1) * layer for s in _spatial(x0))
        cat = _concat_cropped(feats, target)
        assert cat.data.shape[-1] == spec.width_at(layer)  # Eq. d_l = d0 + g*l
        feats.append(composite_unit_forward(cat, unit, mode))
    final = tuple(s - spec.spatial_shrink for s in _spatial(x0))
    return _concat_cropped(feats, final)


def _concat_cropped(feats, target):
    cropped = []
    for f in feats:
        if _spatial(f) == tuple(target):
            cropped.append(f)
        else:
            cropped.append(T.crop_center(f, target))
    if len(cropped) == 1:
        return cropped[0]
    return T.concat_channels(*cropped)


def plain_chain_forward(x0, widths, kernel, units, mode):
    """Linear chain of composite units (the non-dense ablation).

    ``widths`` lists the output channels of each unit; the receptive field
    and spatial shrinkage match a dense block with the same depth.
    """
    h = x0
    for width, unit in zip(widths, units):
        h = composite_unit_forward(h, unit, mode)
        if h.data.shape[-1] != width:
            raise T.ShapeError(f"plain chain width mismatch: expected {width}, "
                               f"got {h.data.shape[-1]}")
    return h


def transition_forward(x, w, b):
    """1x1x1 convolution preserving channel count and spatial shape."""
    C = x.data.shape[-1]
    if w.data.shape != (1, 1, 1, C, C):
        raise T.ShapeError(f"transition kernel must be [1,1,1,{C},{C}], "
                           f"got {w.data.shape}")
    return T.conv3d_valid(x, w, b)
