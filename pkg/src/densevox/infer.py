"""Sliding-window dense prediction over whole volumes.

The output space is tiled with stride equal to the prediction block extent;
tiles near the far edge shift back to end exactly at the boundary, and
overlapping voxels take the later tile's value in lexicographic (d, h, w)
order, so the assembled label map is independent of evaluation order and
worker count.
"""

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import tensor as T
from . import model as M
from .data import CLASS_TO_LABEL, normalize, reflect_pad_modalities


def tile_origins(extent, tile):
    """Origins covering [0, extent) with stride ``tile``, far edge aligned."""
    if extent < tile:
        raise ValueError(f"extent {extent} smaller than tile {tile}")
    origins = list(range(0, extent - tile + 1, tile))
    if origins[-1] != extent - tile:
        origins.append(extent - tile)
    return origins


def predict_volume(volume, params, spec=None, workers=1, tile_batch=4,
                   return_scores=False):
    """Assemble a full label map from center-block predictions.

    The volume is normalized with the training-time procedure (idempotent),
    reflect-padded by the input/output margin, and swept with the 4-class
    head in inference mode; per-voxel argmax of the summed multi-scale scores
    maps back to labels {0, 1, 2, 4}.
    """
    spec = spec if spec is not None else params.spec
    if params.spec.spec_hash() != spec.spec_hash():
        raise M.CheckpointError("parameters were built for a different spec")
    out_e = spec.output_extent
    in_e = spec.input_extent
    pad = (in_e - out_e) // 2
    D, H, W = volume.extents
    if min(D, H, W) < out_e:
        raise ValueError(f"volume extents {volume.extents} must be >= {out_e} "
                         f"per axis")

    vol = normalize(volume)
    padded = reflect_pad_modalities(vol, pad)
    flair, t1, t1ce, t2 = padded

    origins = [(d, h, w)
               for d in tile_origins(D, out_e)
               for h in tile_origins(H, out_e)
               for w in tile_origins(W, out_e)]

    def gather(origin):
        d, h, w = origin
        sl = (slice(d, d + in_e), slice(h, h + in_e), slice(w, w + in_e))
        if spec.has_binary_head:
            ft = np.stack([flair[sl], t2[sl]], axis=-1)
            tt = np.stack([t1[sl], t1ce[sl]], axis=-1)
            return ft, tt
        return np.stack([flair[sl], t1[sl], t1ce[sl], t2[sl]], axis=-1)

    def run_batch(chunk):
        with T.no_grad():
            if spec.has_binary_head:
                pairs = [gather(o) for o in chunk]
                ft = np.stack([p[0] for p in pairs])
                tt = np.stack([p[1] for p in pairs])
                _, full = M.forward_hierarchical(params, spec, ft, tt, "infer")
            else:
                x = np.stack([gather(o) for o in chunk])
                _, full = M.forward_single_input(params, spec, x, "infer")
        return full.data

    chunks = [origins[i:i + tile_batch] for i in range(0, len(origins), tile_batch)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_batch, chunks))
    else:
        results = [run_batch(c) for c in chunks]

    labels = np.zeros((D, H, W), np.uint8)
    scores = np.zeros((D, H, W, spec.num_classes), np.float32) if return_scores else None
    for chunk, block in zip(chunks, results):
        for (d, h, w), sc in zip(chunk, block):
            cls = np.argmax(sc, axis=-1)
            labels[d:d + out_e, h:h + out_e, w:w + out_e] = CLASS_TO_LABEL[cls]
            if return_scores:
                scores[d:d + out_e, h:h + out_e, w:w + out_e] = sc
    if return_scores:
        return labels, scores
    return labels


def aggregate_regions(labels):
    """The three evaluation regions: complete {1,2,4}, core {1,4}, enhancing {4}."""
    labels = np.asarray(labels)
    return {
        "complete": np.isin(labels, (1, 2, 4)),
        "core": np.isin(labels, (1, 4)),
        "enhancing": labels == 4,
    }
