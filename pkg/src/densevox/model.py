"""Network assembly: two-pathway hierarchical model and its ablation variants.

The proposed network runs two structurally identical feature extractors, one
over (FLAIR, T2) and one over (T1, T1-CE). Each extractor is an initial 3^3
convolution followed by two dense-block stages, each closed by a 1^3
transition convolution. A binary head scores whole-lesion membership from
extractor A alone; a 4-class head scores the concatenated features of both
extractors. Both heads read every stage (multi-scale) through 1^3 score
convolutions whose outputs are summed over stages.

Variants: ``non_dense`` swaps dense blocks for plain chains with a matched
channel schedule, ``non_hierarchical`` uses a single extractor over all four
modalities and only the 4-class head, ``single_scale`` keeps stage 1 only
with a correspondingly smaller input patch.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, asdict, replace

import numpy as np

from . import tensor as T
from . import layers as L

CHECKPOINT_MAGIC = b"DVCK"
CHECKPOINT_VERSION = 1

VARIANTS = ("proposed", "non_dense", "non_hierarchical", "single_scale")


class CheckpointError(ValueError):
    """Malformed or mismatched checkpoint file."""


@dataclass(frozen=True)
class NetworkSpec:
    variant: str = "proposed"
    growth: int = 12
    init_kernels: int = 24
    layers_per_block: int = 6
    kernel: int = 3
    output_extent: int = 12
    num_classes: int = 4
    binary_classes: int = 2
    lambda_binary: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; one of {VARIANTS}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel must be odd and >= 1")
        if self.layers_per_block < 1 or self.growth < 1 or self.init_kernels < 1:
            raise ValueError("growth, init_kernels, layers_per_block must be >= 1")
        if self.output_extent < 1:
            raise ValueError("output_extent must be >= 1")

    @property
    def stages(self):
        return 1 if self.variant == "single_scale" else 2

    @property
    def pathways(self):
        return 1 if self.variant == "non_hierarchical" else 2

    @property
    def in_channels(self):
        return 4 if self.variant == "non_hierarchical" else 2

    @property
    def input_extent(self):
        shrink = (self.kernel - 1) * (1 + self.stages * self.layers_per_block)
        return self.output_extent + shrink

    def stage_width(self, stage):
        """Feature channels after ``stage`` (1-based)."""
        return self.init_kernels + self.growth * self.layers_per_block * stage

    def stage_extent(self, stage, input_extent=None):
        """Spatial extent after ``stage`` for a given input extent."""
        e = self.input_extent if input_extent is None else input_extent
        return e - (self.kernel - 1) * (1 + stage * self.layers_per_block)

    def stage_receptive_field(self, stage):
        seq = [(self.kernel, 1)] * (1 + stage * self.layers_per_block)
        return L.receptive_field(seq)

    @property
    def has_binary_head(self):
        return self.variant != "non_hierarchical"

    def block_spec(self, stage):
        return L.DenseBlockSpec(
            num_layers=self.layers_per_block,
            growth=self.growth,
            kernel=self.kernel,
            input_channels=self.stage_width(stage - 1),
        )

    def to_json_dict(self):
        return asdict(self)

    @classmethod
    def from_json_dict(cls, d):
        return cls(**d)

    def spec_hash(self):
        blob = json.dumps(self.to_json_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def shape_ledger(spec, input_extent=None):
    """Per-stage (spatial extent, channels, receptive field) triples.

    Row 0 is the initial convolution; the following rows close each stage.
    """
    e = spec.input_extent if input_extent is None else input_extent
    rows = [("initial", e - spec.kernel + 1, spec.init_kernels,
             L.receptive_field([(spec.kernel, 1)]))]
    for s in range(1, spec.stages + 1):
        rows.append((f"stage{s}", spec.stage_extent(s, e), spec.stage_width(s),
                     spec.stage_receptive_field(s)))
    return rows


class Parameters:
    """Named store of trainable tensors plus non-learnable running state."""

    def __init__(self, spec):
        self.spec = spec
        self.params = {}
        self.state = {}

    def add_param(self, name, array):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        self.params[name] = T.Tensor(array, requires_grad=True, name=name)

    def add_state(self, name, array):
        if name in self.state:
            raise KeyError(f"duplicate state {name}")
        self.state[name] = array

    def __getitem__(self, name):
        return self.params[name]

    def names(self):
        return list(self.params.keys())

    def total_parameters(self):
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grads(self):
        for p in self.params.values():
            p.zero_grad()

    def unit_view(self, prefix):
        """Parameter dict for one composite unit under ``prefix``."""
        return {
            "gamma": self.params[f"{prefix}/gamma"],
            "beta": self.params[f"{prefix}/beta"],
            "w": self.params[f"{prefix}/w"],
            "b": self.params[f"{prefix}/b"],
            "run_mean": self.state[f"{prefix}/run_mean"],
            "run_var": self.state[f"{prefix}/run_var"],
        }


def _he_kernel(rng, k, cin, cout):
    std = np.sqrt(2.0 / (k ** 3 * cin))
    return (rng.standard_normal((k, k, k, cin, cout)) * std).astype(np.float32)


def _add_unit(params, rng, prefix, k, cin, cout):
    params.add_param(f"{prefix}/gamma", np.ones(cin, np.float32))
    params.add_param(f"{prefix}/beta", np.zeros(cin, np.float32))
    params.add_param(f"{prefix}/w", _he_kernel(rng, k, cin, cout))
    params.add_param(f"{prefix}/b", np.zeros(cout, np.float32))
    params.add_state(f"{prefix}/run_mean", np.zeros(cin, np.float32))
    params.add_state(f"{prefix}/run_var", np.ones(cin, np.float32))


def _add_conv(params, rng, prefix, k, cin, cout, zero=False):
    if zero:
        params.add_param(f"{prefix}/w", np.zeros((k, k, k, cin, cout), np.float32))
    else:
        params.add_param(f"{prefix}/w", _he_kernel(rng, k, cin, cout))
    params.add_param(f"{prefix}/b", np.zeros(cout, np.float32))


def _extractor_names(spec):
    if spec.variant == "non_hierarchical":
        return ("ext",)
    return ("ext_a", "ext_b")


def _build_extractor(params, rng, spec, name):
    k = spec.kernel
    _add_conv(params, rng, f"{name}/init", k, spec.in_channels, spec.init_kernels)
    for s in range(1, spec.stages + 1):
        d0 = spec.stage_width(s - 1)
        for layer in range(spec.layers_per_block):
            if spec.variant == "non_dense":
                cin = d0 + spec.growth * layer
                cout = d0 + spec.growth * (layer + 1)
            else:
                cin = d0 + spec.growth * layer
                cout = spec.growth
            _add_unit(params, rng, f"{name}/stage{s}/unit{layer}", k, cin, cout)
        width = spec.stage_width(s)
        _add_conv(params, rng, f"{name}/stage{s}/trans", 1, width, width)


def build(spec, seed=0):
    """Initialize all parameters for ``spec``; deterministic for a fixed seed.

    Conv kernels get He-style normal init (std = sqrt(2 / fan_in)); BN gamma
    starts at 1, beta at 0, biases at 0, running stats at (0, 1).
    """
    rng = np.random.default_rng(seed)
    params = Parameters(spec)
    for name in _extractor_names(spec):
        _build_extractor(params, rng, spec, name)
    for s in range(1, spec.stages + 1):
        width = spec.stage_width(s)
        if spec.has_binary_head:
            _add_conv(params, rng, f"head_bin/stage{s}", 1, width, spec.binary_classes)
            _add_conv(params, rng, f"head_full/stage{s}", 1,
                      width * 2, spec.num_classes)
        else:
            _add_conv(params, rng, f"head_full/stage{s}", 1, width, spec.num_classes)
    _structural_check(params, spec)
    return params


def _structural_check(params, spec):
    """Audit built kernel shapes against the analytic channel/RF ledger."""
    ledger = shape_ledger(spec)
    for name in _extractor_names(spec):
        init_w = params[f"{name}/init/w"]
        assert init_w.shape == (spec.kernel,) * 3 + (spec.in_channels, spec.init_kernels)
        for s in range(1, spec.stages + 1):
            d0 = spec.stage_width(s - 1)
            for layer in range(spec.layers_per_block):
                w = params[f"{name}/stage{s}/unit{layer}/w"]
                expect_cin = d0 + spec.growth * layer
                assert w.shape[3] == expect_cin, (name, s, layer, w.shape)
            trans = params[f"{name}/stage{s}/trans/w"]
            width = ledger[s][2]
            assert trans.shape == (1, 1, 1, width, width)
    # receptive fields must satisfy the fold r <- r + (k-1)*s at every stage
    for s in range(1, spec.stages + 1):
        expect = 1 + (spec.kernel - 1) * (1 + s * spec.layers_per_block)
        assert ledger[s][3] == expect


def _extractor_forward(params, spec, name, x, mode):
    """Run one extractor; returns the per-stage transition outputs."""
    h = T.conv3d_valid(x, params[f"{name}/init/w"], params[f"{name}/init/b"])
    stage_feats = []
    for s in range(1, spec.stages + 1):
        units = [params.unit_view(f"{name}/stage{s}/unit{l}")
                 for l in range(spec.layers_per_block)]
        if spec.variant == "non_dense":
            d0 = spec.stage_width(s - 1)
            widths = [d0 + spec.growth * (l + 1) for l in range(spec.layers_per_block)]
            h = L.plain_chain_forward(h, widths, spec.kernel, units, mode)
        else:
            h = L.dense_block_forward(h, spec.block_spec(s), units, mode)
        h = L.transition_forward(h, params[f"{name}/stage{s}/trans/w"],
                                 params[f"{name}/stage{s}/trans/b"])
        stage_feats.append(h)
    return stage_feats


def _head_scores(params, spec, head, stage_inputs):
    """Sum per-stage 1^3 score convolutions, center-cropping to the output extent."""
    out_shape = (spec.output_extent,) * 3
    total = None
    parts = []
    for s, feat in enumerate(stage_inputs, start=1):
        aligned = T.crop_center(feat, out_shape)
        score = T.conv3d_valid(aligned, params[f"{head}/stage{s}/w"],
                               params[f"{head}/stage{s}/b"])
        parts.append(score)
        total = score if total is None else T.add(total, score)
    return total, parts


def _check_patch(spec, x, channels):
    e = spec.input_extent
    off = 1 if x.data.ndim == 5 else 0
    if x.data.ndim not in (4, 5) or x.data.shape[off:off + 3] != (e, e, e) \
            or x.data.shape[-1] != channels:
        raise T.ShapeError(
            f"expected input patch [{e},{e},{e},{channels}] "
            f"(optionally batched), got {x.data.shape}")


def forward_hierarchical(params, spec, patch_ft, patch_t1, mode, return_parts=False):
    """Two-pathway forward pass.

    ``patch_ft`` carries (FLAIR, T2) and ``patch_t1`` carries (T1, T1-CE), in
    that order, each ``[38,38,38,2]`` for the paper-scale spec (batched with a
    leading axis is fine). Returns (binary_scores, full_scores), both over the
    center ``output_extent^3`` region.
    """
    if not spec.has_binary_head:
        raise ValueError("use forward_single_input for the non_hierarchical variant")
    patch_ft = _as_tensor(patch_ft)
    patch_t1 = _as_tensor(patch_t1)
    _check_patch(spec, patch_ft, 2)
    _check_patch(spec, patch_t1, 2)
    feats_a = _extractor_forward(params, spec, "ext_a", patch_ft, mode)
    feats_b = _extractor_forward(params, spec, "ext_b", patch_t1, mode)
    binary, bin_parts = _head_scores(params, spec, "head_bin", feats_a)
    fused = [T.concat_channels(a, b) for a, b in zip(feats_a, feats_b)]
    full, full_parts = _head_scores(params, spec, "head_full", fused)
    if return_parts:
        return binary, full, {"binary": bin_parts, "full": full_parts}
    return binary, full


def forward_single_input(params, spec, patch, mode, return_parts=False):
    """Forward pass for the non_hierarchical variant (4-channel input)."""
    patch = _as_tensor(patch)
    _check_patch(spec, patch, 4)
    feats = _extractor_forward(params, spec, "ext", patch, mode)
    full, full_parts = _head_scores(params, spec, "head_full", feats)
    if return_parts:
        return None, full, {"binary": [], "full": full_parts}
    return None, full


def forward(params, spec, inputs, mode, return_parts=False):
    """Variant dispatch. ``inputs`` is (patch_ft, patch_t1) or a 4-ch patch."""
    if spec.has_binary_head:
        return forward_hierarchical(params, spec, inputs[0], inputs[1], mode,
                                    return_parts)
    patch = inputs if not isinstance(inputs, (tuple, list)) else inputs[0]
    return forward_single_input(params, spec, patch, mode, return_parts)


def _as_tensor(x):
    if isinstance(x, T.Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return T.Tensor(arr)


# ---------------------------------------------------------------------------
# checkpoint container


def save_checkpoint(path, params, seed, epoch=0, step=0, final=False,
                    adam_state=None):
    """Write a bit-exact checkpoint: manifest JSON + raw little-endian f32 blocks."""
    entries = []
    blobs = []
    offset = 0

    def push(name, kind, arr):
        nonlocal offset
        a = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "kind": kind,
                        "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes

    for name, p in params.params.items():
        push(name, "param", p.data)
    for name, arr in params.state.items():
        push(name, "state", arr)
    if adam_state is not None:
        for name in params.params:
            push(name, "adam_m", adam_state["m"][name])
            push(name, "adam_v", adam_state["v"][name])
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "spec": params.spec.to_json_dict(),
        "spec_hash": params.spec.spec_hash(),
        "seed": int(seed),
        "epoch": int(epoch),
        "step": int(step),
        "final": bool(final),
        "adam": adam_state is not None,
        "adam_step": int(adam_state["t"]) if adam_state is not None else 0,
        "entries": entries,
    }
    mblob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(mblob)))
        f.write(mblob)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    """Read a checkpoint; returns a dict with params, spec, adam and schedule info."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (mlen,) = struct.unpack_from("<Q", raw, 8)
    if 16 + mlen > len(raw):
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[16:16 + mlen].decode())
    except ValueError as e:
        raise CheckpointError(f"{path}: corrupt manifest: {e}") from e
    data = raw[16 + mlen:]
    spec = NetworkSpec.from_json_dict(manifest["spec"])
    if manifest.get("spec_hash") != spec.spec_hash():
        raise CheckpointError(f"{path}: spec hash mismatch")
    params = Parameters(spec)
    adam = {"m": {}, "v": {}, "t": manifest.get("adam_step", 0)} \
        if manifest.get("adam") else None

    for ent in manifest["entries"]:
        shape = tuple(ent["shape"])
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = ent["offset"]
        end = start + 4 * n
        if end > len(data):
            raise CheckpointError(f"{path}: truncated data for entry {ent['name']}")
        arr = np.frombuffer(data[start:end], dtype="<f4").reshape(shape).copy()
        kind = ent["kind"]
        if kind == "param":
            params.add_param(ent["name"], arr)
        elif kind == "state":
            params.add_state(ent["name"], arr)
        elif kind == "adam_m":
            adam["m"][ent["name"]] = arr
        elif kind == "adam_v":
            adam["v"][ent["name"]] = arr
        else:
            raise CheckpointError(f"{path}: unknown entry kind {kind!r}")
    return {
        "params": params,
        "spec": spec,
        "seed": manifest["seed"],
        "epoch": manifest["epoch"],
        "step": manifest["step"],
        "final": manifest["final"],
        "adam": adam,
    }


# ---------------------------------------------------------------------------
# receptive-field probe


def receptive_field_probe(params, spec, seed=0, n_voxels=5, n_out=20, n_in=20):
    """Black-box locality check on a (possibly untrained) model.

    For random output voxels, randomizing input voxels outside the deepest
    receptive-field window must leave that voxel's scores bit-identical
    (inference mode is purely local); randomizing voxels inside the stage-1
    window should change the scores for almost every draw.
    """
    rng = np.random.default_rng(seed)
    e = spec.input_extent
    rf_deep = spec.stage_receptive_field(spec.stages)
    rf_s1 = spec.stage_receptive_field(1)
    nch = spec.in_channels

    def make_inputs(buf):
        if spec.has_binary_head:
            return buf[..., :2], buf[..., 2:]
        return buf

    def full_scores(batch_buf):
        with T.no_grad():
            if spec.has_binary_head:
                _, full, parts = forward_hierarchical(
                    params, spec, batch_buf[..., :2], batch_buf[..., 2:],
                    "infer", return_parts=True)
            else:
                _, full, parts = forward_single_input(
                    params, spec, batch_buf, "infer", return_parts=True)
        return full.data, parts["full"][0].data

    base = rng.standard_normal((1, e, e, e, 2 * spec.pathways)).astype(np.float32)
    base_full, base_s1 = full_scores(base)

    out_changed = 0
    out_total = 0
    in_changed = 0
    in_s1_changed = 0
    in_total = 0
    for _ in range(n_voxels):
        p = rng.integers(0, spec.output_extent, size=3)
        lo = p                      # deepest window = [p, p + rf_deep)
        hi = p + rf_deep
        s1_lo = p + (rf_deep - rf_s1) // 2
        s1_hi = s1_lo + rf_s1

        # perturbations outside the deepest window
        buf = np.repeat(base, n_out, axis=0)
        for i in range(n_out):
            while True:
                v = rng.integers(0, e, size=3)
                if np.any(v < lo) or np.any(v >= hi):
                    break
            buf[i, v[0], v[1], v[2], :] += rng.standard_normal(buf.shape[-1]).astype(np.float32) + 1.0
        full, _ = full_scores(buf)
        sel = full[:, p[0], p[1], p[2], :]
        ref = base_full[0, p[0], p[1], p[2], :]
        out_changed += int(np.sum(np.any(sel != ref, axis=-1)))
        out_total += n_out

        # perturbations inside the stage-1 window
        buf = np.repeat(base, n_in, axis=0)
        for i in range(n_in):
            v = rng.integers(s1_lo, s1_hi, size=3)
            buf[i, v[0], v[1], v[2], :] += rng.standard_normal(buf.shape[-1]).astype(np.float32) + 1.0
        full, s1 = full_scores(buf)
        sel = full[:, p[0], p[1], p[2], :]
        ref = base_full[0, p[0], p[1], p[2], :]
        in_changed += int(np.sum(np.any(sel != ref, axis=-1)))
        sel1 = s1[:, p[0], p[1], p[2], :]
        ref1 = base_s1[0, p[0], p[1], p[2], :]
        in_s1_changed += int(np.sum(np.any(sel1 != ref1, axis=-1)))
        in_total += n_in

    return {
        "n_voxels": n_voxels,
        "out_of_window_changed": out_changed,
        "out_of_window_total": out_total,
        "in_window_changed_fraction": in_changed / in_total,
        "stage1_changed_fraction": in_s1_changed / in_total,
        "receptive_field": rf_deep,
        "stage1_receptive_field": rf_s1,
    }
