"""Volumes, synthetic phantoms, normalization, patch sampling and MVOL I/O.

A Volume holds four MRI-like modality grids (FLAIR, T1, T1-CE, T2) as float32
plus a uint8 label map over {0, 1, 2, 4}: 0 background, 1 NCR/NET, 2 ED,
4 ET. Phantoms paint nested ellipsoids (the ET and NCR/NET cores always lie
inside the ED region), modulate intensities with a smooth multiplicative
bias field, and add Gaussian noise inside the tissue mask only, so the
zero background stays exactly zero.
"""

import struct
from dataclasses import dataclass, field, replace

import numpy as np

MODALITIES = ("flair", "t1", "t1ce", "t2")
VALID_LABELS = (0, 1, 2, 4)

# label <-> class-index bijection {0,1,2,4} <-> {0,1,2,3}
LABEL_TO_CLASS = np.zeros(5, np.int64)
LABEL_TO_CLASS[[0, 1, 2, 4]] = [0, 1, 2, 3]
CLASS_TO_LABEL = np.array([0, 1, 2, 4], np.uint8)

MVOL_MAGIC = b"MVOL"
MVOL_VERSION = 1
MVOL_FLAG_LABELS_ONLY = 1


class MvolError(ValueError):
    """Base class for container format failures."""


class MvolMagicError(MvolError):
    pass


class MvolVersionError(MvolError):
    pass


class MvolTruncatedError(MvolError):
    pass


class MvolLabelError(MvolError):
    pass


class MvolExtentError(MvolError):
    pass


@dataclass
class Volume:
    """Four co-registered modality grids plus a label map.

    modalities: float32 [4, D, H, W] in MODALITIES order; may be None for a
    labels-only volume. labels: uint8 [D, H, W] over {0, 1, 2, 4}.
    """
    modalities: np.ndarray
    labels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    volume_id: str = ""

    def __post_init__(self):
        if self.modalities is not None:
            if self.modalities.ndim != 4 or self.modalities.shape[0] != 4:
                raise ValueError(f"modalities must be [4,D,H,W], got "
                                 f"{self.modalities.shape}")
            if self.modalities.shape[1:] != self.labels.shape:
                raise ValueError(f"modality extents {self.modalities.shape[1:]} "
                                 f"!= label extents {self.labels.shape}")
        bad = ~np.isin(self.labels, VALID_LABELS)
        if bad.any():
            raise MvolLabelError(
                f"labels contain values outside {VALID_LABELS}: "
                f"{sorted(np.unique(self.labels[bad]).tolist())}")

    @property
    def extents(self):
        return self.labels.shape


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and intensity recipe for a synthetic phantom volume.

    Ellipsoid centers/semi-axes are fractions of the volume extents, jittered
    per seed. Region intensity means are chosen so FLAIR/T2 carry the
    strongest edema contrast and T1-CE the strongest enhancing-core contrast.
    """
    extents: tuple = (96, 96, 96)
    seed: int = 0
    brain_axes: tuple = (0.44, 0.42, 0.42)
    ed_axes: tuple = (0.21, 0.18, 0.16)
    et_scale: float = 0.38          # core semi-axes as a fraction of ED axes
    ncr_scale: float = 0.30
    core_offset: float = 0.42       # core center offset along ED's first axis
    center_jitter: float = 0.05
    axis_jitter: float = 0.15
    # heavy voxel noise and bias drift: per-voxel intensity alone is an
    # unreliable classifier, so spatial context has to carry the decision
    noise_std: float = 0.45
    bias_amplitude: float = 0.22
    # rows: brain, ED, NCR/NET, ET; columns: FLAIR, T1, T1CE, T2
    intensity_means: tuple = (
        (1.00, 1.00, 1.00, 1.00),
        (1.85, 0.85, 0.90, 1.80),
        (1.30, 0.55, 0.50, 1.25),
        (1.35, 1.10, 1.95, 1.30),
    )

    def with_seed(self, seed):
        return replace(self, seed=seed)


def _ellipsoid_mask(extents, center, axes):
    grids = np.ogrid[tuple(slice(0, e) for e in extents)]
    acc = np.zeros(extents, np.float64)
    for g, c, a in zip(grids, center, axes):
        acc = acc + ((g - c) / max(a, 1e-9)) ** 2
    return acc <= 1.0


def generate_phantom(spec):
    """Deterministically paint a phantom Volume from ``spec``.

    Raises ValueError if the ET and NCR/NET cores overlap or a core escapes
    the enclosing ED ellipsoid.
    """
    rng = np.random.default_rng(spec.seed)
    ext = np.asarray(spec.extents, np.float64)
    center = ext / 2.0

    jitter = rng.uniform(-spec.center_jitter, spec.center_jitter, 3) * ext
    scale = 1.0 + rng.uniform(-spec.axis_jitter, spec.axis_jitter, 3)
    ed_center = center + jitter
    ed_axes = np.asarray(spec.ed_axes) * ext.min() * scale

    off = np.zeros(3)
    off[0] = spec.core_offset * ed_axes[0]
    et_center = ed_center + off
    ncr_center = ed_center - off
    et_axes = ed_axes * spec.et_scale
    ncr_axes = ed_axes * spec.ncr_scale

    brain = _ellipsoid_mask(spec.extents, center, np.asarray(spec.brain_axes) * ext)
    ed_all = _ellipsoid_mask(spec.extents, ed_center, ed_axes)
    et = _ellipsoid_mask(spec.extents, et_center, et_axes)
    ncr = _ellipsoid_mask(spec.extents, ncr_center, ncr_axes)

    if (et & ncr).any():
        raise ValueError("phantom spec rejected: ET and NCR/NET cores overlap")
    if (et & ~ed_all).any() or (ncr & ~ed_all).any():
        raise ValueError("phantom spec rejected: a core escapes the ED ellipsoid")

    labels = np.zeros(spec.extents, np.uint8)
    labels[ed_all] = 2
    labels[ncr] = 1
    labels[et] = 4

    means = np.asarray(spec.intensity_means, np.float64)
    region_index = np.zeros(spec.extents, np.int64)      # 0 brain
    region_index[ed_all] = 1
    region_index[ncr] = 2
    region_index[et] = 3

    modalities = np.zeros((4,) + tuple(spec.extents), np.float32)
    bias = _bias_field(spec, rng) if spec.bias_amplitude > 0 else None
    for m in range(4):
        grid = means[region_index, m]
        if bias is not None:
            grid = grid * bias
        if spec.noise_std > 0:
            grid = grid + rng.normal(0.0, spec.noise_std, spec.extents)
        grid = np.where(brain, grid, 0.0)
        modalities[m] = grid.astype(np.float32)

    return Volume(modalities=modalities, labels=labels,
                  volume_id=f"phantom-{spec.seed}")


def _bias_field(spec, rng):
    """Smooth multiplicative distortion: 1 + amplitude * normalized quadratic."""
    coords = [np.linspace(-1.0, 1.0, e) for e in spec.extents]
    zz, yy, xx = np.meshgrid(*coords, indexing="ij")
    c = rng.uniform(-1.0, 1.0, 9)
    q = (c[0] * zz + c[1] * yy + c[2] * xx
         + c[3] * zz * yy + c[4] * yy * xx + c[5] * zz * xx
         + c[6] * zz ** 2 + c[7] * yy ** 2 + c[8] * xx ** 2)
    q /= max(np.abs(q).max(), 1e-9)
    return 1.0 + spec.bias_amplitude * q


def lesion_fraction_of(volume):
    return float(np.mean(volume.labels != 0))


def normalize(volume):
    """Standardize each modality to zero mean, unit variance over its nonzero
    voxels; exact-zero background voxels stay zero. Returns a new Volume."""
    if volume.modalities is None:
        raise ValueError("cannot normalize a labels-only volume")
    out = np.empty_like(volume.modalities)
    for m in range(4):
        grid = volume.modalities[m]
        mask = grid != 0
        n = int(mask.sum())
        if n == 0:
            raise ValueError(f"modality {MODALITIES[m]} is all-zero; "
                             f"nothing to normalize")
        vals = grid[mask]
        mu = float(vals.mean())
        sd = float(vals.std())
        if sd == 0.0:
            raise ValueError(f"modality {MODALITIES[m]} has zero variance over "
                             f"its {n} nonzero voxels; degenerate volume")
        out[m] = np.where(mask, (grid - mu) / sd, 0.0).astype(np.float32)
    return Volume(modalities=out, labels=volume.labels.copy(),
                  spacing=volume.spacing, volume_id=volume.volume_id)


@dataclass
class PatchBatch:
    """Inputs and center-region targets for one optimization step."""
    inputs_ft: np.ndarray        # [N, e, e, e, 2]  (FLAIR, T2)
    inputs_t1: np.ndarray        # [N, e, e, e, 2]  (T1, T1-CE)
    labels_full: np.ndarray      # [N, o, o, o] class indices 0..3
    labels_binary: np.ndarray    # [N, o, o, o] in {0, 1}
    provenance: list = field(default_factory=list)   # (volume_id, center)

    def __post_init__(self):
        if not np.array_equal(self.labels_binary, (self.labels_full != 0).astype(self.labels_binary.dtype)):
            raise ValueError("labels_binary must equal (labels_full != 0)")

    def __len__(self):
        return self.inputs_ft.shape[0]

    def slice(self, lo, hi):
        return PatchBatch(self.inputs_ft[lo:hi], self.inputs_t1[lo:hi],
                          self.labels_full[lo:hi], self.labels_binary[lo:hi],
                          self.provenance[lo:hi])

    @property
    def inputs_all(self):
        """[N, e, e, e, 4] in (FLAIR, T1, T1CE, T2) order, for the
        non-hierarchical variant."""
        ft, t1 = self.inputs_ft, self.inputs_t1
        return np.stack([ft[..., 0], t1[..., 0], t1[..., 1], ft[..., 1]], axis=-1)


def reflect_pad_modalities(volume, pad):
    """Reflect-pad each modality grid by ``pad`` voxels per side."""
    return np.pad(volume.modalities, ((0, 0),) + ((pad, pad),) * 3, mode="reflect")


def sample_patches(volume, count, lesion_fraction=0.5, seed=0,
                   patch_extent=38, label_extent=12):
    """Draw class-balanced training patches from one normalized volume.

    round(count * lesion_fraction) patch centers are sampled uniformly from
    lesion voxels, the rest uniformly from non-lesion voxels; inputs come from
    the reflect-padded modality grids, labels from the un-padded center block.
    Deterministic for a fixed seed.
    """
    if volume.modalities is None:
        raise ValueError("labels-only volume cannot provide patches")
    D, H, W = volume.extents
    half = label_extent // 2
    pad = (patch_extent - label_extent) // 2
    if (patch_extent - label_extent) % 2 != 0:
        raise ValueError("patch and label extents must differ by an even margin")
    lo = half
    his = [e - (label_extent - half) for e in (D, H, W)]
    if min(his) < lo:
        raise ValueError(f"volume extents {volume.extents} too small for "
                         f"{label_extent}^3 label blocks")

    n_lesion = int(round(count * lesion_fraction))
    n_bg = count - n_lesion

    valid = np.zeros(volume.extents, bool)
    valid[lo:his[0] + 1, lo:his[1] + 1, lo:his[2] + 1] = True
    lesion_mask = (volume.labels != 0) & valid
    bg_mask = (volume.labels == 0) & valid

    rng = np.random.default_rng(seed)
    groups = []
    for n_want, mask, kind in ((n_lesion, lesion_mask, "lesion"),
                               (n_bg, bg_mask, "background")):
        if n_want == 0:
            continue
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            raise ValueError(f"volume {volume.volume_id!r} has 0 usable {kind} "
                             f"voxels but {n_want} {kind}-centered patches were "
                             f"requested")
        chosen = rng.choice(idx, size=n_want, replace=True)
        groups.append(np.stack(np.unravel_index(chosen, volume.extents), axis=1))
    centers = np.vstack(groups) if groups else np.zeros((0, 3), np.int64)

    padded = reflect_pad_modalities(volume, pad)
    e = patch_extent
    n = centers.shape[0]
    inputs_ft = np.empty((n, e, e, e, 2), np.float32)
    inputs_t1 = np.empty((n, e, e, e, 2), np.float32)
    labels_full = np.empty((n, label_extent, label_extent, label_extent), np.int64)
    prov = []
    flair, t1, t1ce, t2 = padded[0], padded[1], padded[2], padded[3]
    for i, (cz, cy, cx) in enumerate(centers):
        z0, y0, x0 = cz - half, cy - half, cx - half      # padded-coords start
        sl = (slice(z0, z0 + e), slice(y0, y0 + e), slice(x0, x0 + e))
        inputs_ft[i, ..., 0] = flair[sl]
        inputs_ft[i, ..., 1] = t2[sl]
        inputs_t1[i, ..., 0] = t1[sl]
        inputs_t1[i, ..., 1] = t1ce[sl]
        lz, ly, lx = cz - half, cy - half, cx - half
        block = volume.labels[lz:lz + label_extent, ly:ly + label_extent,
                              lx:lx + label_extent]
        labels_full[i] = LABEL_TO_CLASS[block]
        prov.append((volume.volume_id, (int(cz), int(cy), int(cx))))
    labels_binary = (labels_full != 0).astype(np.int64)
    return PatchBatch(inputs_ft, inputs_t1, labels_full, labels_binary, prov)


# ---------------------------------------------------------------------------
# MVOL container (little-endian):
#   magic "MVOL" | u32 version | u32 flags | u32 D,H,W | f32 spacing x3
#   | 4 modality grids f32 row-major (FLAIR,T1,T1CE,T2) unless labels-only
#   | label grid u8

_HEADER = struct.Struct("<4sIIIIIfff")
_MAX_EXTENT = 4096


def write_volume(path, volume, labels_only=False):
    flags = MVOL_FLAG_LABELS_ONLY if labels_only or volume.modalities is None else 0
    D, H, W = volume.extents
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MVOL_MAGIC, MVOL_VERSION, flags, D, H, W,
                             *[float(s) for s in volume.spacing]))
        if not flags & MVOL_FLAG_LABELS_ONLY:
            for m in range(4):
                f.write(np.ascontiguousarray(volume.modalities[m], "<f4").tobytes())
        f.write(np.ascontiguousarray(volume.labels, np.uint8).tobytes())


def read_volume(path, volume_id=None):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise MvolTruncatedError(f"{path}: shorter than the fixed header")
    magic, version, flags, D, H, W, sz, sy, sx = _HEADER.unpack_from(raw, 0)
    if magic != MVOL_MAGIC:
        raise MvolMagicError(f"{path}: bad magic {magic!r}")
    if version != MVOL_VERSION:
        raise MvolVersionError(f"{path}: unsupported version {version}")
    if flags & ~MVOL_FLAG_LABELS_ONLY:
        raise MvolError(f"{path}: unknown flag bits {flags:#x}")
    if min(D, H, W) < 1 or max(D, H, W) > _MAX_EXTENT:
        raise MvolExtentError(f"{path}: unreasonable extents {(D, H, W)}")
    nvox = D * H * W
    labels_only = bool(flags & MVOL_FLAG_LABELS_ONLY)
    need = _HEADER.size + (0 if labels_only else 16 * nvox) + nvox
    if len(raw) < need:
        raise MvolTruncatedError(f"{path}: need {need} bytes, have {len(raw)}")
    off = _HEADER.size
    modalities = None
    if not labels_only:
        modalities = np.frombuffer(raw, "<f4", count=4 * nvox, offset=off)
        modalities = modalities.reshape(4, D, H, W).copy()
        off += 16 * nvox
    labels = np.frombuffer(raw, np.uint8, count=nvox, offset=off)
    labels = labels.reshape(D, H, W).copy()
    bad = ~np.isin(labels, VALID_LABELS)
    if bad.any():
        raise MvolLabelError(f"{path}: label bytes outside {VALID_LABELS}: "
                             f"{sorted(np.unique(labels[bad]).tolist())}")
    vid = volume_id if volume_id is not None else str(path)
    return Volume(modalities=modalities, labels=labels, spacing=(sz, sy, sx),
                  volume_id=vid)
