"""Joint two-pathway optimization: loss, Adam, the epoch schedule, checkpoints.

Each epoch samples a fixed number of lesion-balanced patches from the
training volumes, then walks them in mini-batches; both pathways are updated
together through loss_total = loss_full + lambda * loss_binary. Epoch seeds
are derived deterministically from (seed, epoch), so a run resumed from a
checkpoint reproduces the exact loss sequence of an uninterrupted one.
"""

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from . import model as M
from .data import normalize, sample_patches, PatchBatch


class TrainingDiverged(RuntimeError):
    """Non-finite loss; carries the provenance of the offending batch."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    patches_per_epoch: int = 400
    lesion_fraction: float = 0.5
    mini_batch_size: int = 4
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss_weight_binary: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.patches_per_epoch % self.mini_batch_size != 0:
            raise ValueError(
                f"patches_per_epoch ({self.patches_per_epoch}) must be divisible "
                f"by mini_batch_size ({self.mini_batch_size})")


def cross_entropy(scores, targets):
    """Mean cross entropy over all predicted voxels.

    scores: Tensor [..., k]; targets: integer ndarray matching the non-channel
    axes, values in [0, k). Computed via a stable log-sum-exp; differentiable
    w.r.t. scores.
    """
    scores = scores if isinstance(scores, T.Tensor) else T.Tensor(scores)
    targets = np.asarray(targets)
    k = scores.data.shape[-1]
    if targets.shape != scores.data.shape[:-1]:
        raise T.ShapeError(f"target shape {targets.shape} does not match score "
                           f"voxels {scores.data.shape[:-1]}")
    if targets.min() < 0 or targets.max() >= k:
        raise ValueError(f"targets must lie in [0, {k}), got range "
                         f"[{targets.min()}, {targets.max()}]")
    z = scores.data
    zmax = z.max(axis=-1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=-1, keepdims=True)
    logp = (z - zmax) - np.log(sez)
    n = targets.size
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked.sum() / z.dtype.type(n))

    def backward_fn(gy):
        if scores.requires_grad:
            g = ez / sez
            np.subtract.at(g.reshape(-1, k),
                           (np.arange(n), targets.reshape(-1)), 1.0)
            scores.accumulate(g * (gy / z.dtype.type(n)))

    return T._make(np.asarray(loss), (scores,), backward_fn)


class Adam:
    """Adam with bias correction; moment buffers mirror the parameter shapes."""

    def __init__(self, params, config):
        self.config = config
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.params.items()}

    def step(self, params):
        cfg = self.config
        self.t += 1
        b1 = np.float32(cfg.beta1)
        b2 = np.float32(cfg.beta2)
        lr = np.float32(cfg.learning_rate)
        eps = np.float32(cfg.eps)
        c1 = np.float32(1.0 - cfg.beta1 ** self.t)
        c2 = np.float32(1.0 - cfg.beta2 ** self.t)
        for name, p in params.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)

    def state_dict(self):
        return {"m": self.m, "v": self.v, "t": self.t}

    @classmethod
    def from_state(cls, params, config, state):
        opt = cls(params, config)
        opt.t = state["t"]
        for name in opt.m:
            opt.m[name] = state["m"][name].copy()
            opt.v[name] = state["v"][name].copy()
        return opt


def _loss_on_batch(params, spec, batch, lam, mode="train"):
    if spec.has_binary_head:
        binary, full = M.forward_hierarchical(
            params, spec, batch.inputs_ft, batch.inputs_t1, mode)
        loss_full = cross_entropy(full, batch.labels_full)
        loss_binary = cross_entropy(binary, batch.labels_binary)
        if lam == 0.0:
            loss_total = loss_full
        else:
            loss_total = T.add(loss_full, T.scale(loss_binary, lam))
    else:
        _, full = M.forward_single_input(params, spec, batch.inputs_all, mode)
        loss_full = cross_entropy(full, batch.labels_full)
        loss_binary = None
        loss_total = loss_full
    return loss_total, loss_binary, loss_full


def train_step(batch, params, adam, config, spec=None):
    """One optimization step: forward, backward, Adam update, zero grads.

    Returns (loss_total, loss_binary, loss_full) as python floats
    (loss_binary is 0.0 for the non-hierarchical variant).
    """
    spec = spec if spec is not None else params.spec
    lam = config.loss_weight_binary
    loss_total, loss_binary, loss_full = _loss_on_batch(params, spec, batch, lam)
    lt = float(loss_total.data)
    lb = float(loss_binary.data) if loss_binary is not None else 0.0
    lf = float(loss_full.data)
    if not np.isfinite(lt):
        raise TrainingDiverged(
            f"non-finite loss {lt} (binary {lb}, full {lf}); "
            f"batch provenance: {batch.provenance}")
    T.backward(loss_total)
    adam.step(params)
    params.zero_grads()
    return lt, lb, lf


def epoch_seed(seed, epoch, index=0):
    """Stable per-(epoch, volume) sampling seed."""
    ss = np.random.SeedSequence([int(seed), int(epoch), int(index)])
    return int(ss.generate_state(1)[0])


def sample_epoch(volumes, config, epoch, spec):
    """Balanced patches for one epoch, split evenly across volumes, shuffled."""
    n_vol = len(volumes)
    base = config.patches_per_epoch // n_vol
    rem = config.patches_per_epoch % n_vol
    batches = []
    for i, vol in enumerate(volumes):
        count = base + (1 if i < rem else 0)
        if count == 0:
            continue
        batches.append(sample_patches(
            vol, count, lesion_fraction=config.lesion_fraction,
            seed=epoch_seed(config.seed, epoch, i),
            patch_extent=spec.input_extent, label_extent=spec.output_extent))
    merged = PatchBatch(
        np.concatenate([b.inputs_ft for b in batches]),
        np.concatenate([b.inputs_t1 for b in batches]),
        np.concatenate([b.labels_full for b in batches]),
        np.concatenate([b.labels_binary for b in batches]),
        sum((b.provenance for b in batches), []),
    )
    order = np.random.default_rng(
        epoch_seed(config.seed, epoch, len(volumes))).permutation(len(merged))
    return PatchBatch(merged.inputs_ft[order], merged.inputs_t1[order],
                      merged.labels_full[order], merged.labels_binary[order],
                      [merged.provenance[i] for i in order])


def run_training(volumes, config, spec=None, out_dir=None, resume_from=None,
                 log_fn=None):
    """Full schedule: per epoch, sample patches, optimize, checkpoint.

    Volumes are normalized on entry. Writes ``epoch_XXX.ckpt`` per epoch (the
    last flagged final) and an append-only ``metrics.log`` with lines
    ``epoch step loss_total loss_binary loss_full wallclock_ms`` when
    ``out_dir`` is given. Returns (params, adam, history).
    """
    if len(volumes) == 0:
        raise ValueError("run_training needs at least one training volume")
    spec = spec if spec is not None else M.NetworkSpec()
    volumes = [normalize(v) for v in volumes]

    if resume_from is not None:
        ck = M.load_checkpoint(resume_from)
        if ck["spec"].spec_hash() != spec.spec_hash():
            raise M.CheckpointError("resume checkpoint was built for a different spec")
        params = ck["params"]
        adam = Adam.from_state(params, config, ck["adam"]) if ck["adam"] \
            else Adam(params, config)
        start_epoch = ck["epoch"]
        step = ck["step"]
    else:
        params = M.build(spec, seed=config.seed)
        adam = Adam(params, config)
        params.zero_grads()
        start_epoch = 0
        step = 0

    out_path = Path(out_dir) if out_dir is not None else None
    history = []
    log_file = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        log_file = open(out_path / "metrics.log", "a")

    def emit(line):
        if log_file is not None:
            log_file.write(line + "\n")
            log_file.flush()
        if log_fn is not None:
            log_fn(line)

    try:
        for epoch in range(start_epoch, config.epochs):
            epoch_patches = sample_epoch(volumes, config, epoch, spec)
            bs = config.mini_batch_size
            for lo in range(0, len(epoch_patches), bs):
                t0 = time.perf_counter()
                batch = epoch_patches.slice(lo, lo + bs)
                lt, lb, lf = train_step(batch, params, adam, config, spec)
                ms = int((time.perf_counter() - t0) * 1000)
                step += 1
                history.append((epoch, step, lt, lb, lf))
                emit(f"{epoch} {step} {lt:.9e} {lb:.9e} {lf:.9e} {ms}")
            if out_path is not None:
                final = epoch == config.epochs - 1
                M.save_checkpoint(out_path / f"epoch_{epoch + 1:03d}.ckpt", params,
                                  seed=config.seed, epoch=epoch + 1, step=step,
                                  final=final, adam_state=adam.state_dict())
    finally:
        if log_file is not None:
            log_file.close()
    return params, adam, history
