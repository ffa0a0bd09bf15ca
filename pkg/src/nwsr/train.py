"""Patch pipeline, SSIM+L1 loss, Adam and Population Based Training."""

from __future__ import annotations

import copy
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from nwsr import iqa, nwlayer
from nwsr.network import ArchSpec, Network

log = logging.getLogger(__name__)

PATCH = 64
ALPHA = 0.84
LR_GRID = tuple(10.0**-i for i in range(2, 8))


class DataError(ValueError):
    pass


# --- patches --------------------------------------------------------------


def tile_origins(height, width, size=PATCH):
    """Top-left corners of non-overlapping tiles; partial border tiles dropped."""
    if height < size or width < size:
        raise DataError(f"frame {width}x{height} is smaller than a {size}x{size} patch")
    return [(y, x) for y in range(0, height - size + 1, size) for x in range(0, width - size + 1, size)]


@dataclass
class PatchSet:
    """Aligned ``(N, 1, P, P)`` inputs, optional masks and targets."""

    inputs: np.ndarray
    targets: np.ndarray
    masks: np.ndarray | None = None

    def __post_init__(self):
        if self.inputs.shape != self.targets.shape:
            raise DataError("inputs and targets must be aligned")
        if self.masks is not None and self.masks.shape != self.inputs.shape:
            raise DataError("masks must align with inputs")

    def __len__(self):
        return len(self.inputs)

    def subset(self, idx):
        m = None if self.masks is None else self.masks[idx]
        return PatchSet(self.inputs[idx], self.targets[idx], m)


def extract_patches(inputs, targets, masks=None, size=PATCH) -> PatchSet:
    """Tile every (input, target[, mask]) frame triple at stride `size`."""
    inputs, targets = list(inputs), list(targets)
    if len(inputs) != len(targets):
        raise DataError("need one target per input frame")
    if masks is not None:
        masks = list(masks)
        if len(masks) != len(inputs):
            raise DataError("need one mask per input frame")
    xs, ys, ms = [], [], []
    for f, (x, y) in enumerate(zip(inputs, targets)):
        if x.shape != y.shape:
            raise DataError(f"frame {f}: input {x.shape} and target {y.shape} differ")
        for v, u in tile_origins(*x.shape, size):
            xs.append(x[v : v + size, u : u + size])
            ys.append(y[v : v + size, u : u + size])
            if masks is not None:
                ms.append(masks[f][v : v + size, u : u + size])
    if not xs:
        raise DataError("no patches extracted")
    stack = lambda a: np.stack(a)[:, None].astype(np.float64)  # noqa: E731
    return PatchSet(stack(xs), stack(ys), stack(ms) if masks is not None else None)


# --- loss -----------------------------------------------------------------


def ssim_l1_loss(pred, target, alpha=ALPHA, data_range=1.0):
    """``alpha (1 - SSIM) + (1 - alpha) L1`` and its gradient w.r.t. `pred`.

    Inputs may be 2-D or batched ``(N, ..., H, W)``; the loss is averaged
    over the batch.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    s, gs = iqa.ssim_and_grad(pred, target, data_range)
    n_items = s.size
    n_px = pred.shape[-1] * pred.shape[-2]
    diff = pred - target
    loss = alpha * (1.0 - s.mean()) + (1.0 - alpha) * np.abs(diff).mean()
    grad = (-alpha * gs + (1.0 - alpha) * np.sign(diff) / n_px) / n_items
    return float(loss), grad


# --- Adam -----------------------------------------------------------------


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0


def adam_step(params, grads, state: AdamState, kinds=None):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``.

    Entries of `kinds` equal to ``"nw"`` are L1-constrained NW kernels:
    their gradient is projected onto the tangent of the constraint and the
    updated kernel is re-normalised.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    kinds = kinds or [None] * len(params)
    m = state.m or [np.zeros_like(p) for p in params]
    v = state.v or [np.zeros_like(p) for p in params]
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = [], [], []
    for p, g, mi, vi, kind in zip(params, grads, m, v, kinds):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if kind == "nw":
            g = nwlayer.project_kernel_grad(p, g)
        mi = b1 * mi + (1 - b1) * g
        vi = b2 * vi + (1 - b2) * g * g
        mhat = mi / (1 - b1**t)
        vhat = vi / (1 - b2**t)
        q = p - state.lr * mhat / (np.sqrt(vhat) + state.eps)
        if kind == "nw":
            q = nwlayer.normalize_kernel(q)
        new_p.append(q)
        new_m.append(mi)
        new_v.append(vi)
    return new_p, AdamState(state.lr, b1, b2, state.eps, new_m, new_v, t)


def apply_adam(net: Network, state: AdamState) -> AdamState:
    ps = net.params
    new, state = adam_step([p.value for p in ps], [p.grad for p in ps], state, [p.kind for p in ps])
    for p, q in zip(ps, new):
        p.value[...] = q
    return state


# --- training -------------------------------------------------------------


def _batch(net: Network, patches: PatchSet, idx, dtype):
    x = patches.inputs[idx].astype(dtype)
    m = None if patches.masks is None or not net.uses_mask else patches.masks[idx].astype(dtype)
    return x, m


def batch_loss(net: Network, patches: PatchSet, idx, dtype=np.float64, backward=False):
    x, m = _batch(net, patches, idx, dtype)
    pred = net.forward(x, m)
    loss, grad = ssim_l1_loss(pred.astype(np.float64), patches.targets[idx])
    if backward:
        net.backward(grad.astype(dtype))
    return loss


def train_epoch(net: Network, state: AdamState, patches: PatchSet, rng, batch_size=16, dtype=np.float64):
    """One shuffled pass; returns ``(state, mean training loss)``."""
    if len(patches) == 0:
        raise DataError("empty training set")
    order = rng.permutation(len(patches))
    losses = []
    for i in range(0, len(order), batch_size):
        idx = np.sort(order[i : i + batch_size])
        net.zero_grad()
        losses.append(batch_loss(net, patches, idx, dtype, backward=True))
        state = apply_adam(net, state)
    return state, float(np.mean(losses))


def validation_loss(net: Network, patches: PatchSet, batch_size=16, dtype=np.float64):
    if len(patches) == 0:
        raise DataError("empty validation set")
    total = 0.0
    for i in range(0, len(patches), batch_size):
        idx = np.arange(i, min(i + batch_size, len(patches)))
        total += batch_loss(net, patches, idx, dtype) * len(idx)
    return total / len(patches)


# --- population based training --------------------------------------------


@dataclass
class PBTConfig:
    population: int = 6
    iterations: int = 100
    perturbation_interval: int = 20
    lr_grid: tuple = LR_GRID
    epochs_per_iteration: int = 1
    perturb_factors: tuple = (0.8, 1.25)
    batch_size: int = 16
    seed: int = 0
    dtype: str = "float64"
    workers: int = 1

    def __post_init__(self):
        if self.population < 1:
            raise ValueError("population must be >= 1")
        if self.iterations % self.perturbation_interval:
            raise ValueError("perturbation_interval must divide iterations")
        if len(self.lr_grid) < self.population:
            raise ValueError("need one initial learning rate per population member")


@dataclass
class Member:
    id: int
    net: Network
    adam: AdamState
    rng: np.random.Generator
    val_loss: float = float("inf")


@dataclass
class ExploitEvent:
    iteration: int
    target: int
    source: int
    lr: float
    val_min_before: float
    val_min_after: float
    params_equal: bool


@dataclass
class PBTResult:
    best: Member
    members: list
    history: list  # (iteration, member, lr, train_loss, val_loss)
    events: list


def _member_step(member: Member, train: PatchSet, val: PatchSet, cfg: PBTConfig, dtype):
    tl = []
    for _ in range(cfg.epochs_per_iteration):
        member.adam, loss = train_epoch(member.net, member.adam, train, member.rng, cfg.batch_size, dtype)
        tl.append(loss)
    member.val_loss = validation_loss(member.net, val, cfg.batch_size, dtype)
    return float(np.mean(tl))


def pbt_run(cfg: PBTConfig, train: PatchSet, val: PatchSet, spec: ArchSpec, callback=None, after_exploit=None) -> PBTResult:
    """Train a population; every interval the bottom half copies the top half.

    Exploit is truncation selection: each bottom-half member copies the
    weights, optimiser state and learning rate of a uniformly drawn
    top-half member, then explores by scaling its learning rate by a
    factor drawn from `perturb_factors`. `callback(it, members)` runs after
    each iteration's training, `after_exploit(it, members)` after each exploit.
    """
    if len(train) == 0 or len(val) == 0:
        raise DataError("PBT needs non-empty training and validation patch sets")
    dtype = np.dtype(cfg.dtype)
    orch_rng = np.random.default_rng([cfg.seed, 0x5EED])
    members = []
    for i in range(cfg.population):
        net = Network(ArchSpec(spec.arch, spec.blocks, spec.filters, spec.nw_depth, spec.in_channels, spec.seed + i))
        members.append(Member(i, net, AdamState(cfg.lr_grid[i]), np.random.default_rng([cfg.seed, i])))
    history, events = [], []
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for it in range(cfg.iterations):
            if pool:
                losses = list(pool.map(lambda m: _member_step(m, train, val, cfg, dtype), members))
            else:
                losses = [_member_step(m, train, val, cfg, dtype) for m in members]
            for m, tl in zip(members, losses):
                history.append((it, m.id, m.adam.lr, tl, m.val_loss))
            log.info("iteration %d: val %s", it, ", ".join(f"{m.val_loss:.4f}" for m in members))
            if callback:
                callback(it, members)
            last = it + 1 == cfg.iterations
            if cfg.population > 1 and (it + 1) % cfg.perturbation_interval == 0 and not last:
                events += _exploit_explore(members, val, cfg, orch_rng, it, dtype)
                if after_exploit:
                    after_exploit(it, members)
    finally:
        if pool:
            pool.shutdown()
    best = min(members, key=lambda m: (m.val_loss, m.id))
    return PBTResult(best, members, history, events)


def _exploit_explore(members, val, cfg: PBTConfig, rng, it, dtype):
    ranked = sorted(members, key=lambda m: (m.val_loss, m.id))
    half = len(members) // 2
    top, bottom = ranked[:half], ranked[len(members) - half :]
    before = min(m.val_loss for m in members)
    events = []
    for target in bottom:
        source = top[int(rng.integers(len(top)))]
        target.net.set_flat(source.net.get_flat())
        target.adam = copy.deepcopy(source.adam)
        equal = bool(np.array_equal(target.net.get_flat(), source.net.get_flat()))
        target.adam.lr = source.adam.lr * float(rng.choice(cfg.perturb_factors))
        target.val_loss = validation_loss(target.net, val, cfg.batch_size, dtype)
        events.append(ExploitEvent(it, target.id, source.id, target.adam.lr, before, float("nan"), equal))
    after = min(m.val_loss for m in members)
    for e in events:
        e.val_min_after = after
    return events
