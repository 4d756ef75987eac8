"""Pretraining, soft pruning with continuation, hard pruning and finetuning."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import ndgrad
from .budgets import BudgetKind, NetworkShape, budget, budget_loss, check_target
from .datakit import Checkpoint, DataSplit
from .models import HardMask, MaskedNet, build_model, materialize, validate_connectivity
from .ndgrad import NonFiniteError, Tensor
from .projections import ContinuationState, crispness_loss, heaviside, logistic, logistic_round, schedule_step

log = logging.getLogger(__name__)


class PruningError(RuntimeError):
    pass


class InfeasibleBudgetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class PruneConfig:
    budget_kind: str = "channel"
    target: float = 0.5
    alpha1: float = 10.0
    alpha2: float = 30.0
    epochs: int = 20
    lr: float = 1e-3
    psi_lr: float | None = 0.1  # None: same as lr
    psi_init: tuple[float, float] | None = (-1.0, 1.0)  # None: keep the network's psi
    weight_decay: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    schedule: str = "default"
    beta_init: float | None = None
    beta_step: float | None = None
    beta_every: int | None = None
    gamma_init: float | None = None
    gamma_double_every: int | None = None
    psi0: float = 0.0
    beta_round: float = 20.0
    round_tracks_beta: bool = False
    crispness: bool = True
    logistic_round: bool = True
    heaviside: bool = True
    budget_on: str = "z_bar"  # or "z": budget on unrounded masks
    seed: int = 0

    def __post_init__(self):
        self.budget_kind = BudgetKind(self.budget_kind).value
        check_target(self.target)
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.budget_on not in ("z_bar", "z"):
            raise ValueError("budget_on must be 'z_bar' or 'z'")
        self.betas = tuple(self.betas)
        if self.psi_init is not None:
            self.psi_init = tuple(float(v) for v in self.psi_init)
            if len(self.psi_init) != 2 or self.psi_init[0] > self.psi_init[1]:
                raise ValueError("psi_init must be a (low, high) pair with low <= high")

    def continuation(self) -> ContinuationState:
        state = ContinuationState.preset(self.schedule)
        overrides = {k: getattr(self, k) for k in ("beta_init", "beta_step", "beta_every", "gamma_init", "gamma_double_every")
                     if getattr(self, k) is not None}
        return dataclasses.replace(state, **overrides)


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-3
    decay_every: int = 30
    decay_factor: float = 0.5
    recalibrate_bn: bool = True
    seed: int = 0

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.decay_factor ** (epoch // self.decay_every)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    loss_ce: float
    loss_c: float
    loss_b: float
    val_acc: float
    budget: float
    kept: int
    beta: float
    gamma: float
    crisp_fraction: float
    fatal: bool = False

    FIELDS = ("epoch", "loss", "loss_ce", "loss_c", "loss_b", "val_acc", "budget", "kept", "beta", "gamma",
              "crisp_fraction", "fatal")

    def row(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}


@dataclass
class TrainRecord:
    epoch: int
    loss: float
    train_acc: float
    val_acc: float
    lr: float

    FIELDS = ("epoch", "loss", "train_acc", "val_acc", "lr")

    def row(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


def sgd_momentum_step(params, grads, state, lr, momentum=0.9, weight_decay=0.0):
    """v <- momentum*v + g + wd*w ; w <- w - lr*v. Returns (params, state) as new lists."""
    velocity = state.get("velocity") if state else None
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    new_p, new_v = [], []
    for w, g, v in zip(params, grads, velocity):
        w64 = w.astype(np.float64)
        v = momentum * v.astype(np.float64) + g.astype(np.float64) + weight_decay * w64
        new_v.append(v.astype(w.dtype))
        new_p.append((w64 - lr * v).astype(w.dtype))
    return new_p, {"velocity": new_v}


def adamw_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, decay_mask=None):
    """Adam with decoupled weight decay, applied only where ``decay_mask`` is true."""
    b1, b2 = betas
    state = state or {}
    t = int(state.get("step", 0)) + 1
    m_prev = state.get("m") or [np.zeros_like(p) for p in params]
    v_prev = state.get("v") or [np.zeros_like(p) for p in params]
    decay_mask = decay_mask if decay_mask is not None else [True] * len(params)
    lrs = lr if isinstance(lr, (list, tuple)) else [lr] * len(params)
    new_p, new_m, new_v = [], [], []
    for w, g, m, v, decay, rate in zip(params, grads, m_prev, v_prev, decay_mask, lrs):
        w64, g64 = w.astype(np.float64), g.astype(np.float64)
        m = b1 * m.astype(np.float64) + (1 - b1) * g64
        v = b2 * v.astype(np.float64) + (1 - b2) * g64 * g64
        if decay and weight_decay:
            w64 = w64 * (1 - rate * weight_decay)
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        w64 = w64 - rate * mhat / (np.sqrt(vhat) + eps)
        new_p.append(w64.astype(w.dtype))
        new_m.append(m.astype(w.dtype))
        new_v.append(v.astype(w.dtype))
    return new_p, {"step": t, "m": new_m, "v": new_v}


class Optimizer:
    """Applies one of the step functions to a named set of Tensors in place."""

    def __init__(self, params: dict[str, Tensor], kind: str, **hyper):
        self.params = params
        self.kind = kind
        self.hyper = hyper
        self.state: dict = {}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr=None) -> None:
        names = list(self.params)
        tensors = [self.params[n] for n in names]
        grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
        hyper = dict(self.hyper)
        if lr is not None:
            hyper["lr"] = lr
        if self.kind == "sgd":
            new, self.state = sgd_momentum_step([t.data for t in tensors], grads, self.state, **hyper)
        else:
            lr_map = hyper.pop("lr_map", {})
            hyper["lr"] = [lr_map.get(n, hyper["lr"]) for n in names]
            no_decay = hyper.pop("no_decay", None)
            hyper["decay_mask"] = None if no_decay is None else [n not in no_decay for n in names]
            new, self.state = adamw_step([t.data for t in tensors], grads, self.state, **hyper)
        for t, arr in zip(tensors, new):
            t.data = arr

    # persistence helpers: state arrays are float32 like the parameters
    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        names = list(self.params)
        for key in ("m", "v", "velocity"):
            for n, arr in zip(names, self.state.get(key) or []):
                out[f"{prefix}.{key}.{n}"] = arr
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str, step: int = 0) -> None:
        names = list(self.params)
        state = {}
        for key in ("m", "v", "velocity"):
            if f"{prefix}.{key}.{names[0]}" in arrays:
                state[key] = [np.array(arrays[f"{prefix}.{key}.{n}"], dtype=np.float32) for n in names]
        if step:
            state["step"] = step
        self.state = state


# ---------------------------------------------------------------------------
# loss and hard pruning
# ---------------------------------------------------------------------------


def chipnet_loss(V, V0, z_tilde, z, logits, labels, alpha1=10.0, alpha2=30.0):
    """Cross-entropy + alpha1 * crispness + alpha2 * budget loss.

    Returns the total as a Tensor and the three components as floats.
    """
    ce = ndgrad.softmax_cross_entropy(logits, labels)
    lc = crispness_loss(z_tilde, z)
    lb = budget_loss(V, V0)
    total = ce
    if alpha1:
        total = ndgrad.add(total, ndgrad.mul(lc, float(alpha1)) if isinstance(lc, Tensor) else float(alpha1) * lc)
    if alpha2:
        total = ndgrad.add(total, ndgrad.mul(lb, float(alpha2)) if isinstance(lb, Tensor) else float(alpha2) * lb)
    parts = {"ce": _scalar(ce), "crisp": _scalar(lc), "budget": _scalar(lb)}
    return total, parts


def _scalar(v) -> float:
    return float(v.data) if isinstance(v, Tensor) else float(v)


def hard_prune(z, budget_kind, target: float, shape: NetworkShape, tiebreak=None) -> HardMask:
    """Binary mask keeping the highest-z channels within the budget.

    Channels are ranked by z (descending), ties by ``tiebreak`` (descending,
    when given) and then by layer and channel index. Passing the mask
    parameters as ``tiebreak`` keeps the ranking informative where z has
    saturated to exactly 0 or 1.
    The channel budget keeps the top floor(V0 * p) channels; the other budgets
    binary-search the longest prefix of that ranking whose budget is <= V0.
    """
    target = check_target(target)
    kind = BudgetKind(budget_kind)
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if z.size != shape.mask_count:
        raise ValueError(f"mask has {z.size} entries but the network has {shape.mask_count} prunable channels")
    if tiebreak is None:
        order = np.argsort(-z, kind="stable")
    else:
        tiebreak = np.asarray(tiebreak, dtype=np.float64).reshape(-1)
        if tiebreak.shape != z.shape:
            raise ValueError("tiebreak must have one entry per mask value")
        order = np.lexsort((np.arange(z.size), -tiebreak, -z))

    def prefix(k):
        bits = np.zeros(z.size, dtype=np.uint8)
        bits[order[:k]] = 1
        return bits

    if kind is BudgetKind.CHANNEL:
        fixed = shape.total_channels - shape.mask_count
        k = int(math.floor(target * shape.total_channels + 1e-9)) - fixed
        k = min(k, z.size)
    else:
        lo, hi = 0, z.size  # invariant: prefix(lo) feasible (or lo == 0)
        if budget(kind, prefix(hi).astype(np.float64), shape) <= target:
            lo = hi
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if budget(kind, prefix(mid).astype(np.float64), shape) <= target:
                lo = mid
            else:
                hi = mid
        k = lo
    if k < 1:
        minimum = budget(kind, prefix(1).astype(np.float64), shape)
        raise InfeasibleBudgetError(
            f"{kind.value} budget {target} is below one-channel granularity; minimum feasible budget is {minimum:.6g}")
    return HardMask(prefix(k), shape.mask_sizes)


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def evaluate(net: MaskedNet, batches, masks=None) -> float:
    correct = total = 0
    for x, y in batches:
        logits = net.forward(x, masks=masks, mode="eval").data
        correct += int((logits.argmax(axis=1) == y).sum())
        total += len(y)
    return correct / max(total, 1)


def recalibrate_bn(net: MaskedNet, batches, masks=None) -> None:
    """Recompute batchnorm running statistics as the average over ``batches``."""
    units = net.conv_units()
    sums = None
    count = 0
    for x, _ in batches:
        for u in units:
            u.stats.mean[...] = 0.0
            u.stats.var[...] = 0.0
        net.forward(x, masks=masks, mode="train", bn_momentum=1.0)
        snap = [(u.stats.mean.astype(np.float64), u.stats.var.astype(np.float64)) for u in units]
        sums = snap if sums is None else [(a + c, b + d) for (a, b), (c, d) in zip(sums, snap)]
        count += 1
    if count:
        for u, (m, v) in zip(units, sums):
            u.stats.mean[...] = m / count
            u.stats.var[...] = v / count


def _snapshot(net: MaskedNet) -> dict[str, np.ndarray]:
    return {k: np.array(v, copy=True) for k, v in net.state_arrays().items()}


def net_checkpoint(net: MaskedNet, stage: str, config: dict | None = None, best: dict | None = None,
                   extra_arrays: dict | None = None, arrays: dict | None = None, **meta) -> Checkpoint:
    arrays = dict(arrays if arrays is not None else _snapshot(net))
    if net.masks is not None and "psi" not in arrays:
        arrays["psi"] = net.masks.psi.data.copy()
    arrays.update(extra_arrays or {})
    return Checkpoint(
        config=config or {},
        shape=net.shape,
        arrays=arrays,
        best=best or {},
        meta=dict(stage=stage, arch=net.arch, **meta),
    )


def net_from_checkpoint(ckpt: Checkpoint) -> MaskedNet:
    """Rebuild the (possibly slim) network stored in ``ckpt``."""
    arch = dict(ckpt.meta["arch"])
    slim = arch.pop("slim", False)
    arch.pop("kept", None)
    net = build_model(**{k: v for k, v in arch.items()})
    if "psi" in ckpt.arrays and net.masks is not None:
        net.masks.psi.data = np.array(ckpt.arrays["psi"], dtype=np.float32)
    if slim:
        mask = HardMask(ckpt.arrays["mask"].astype(np.uint8), net.shape.mask_sizes)
        net = materialize(net, mask)
    net.load_state_arrays(ckpt.arrays)
    return net


def train_plain(net: MaskedNet, data: DataSplit, cfg: TrainConfig, on_epoch: Callable | None = None,
                masks=None) -> tuple[Checkpoint, list[TrainRecord]]:
    """Supervised training with SGD + momentum and step learning-rate decay.

    Returns the best-validation checkpoint (its weights are also loaded back
    into ``net``) and the per-epoch records.
    """
    params = net.parameters()
    opt = Optimizer(params, "sgd", lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    records: list[TrainRecord] = []
    best_acc, best_arrays, best_epoch = -1.0, _snapshot(net), -1
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        losses, correct, seen = [], 0, 0
        for x, y in data.train_batches(epoch):
            opt.zero_grad()
            logits = net.forward(x, masks=masks, mode="train")
            loss = ndgrad.softmax_cross_entropy(logits, y)
            if not math.isfinite(float(loss.data)):
                raise PruningError(f"non-finite training loss at epoch {epoch}")
            ndgrad.backward(loss)
            opt.step(lr)
            losses.append(float(loss.data))
            correct += int((logits.data.argmax(axis=1) == y).sum())
            seen += len(y)
        val_acc = evaluate(net, data.val_batches(), masks)
        rec = TrainRecord(epoch, float(np.mean(losses)), correct / seen, val_acc, lr)
        records.append(rec)
        log.info("train epoch %d loss %.4f val_acc %.4f", epoch, rec.loss, val_acc)
        if on_epoch:
            on_epoch(rec)
        if val_acc >= best_acc:
            best_acc, best_arrays, best_epoch = val_acc, _snapshot(net), epoch
    net.load_state_arrays(best_arrays)
    best = {"epoch": best_epoch, "val_acc": best_acc} if records else {}
    return net_checkpoint(net, "train", dataclasses.asdict(cfg), best), records


@dataclass
class PruneState:
    """Everything needed to continue a soft-pruning run exactly."""

    continuation: ContinuationState
    epoch: int = 0
    records: list = field(default_factory=list)
    best: dict = field(default_factory=dict)
    best_arrays: dict = field(default_factory=dict)


def soft_prune(
    net: MaskedNet,
    data: DataSplit,
    cfg: PruneConfig,
    resume: Checkpoint | None = None,
    on_epoch: Callable | None = None,
    stop_after: int | None = None,
) -> tuple[Checkpoint, list[EpochRecord]]:
    """Jointly train weights and mask parameters under the combined loss.

    After each epoch the continuation advances and the network is evaluated
    hard-pruned on the validation split; the checkpoint of the epoch with the
    best hard-pruned accuracy is returned (ties go to the later epoch, fatal
    epochs never qualify). ``stop_after`` ends the run early after that many
    total epochs and returns a resumable checkpoint instead (``meta.partial``).
    """
    shape = net.shape
    psi = net.masks.psi
    weights = net.parameters()
    params = dict(weights, psi=psi)
    psi_lr = cfg.psi_lr if cfg.psi_lr is not None else cfg.lr
    opt = Optimizer(params, "adamw", lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay,
                    no_decay=("psi",), lr_map={"psi": psi_lr})
    st = PruneState(cfg.continuation())
    if resume is not None:
        st = _restore_prune_state(net, opt, resume)
    elif cfg.psi_init is not None:
        rng = np.random.default_rng([cfg.seed, 7])
        psi.data = rng.uniform(*cfg.psi_init, size=psi.data.size).astype(np.float32)
    config = dataclasses.asdict(cfg)
    alpha1 = cfg.alpha1 if cfg.crispness else 0.0

    while st.epoch < cfg.epochs:
        epoch, cont = st.epoch, st.continuation
        sums = np.zeros(4)
        nb = 0
        for x, y in data.train_batches(epoch):
            opt.zero_grad()
            zt = logistic(psi, cont.beta, cfg.psi0)
            z = heaviside(zt, cont.gamma) if cfg.heaviside else zt
            zb = _budget_input(z, cfg, cont)
            logits = net.forward(x, masks=net.masks.split(z), mode="train")
            V = budget(cfg.budget_kind, zb, shape)
            try:
                loss, parts = chipnet_loss(V, cfg.target, zt, z, logits, y, alpha1, cfg.alpha2)
                ndgrad.backward(loss)
            except NonFiniteError as exc:
                raise PruningError(f"non-finite loss at epoch {epoch}, batch {nb}: {exc}; "
                                   f"beta={cont.beta} gamma={cont.gamma}") from exc
            total = float(loss.data)
            if not math.isfinite(total):
                raise PruningError(f"non-finite loss at epoch {epoch}, batch {nb}: {parts}")
            opt.step()
            sums += (total, parts["ce"], parts["crisp"], parts["budget"])
            nb += 1
        means = sums / max(nb, 1)
        trained = cont
        st.continuation = schedule_step(cont)
        z_now = net.masks.values(trained, cfg.psi0, cfg.heaviside)
        rec_budget, kept, acc, fatal = float("nan"), 0, 0.0, False
        try:
            mask = hard_prune(z_now, cfg.budget_kind, cfg.target, shape, tiebreak=psi.data)
        except InfeasibleBudgetError:
            mask, fatal = None, True
        if mask is not None:
            fatal = bool(validate_connectivity(shape, mask))
            kept = int(mask.bits.sum())
            rec_budget = float(budget(cfg.budget_kind, mask.bits.astype(np.float64), shape))
            if not fatal:
                acc = evaluate(net, data.val_batches(), masks=[b.astype(np.float32) for b in mask.per_layer()])
        crisp = float(np.mean(np.minimum(z_now, 1 - z_now) <= 0.05))
        rec = EpochRecord(epoch, *map(float, means), acc, rec_budget, kept, trained.beta, trained.gamma, crisp, fatal)
        st.records.append(rec)
        log.info("prune epoch %d loss %.4f (ce %.4f c %.4f b %.5f) hard acc %.4f budget %.4f",
                 epoch, *means, acc, rec_budget)
        if on_epoch:
            on_epoch(rec)
        if not fatal and (not st.best or acc >= st.best["val_acc"]):
            st.best = {"epoch": epoch, "val_acc": acc, "budget": rec_budget, "kept": kept}
            st.best_arrays = dict(_snapshot(net), psi=psi.data.copy(), mask=mask.bits.astype(np.float32))
        st.epoch += 1
        if stop_after is not None and st.epoch >= stop_after and st.epoch < cfg.epochs:
            return _partial_checkpoint(net, opt, st, config), list(st.records)

    final_state = _last_trained(st, cfg)
    z_final = net.masks.values(final_state, cfg.psi0, cfg.heaviside)
    final = {"final.psi": psi.data.copy(), "final.z": z_final.astype(np.float32),
             "final.z_bar": np.asarray(_budget_input(z_final, cfg, final_state), dtype=np.float32)}
    if not st.records:
        mask = HardMask.ones(shape.mask_sizes)
        arrays = dict(_snapshot(net), psi=psi.data.copy(), mask=mask.bits.astype(np.float32))
        ckpt = net_checkpoint(net, "prune", config, {}, arrays=arrays)
    elif not st.best:
        raise PruningError("every soft-pruning epoch produced a fatally pruned network; no checkpoint to select")
    else:
        ckpt = net_checkpoint(net, "prune", config, st.best, arrays=st.best_arrays)
    ckpt.arrays.update(final)
    ckpt.continuation = dataclasses.asdict(st.continuation)
    ckpt.meta["records"] = [r.row() for r in st.records]
    ckpt.meta["final_continuation"] = dataclasses.asdict(final_state)
    return ckpt, list(st.records)


def _last_trained(st: PruneState, cfg: PruneConfig) -> ContinuationState:
    """Continuation state the last completed epoch trained under."""
    if st.continuation.epoch == 0:
        return st.continuation
    return dataclasses.replace(st.continuation, epoch=st.continuation.epoch - 1)


def _budget_input(z, cfg: PruneConfig, state: ContinuationState):
    """What the budget function sees: z itself or its logistic rounding."""
    if cfg.budget_on == "z" or not cfg.logistic_round:
        return z
    return logistic_round(z, state.beta if cfg.round_tracks_beta else cfg.beta_round)


def _partial_checkpoint(net, opt, st: PruneState, config) -> Checkpoint:
    arrays = dict(_snapshot(net), psi=net.masks.psi.data.copy())
    arrays.update(opt.state_arrays("opt"))
    arrays.update({f"best.{k}": v for k, v in st.best_arrays.items()})
    ckpt = net_checkpoint(net, "prune", config, st.best, arrays=arrays, partial=True,
                          next_epoch=st.epoch, opt_step=int(opt.state.get("step", 0)),
                          records=[r.row() for r in st.records])
    ckpt.continuation = dataclasses.asdict(st.continuation)
    return ckpt


def _restore_prune_state(net: MaskedNet, opt: Optimizer, ckpt: Checkpoint) -> PruneState:
    if not ckpt.meta.get("partial"):
        raise ValueError("checkpoint is not a resumable mid-prune checkpoint")
    net.load_state_arrays(ckpt.arrays)
    net.masks.psi.data = np.array(ckpt.arrays["psi"], dtype=np.float32)
    opt.load_state_arrays(ckpt.arrays, "opt", ckpt.meta.get("opt_step", 0))
    records = [EpochRecord(**{k: v for k, v in r.items()}) for r in ckpt.meta.get("records", [])]
    best_arrays = {k[len("best."):]: np.array(v) for k, v in ckpt.arrays.items() if k.startswith("best.")}
    return PruneState(ContinuationState(**ckpt.continuation), int(ckpt.meta["next_epoch"]), records,
                      dict(ckpt.best), best_arrays)


def finetune(net: MaskedNet, mask: HardMask, data: DataSplit, cfg: TrainConfig, on_epoch=None):
    """Materialize ``mask`` and train the slim network like pretraining."""
    slim = materialize(net, mask)
    if cfg.recalibrate_bn:
        recalibrate_bn(slim, data.train_batches(0))
    ckpt, records = train_plain(slim, data, cfg, on_epoch=on_epoch)
    ckpt.shape = net.shape
    ckpt.arrays["mask"] = mask.bits.astype(np.float32)
    ckpt.meta["stage"] = "finetune"
    return slim, ckpt, records


def transfer_mask(host: Checkpoint, target: MaskedNet) -> MaskedNet:
    """Install the host's selected hard mask on ``target`` and materialize it."""
    if host.shape is None or "mask" not in host.arrays:
        raise ValueError("host checkpoint carries no selected hard mask")
    diffs = shape_diff(host.shape, target.shape)
    if diffs:
        raise ValueError("host and target architectures differ: " + "; ".join(diffs))
    mask = HardMask(host.arrays["mask"].astype(np.uint8), target.shape.mask_sizes)
    return materialize(target, mask)


def shape_diff(a: NetworkShape, b: NetworkShape) -> list[str]:
    out = []
    if a.input_channels != b.input_channels:
        out.append(f"input channels {a.input_channels} vs {b.input_channels}")
    if len(a.layers) != len(b.layers):
        out.append(f"layer count {len(a.layers)} vs {len(b.layers)}")
    for la, lb in zip(a.layers, b.layers):
        fields = [f for f in ("channels", "feature_area", "kernel_area", "pred", "prunable")
                  if getattr(la, f) != getattr(lb, f)]
        if fields:
            desc = ", ".join(f"{f} {getattr(la, f)} vs {getattr(lb, f)}" for f in fields)
            out.append(f"layer {la.index} ({la.name or lb.name}): {desc}")
    if not out and a.fingerprint() != b.fingerprint():
        out.append("residual wiring differs")
    return out
