"""Binary keep-masks, global magnitude pruning and the LR-rewinding schedule.

A mask set maps each prunable tensor name (conv kernels and dense matrices)
to a boolean array of the same shape, True meaning the weight is kept.
"""
import logging
from dataclasses import asdict, dataclass

import numpy as np
from tqdm import tqdm

from prunedistill.checkpoint import MaskedCheckpoint
from prunedistill.errors import ConfigError
from prunedistill.trainer import TrainConfig, evaluate, train

log = logging.getLogger(__name__)

RATE = 0.2
POST_EPOCHS = 130
POST_BATCH_SIZE = 128
POST_LR = 0.1
POST_LR_DROPS = (39, 84)
POST_DROP_FACTOR = 0.1
POST_WEIGHT_DECAY = 2e-4
SYNFLOW_ROUNDS = 100

METHODS = ("lr-rewind", "synflow")

# slack when comparing a requested sparsity against the schedule
SCHEDULE_EPS = 1e-12


@dataclass(frozen=True)
class PruneConfig:
    rate_per_iteration: float = RATE
    iterations: int = 0
    post_epochs: int = POST_EPOCHS
    post_batch_size: int = POST_BATCH_SIZE
    post_lr: float = POST_LR
    post_lr_drops: tuple = POST_LR_DROPS
    post_drop_factor: float = POST_DROP_FACTOR
    post_weight_decay: float = POST_WEIGHT_DECAY
    method: str = "lr-rewind"
    synflow_rounds: int = SYNFLOW_ROUNDS

    def check_valid(self) -> None:
        if not 0.0 < self.rate_per_iteration < 1.0:
            raise ConfigError(f"prune rate must lie in (0, 1), got {self.rate_per_iteration}")
        if self.iterations < 0 or self.post_epochs < 0:
            raise ConfigError("prune iterations and post_epochs must be non-negative")
        if self.method not in METHODS:
            raise ConfigError(f"unknown prune method {self.method!r}, expected one of {METHODS}")
        if self.synflow_rounds < 1:
            raise ConfigError(f"synflow_rounds must be at least 1, got {self.synflow_rounds}")
        # the fine-tune schedule is validated by the train config it becomes
        self.post_train_config().check_valid()

    @classmethod
    def from_dict(cls, d: dict) -> "PruneConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown prune keys: {sorted(unknown)}")
        d = dict(d)
        if "post_lr_drops" in d:
            d["post_lr_drops"] = tuple(int(e) for e in d["post_lr_drops"])
        cfg = cls(**d)
        cfg.check_valid()
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["post_lr_drops"] = list(self.post_lr_drops)
        return d

    def post_train_config(self, seed: int = 0) -> TrainConfig:
        """The rewound schedule every pruning iteration fine-tunes with."""
        return TrainConfig(
            epochs=self.post_epochs,
            batch_size=self.post_batch_size,
            lr=self.post_lr,
            lr_drops=tuple(self.post_lr_drops),
            drop_factor=self.post_drop_factor,
            weight_decay=self.post_weight_decay,
            seed=seed,
        )

    def schedule_sparsity(self, k: int) -> float:
        return 1.0 - (1.0 - self.rate_per_iteration) ** k


@dataclass(frozen=True)
class PruneStep:
    iteration: int
    target: float
    sparsity: float
    val_acc: float
    epochs: int


# --- masks -----------------------------------------------------------------


def all_ones_masks(params: dict, names=None) -> dict[str, np.ndarray]:
    names = names if names is not None else [n for n in params if n.endswith(".weight")]
    return {name: np.ones(params[name].shape, dtype=bool) for name in names}


def apply_masks(params: dict, masks: dict) -> dict:
    out = dict(params)
    for name, mask in masks.items():
        if mask.shape != params[name].shape:
            raise ConfigError(f"mask {name} {mask.shape} does not match tensor {params[name].shape}")
        out[name] = np.where(mask, params[name], 0).astype(params[name].dtype, copy=False)
    return out


def count_total(masks: dict) -> int:
    return sum(int(m.size) for m in masks.values())


def count_pruned(masks: dict) -> int:
    return sum(int(m.size - np.count_nonzero(m)) for m in masks.values())


def sparsity(masks: dict) -> float:
    total = count_total(masks)
    return count_pruned(masks) / total if total else 0.0


def iterations_for_target(target: float, rate: float = RATE) -> int:
    """Smallest k with 1 - (1 - rate)^k >= target."""
    if not 0.0 <= target < 1.0:
        raise ConfigError(f"target sparsity must lie in [0, 1), got {target}")
    if not 0.0 < rate < 1.0:
        raise ConfigError(f"prune rate must lie in (0, 1), got {rate}")
    k = 0
    while 1.0 - (1.0 - rate) ** k < target - SCHEDULE_EPS:
        k += 1
    return k


def mask_lowest(scores: dict, target: float, existing: dict) -> dict[str, np.ndarray]:
    """Mask the lowest-scored kept weights, pooled over all tensors, up to ``target``.

    Ties are broken by (tensor order, flat index) ascending. Previously masked
    weights stay masked.
    """
    if not 0.0 <= target < 1.0:
        raise ConfigError(f"target sparsity must lie in [0, 1), got {target}")
    total = count_total(existing)
    already = count_pruned(existing)
    if target + SCHEDULE_EPS < already / max(total, 1):
        raise ConfigError(f"target sparsity {target} is below the current sparsity {already / total:.6f}")
    goal = int(np.floor(target * total + 0.5))
    k = max(0, goal - already)
    masks = {name: m.copy() for name, m in existing.items()}
    if k == 0:
        return masks

    values, layer_ids, flat_ids = [], [], []
    names = list(existing)
    for li, name in enumerate(names):
        flat_mask = existing[name].ravel()
        kept = np.flatnonzero(flat_mask)
        values.append(np.asarray(scores[name], dtype=np.float64).ravel()[kept])
        layer_ids.append(np.full(kept.size, li, dtype=np.int64))
        flat_ids.append(kept)
    values = np.concatenate(values)
    layer_ids = np.concatenate(layer_ids)
    flat_ids = np.concatenate(flat_ids)
    # lexsort: last key is primary
    order = np.lexsort((flat_ids, layer_ids, values))[:k]
    for li, name in enumerate(names):
        hit = flat_ids[order[layer_ids[order] == li]]
        if hit.size:
            masks[name].ravel()[hit] = False
    return masks


def global_magnitude_mask(params: dict, target_sparsity: float, existing: dict | None = None) -> dict[str, np.ndarray]:
    existing = existing if existing is not None else all_ones_masks(params)
    scores = {name: np.abs(params[name]) for name in existing}
    return mask_lowest(scores, target_sparsity, existing)


# --- iterative schedule ----------------------------------------------------


def iterative_prune_lr_rewind(
    ckpt: MaskedCheckpoint,
    cfg: PruneConfig,
    data,
    trainer=train,
    seed: int | None = None,
    quiet: bool = False,
) -> tuple[MaskedCheckpoint, list[PruneStep]]:
    """Prune by ``rate_per_iteration`` per step, fine-tuning with a rewound LR schedule after each step.

    Weights are kept between iterations; only the schedule restarts.
    """
    cfg.check_valid()
    if cfg.iterations == 0:
        return ckpt, []
    seed = ckpt.seed if seed is None else seed
    tcfg = cfg.post_train_config(seed)
    current = ckpt.copy()
    history = []
    for k in tqdm(range(1, cfg.iterations + 1), desc="pruning", disable=True if quiet else None):
        target = max(cfg.schedule_sparsity(k), current.sparsity)
        masks = global_magnitude_mask(current.params, target, current.masks)
        current = MaskedCheckpoint(
            current.arch, apply_masks(current.params, masks), masks, current.seed, current.epoch, dict(current.metrics)
        )
        if tcfg.epochs > 0:
            current, _ = trainer(current.arch, data, tcfg, init=current, quiet=quiet)
        val_acc = evaluate(current, data, "val") if data.size("val") else float("nan")
        step = PruneStep(k, target, current.sparsity, val_acc, tcfg.epochs)
        history.append(step)
        log.info(
            "prune iteration %d/%d: target %.4f, sparsity %.4f, val acc %.4f",
            k,
            cfg.iterations,
            target,
            step.sparsity,
            val_acc,
        )
    current.metrics["sparsity"] = current.sparsity
    return current, history
