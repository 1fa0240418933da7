"""Data-free pruning by iterative synaptic-flow scores.

The scoring pass runs the network linearized: every weight replaced by its
absolute value, biases and BN shifts zeroed, BN reduced to its absolute
scale and ReLU to the identity, on a single all-ones input. With
R = sum(outputs), the score of a weight is |w * dR/dw|.
"""
import logging

import numpy as np
from tqdm import tqdm

from prunedistill.errors import ConfigError, NumericError
from prunedistill.layers import ArchitectureSpec
from prunedistill.network import Network
from prunedistill.pruning import SYNFLOW_ROUNDS, all_ones_masks, count_pruned, count_total, mask_lowest
from prunedistill.tensor import precision

log = logging.getLogger(__name__)


def _linearized(params: dict, masks: dict) -> dict:
    out = {}
    for name, value in params.items():
        if name.endswith((".bias", ".beta", ".running_mean")):
            out[name] = np.zeros(value.shape, dtype=np.float64)
        elif name.endswith(".running_var"):
            out[name] = np.ones(value.shape, dtype=np.float64)
        else:
            out[name] = np.abs(np.asarray(value, dtype=np.float64))
    for name, mask in masks.items():
        out[name] = np.where(mask, out[name], 0.0)
    return out


def _flow(arch: ArchitectureSpec, lin: dict, masks: dict) -> tuple[float, dict]:
    net = Network(arch)
    out = net.forward(lin, np.ones((1, *arch.input_shape)), "synflow")
    grads = net.backward(lin, np.ones_like(out))
    return float(out.sum()), {name: np.abs(lin[name] * grads[name]) for name in masks}


def synflow_scores(arch: ArchitectureSpec, params: dict, masks: dict | None = None) -> dict[str, np.ndarray]:
    """Per-weight scores |w * dR/dw| of the linearized network, in float64."""
    masks = masks if masks is not None else all_ones_masks(params)
    with precision("f64"):
        lin = _linearized(params, masks)
        try:
            total, scores = _flow(arch, lin, masks)
        except NumericError:
            # R is multilinear in the layers: per-tensor rescaling multiplies
            # every score by one common factor, so the ranking is unchanged
            log.warning("synaptic flow overflowed; retrying with every layer scaled by its max")
            for name, value in lin.items():
                peak = np.abs(value).max() if value.size else 0.0
                if peak > 0:
                    lin[name] = value / peak
            try:
                total, scores = _flow(arch, lin, masks)
            except NumericError:
                raise NumericError(f"{arch.name}: synaptic flow R is non-finite even after rescaling") from None
    if not np.isfinite(total):
        raise NumericError(f"{arch.name}: synaptic flow R is non-finite")
    return scores


def synflow_prune(
    arch: ArchitectureSpec,
    params: dict,
    target_sparsity: float,
    rounds: int = SYNFLOW_ROUNDS,
    existing: dict | None = None,
    quiet: bool = False,
) -> dict[str, np.ndarray]:
    """Global masks reaching ``target_sparsity`` over ``rounds`` exponentially spaced steps."""
    if rounds < 1:
        raise ConfigError(f"rounds must be at least 1, got {rounds}")
    masks = {k: m.copy() for k, m in (existing if existing is not None else all_ones_masks(params)).items()}
    current = count_pruned(masks) / max(count_total(masks), 1)
    if not 0.0 <= target_sparsity < 1.0:
        raise ConfigError(f"target sparsity must lie in [0, 1), got {target_sparsity}")
    if target_sparsity < current - 1e-12:
        raise ConfigError(f"target sparsity {target_sparsity} is below the current sparsity {current:.6f}")
    if target_sparsity <= current:
        return masks
    for r in tqdm(range(1, rounds + 1), desc="synflow", disable=True if quiet else None):
        step_target = 1.0 - (1.0 - target_sparsity) ** (r / rounds)
        if step_target <= count_pruned(masks) / count_total(masks):
            continue
        masks = mask_lowest(synflow_scores(arch, params, masks), step_target, masks)
    log.info("synflow: %d rounds, sparsity %.4f", rounds, count_pruned(masks) / count_total(masks))
    return masks
