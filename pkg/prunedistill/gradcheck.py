"""Central finite-difference check of the analytic gradients."""
import logging

import numpy as np

from prunedistill.errors import ConfigError
from prunedistill.layers import ArchitectureSpec, is_trainable
from prunedistill.losses import DistillConfig, ce_loss_and_grad, kd_loss_and_grad
from prunedistill.network import Network
from prunedistill.tensor import check_finite, precision

log = logging.getLogger(__name__)

LOSS_KINDS = ("ce", "kd")
STEP = 1e-5
SAMPLES = 200
ERROR_FLOOR = 1e-8


def sample_counts(sizes: dict, samples: int) -> dict:
    """Split ``samples`` evenly over tensors of the given sizes.

    A tensor smaller than its share is taken whole and the rest of its share
    goes to the larger tensors, so the counts sum to ``min(samples, total size)``.
    """
    counts = dict.fromkeys(sizes, 0)
    budget = min(samples, sum(sizes.values()))
    open_names = [n for n in sizes if sizes[n] > 0]
    while budget > 0:
        share = -(-budget // len(open_names))
        for name in list(open_names):
            take = min(share, sizes[name] - counts[name], budget)
            counts[name] += take
            budget -= take
            if counts[name] == sizes[name]:
                open_names.remove(name)
    return counts


def gradient_check(
    arch: ArchitectureSpec,
    params: dict,
    batch: np.ndarray,
    labels: np.ndarray,
    loss_kind: str = "ce",
    step: float = STEP,
    teacher_logits: np.ndarray | None = None,
    dcfg: DistillConfig | None = None,
    samples: int = SAMPLES,
    seed: int = 0,
    mode: str = "train",
) -> float:
    """Max of |analytic - numeric| / max(|analytic|, |numeric|, ERROR_FLOOR) over sampled coordinates.

    ``samples`` coordinates are drawn (all of them if the network is smaller),
    spread over every trainable tensor by ``sample_counts``. Runs in float64.
    """
    if loss_kind not in LOSS_KINDS:
        raise ConfigError(f"unknown loss kind {loss_kind!r}, expected one of {LOSS_KINDS}")
    if step <= 0:
        raise ConfigError(f"finite-difference step must be positive, got {step}")
    rng = np.random.default_rng(seed)
    with precision("f64"):
        params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        batch = np.asarray(batch, dtype=np.float64)
        labels = np.asarray(labels)
        net = Network(arch)
        if loss_kind == "kd":
            dcfg = dcfg or DistillConfig()
            if teacher_logits is None:
                teacher_logits = rng.standard_normal((len(labels), arch.num_classes))

        def loss_and_grad(p):
            logits = net.forward(p, batch, mode)
            if loss_kind == "ce":
                return ce_loss_and_grad(logits, labels)
            return kd_loss_and_grad(logits, teacher_logits, labels, dcfg)

        _, dlogits = loss_and_grad(params)
        analytic = net.backward(params, dlogits)

        names = [n for n in params if is_trainable(n)]
        counts = sample_counts({n: params[n].size for n in names}, samples)
        worst = 0.0
        for name in names:
            flat = params[name].ravel()
            picks = rng.choice(flat.size, size=counts[name], replace=False)
            for i in picks:
                original = flat[i]
                flat[i] = original + step
                up, _ = loss_and_grad(params)
                flat[i] = original - step
                down, _ = loss_and_grad(params)
                flat[i] = original
                numeric = (up - down) / (2 * step)
                check_finite(np.array(numeric), f"finite difference of {name}")
                a = float(analytic[name].ravel()[i])
                err = abs(a - numeric) / max(abs(a), abs(numeric), ERROR_FLOOR)
                if err > worst:
                    log.debug("%s[%d]: analytic %.6e, numeric %.6e, error %.2e", name, i, a, numeric, err)
                    worst = err
    return worst
