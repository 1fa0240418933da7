"""Cross-entropy, temperature softmax, vanilla KD and its label-smoothing form.

All probability math runs in float64 regardless of the network precision;
``forward`` returns raw logits and this module is the only place that
normalizes them.
"""
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import softmax as _softmax

from prunedistill.errors import ConfigError, EngineError
from prunedistill.tensor import check_finite

ALPHA = 0.95
TAU = 10.0
PROB_FLOOR = 1e-12

REGULARIZERS = ("l0", "l1", "l2")


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = ALPHA
    tau: float = TAU
    tau_sq_scaling: bool = True

    def check_valid(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown distill keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.check_valid()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def soft_scale(self) -> float:
        return self.tau**2 if self.tau_sq_scaling else 1.0


def softmax(logits, tau: float = 1.0) -> np.ndarray:
    """Softmax over the last axis of ``logits / tau`` (max-subtracted)."""
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    z = np.asarray(logits, dtype=np.float64)
    check_finite(z, "logits")
    return _softmax(z / tau, axis=-1)


def cross_entropy(target, pred):
    """H(p, q) = -sum_k p[k] log q[k] along the last axis, q clamped at 1e-12."""
    target = np.asarray(target, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if target.shape != pred.shape:
        raise EngineError(f"cross_entropy length mismatch: {target.shape} vs {pred.shape}")
    h = -(target * np.log(np.maximum(pred, PROB_FLOOR))).sum(axis=-1)
    return float(h) if h.ndim == 0 else h


def label_entropy(probs):
    return cross_entropy(probs, probs)


def smoothed_label(f_true, f_teacher, alpha: float) -> np.ndarray:
    """(1 - alpha) f_true + alpha f_teacher."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    f_true = np.asarray(f_true, dtype=np.float64)
    f_teacher = np.asarray(f_teacher, dtype=np.float64)
    if f_true.shape != f_teacher.shape:
        raise EngineError(f"smoothed_label length mismatch: {f_true.shape} vs {f_teacher.shape}")
    return (1.0 - alpha) * f_true + alpha * f_teacher


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise EngineError(f"labels outside [0, {num_classes})")
    out = np.zeros((labels.shape[0], num_classes), dtype=np.float64)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _check_batch(student_logits, teacher_logits, labels):
    if teacher_logits is not None and np.shape(student_logits) != np.shape(teacher_logits):
        raise EngineError(f"student/teacher logits differ: {np.shape(student_logits)} vs {np.shape(teacher_logits)}")
    if np.ndim(student_logits) != 2 or len(labels) != np.shape(student_logits)[0]:
        raise EngineError(f"expected N x K logits with N labels, got {np.shape(student_logits)} and {len(labels)}")


def ce_loss_and_grad(logits, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy against the labels and its gradient w.r.t. the logits."""
    _check_batch(logits, None, labels)
    n, k = np.shape(logits)
    target = one_hot(labels, k)
    p = softmax(logits, 1.0)
    loss = float(np.mean(cross_entropy(target, p)))
    return loss, (p - target) / n


def kd_terms(student_logits, teacher_logits, labels, cfg: DistillConfig):
    """Per-sample hard and soft terms plus the probabilities they came from."""
    _check_batch(student_logits, teacher_logits, labels)
    target = one_hot(labels, np.shape(student_logits)[1])
    p_student = softmax(student_logits, 1.0)
    soft_teacher = softmax(teacher_logits, cfg.tau)
    soft_student = softmax(student_logits, cfg.tau)
    return cross_entropy(target, p_student), cross_entropy(soft_teacher, soft_student), soft_teacher, soft_student


def kd_loss(student_logits, teacher_logits, labels, cfg: DistillConfig) -> float:
    cfg.check_valid()
    hard, soft, _, _ = kd_terms(student_logits, teacher_logits, labels, cfg)
    return float(np.mean((1.0 - cfg.alpha) * hard + cfg.alpha * cfg.soft_scale * soft))


def kd_loss_and_grad(student_logits, teacher_logits, labels, cfg: DistillConfig) -> tuple[float, np.ndarray]:
    cfg.check_valid()
    hard, soft, soft_teacher, soft_student = kd_terms(student_logits, teacher_logits, labels, cfg)
    loss = float(np.mean((1.0 - cfg.alpha) * hard + cfg.alpha * cfg.soft_scale * soft))
    _, hard_grad = ce_loss_and_grad(student_logits, labels)
    n = hard.shape[0]
    soft_grad = (soft_student - soft_teacher) / (cfg.tau * n)
    # alpha = 0 leaves hard_grad bit-identical: 1.0 * g + 0.0 == g
    return loss, (1.0 - cfg.alpha) * hard_grad + cfg.alpha * cfg.soft_scale * soft_grad


def lsr_loss(student_logits, teacher_logits, labels, alpha: float) -> float:
    """Mean H(f_m, softmax(z_s)) with f_m the teacher-smoothed label, tau = 1."""
    _check_batch(student_logits, teacher_logits, labels)
    target = one_hot(labels, np.shape(student_logits)[1])
    smoothed = smoothed_label(target, softmax(teacher_logits, 1.0), alpha)
    return float(np.mean(cross_entropy(smoothed, softmax(student_logits, 1.0))))


def regularizer_value(params: dict, names, kind: str = "l2") -> float:
    if kind not in REGULARIZERS:
        raise ConfigError(f"unknown regularizer {kind!r}, expected one of {REGULARIZERS}")
    total = 0.0
    for name in names:
        w = np.asarray(params[name], dtype=np.float64)
        if kind == "l0":
            total += float(np.count_nonzero(w))
        elif kind == "l1":
            total += float(np.abs(w).sum())
        else:
            total += 0.5 * float((w * w).sum())
    return total


def regularized_loss(logits, labels, params: dict, names, kind: str = "l2", strength: float = 0.0) -> float:
    """Mean cross-entropy plus ``strength * R(w)`` over the named tensors."""
    ce, _ = ce_loss_and_grad(logits, labels)
    return ce + strength * regularizer_value(params, names, kind)
