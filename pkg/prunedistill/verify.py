"""Self-checks of the engine, the losses, pruning and the published counts.

Each check returns one ``CheckResult``; ``run_verification`` collects them
and ``write_results`` stores the table as verify.csv.
"""
import csv
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from prunedistill.architectures import DESK_SHAPE, VGG_CONFIGS, basic_block, named, vgg
from prunedistill.checkpoint import MaskedCheckpoint, from_bytes, to_bytes
from prunedistill.counting import count_macs, count_params
from prunedistill.gradcheck import gradient_check
from prunedistill.layers import ArchitectureSpec, BatchNorm, Conv2d, Dense, Flatten, MaxPool, ReLU
from prunedistill.losses import DistillConfig, kd_loss, lsr_loss
from prunedistill.network import init_params
from prunedistill.pruning import count_pruned, count_total, global_magnitude_mask
from prunedistill.smoothness import smoothness_report
from prunedistill.student import census_from_counts, solve_student_channels
from prunedistill.tensor import precision

log = logging.getLogger(__name__)

CSV_COLUMNS = ("check", "passed", "value", "threshold", "detail")

# VGG19 on CIFAR-100, weights per conv layer then the classifier
VGG19_LAYER_WEIGHTS = [
    1728, 36864, 73728, 147456, 294912, 589824, 589824, 589824,
    1179648, 2359296, 2359296, 2359296, 2359296, 2359296, 2359296, 2359296,
    51200,
]
# the published headline total is 20,070,088; the rows above sum to 20,070,080
VGG19_WEIGHTS = 20_070_080
VGG19_MACS_PUBLISHED = 399e6
# every width doubled, conv-15 included: 1,589,088,256, i.e. 6.3% above the published 1495M
VGG19_DBL_MACS_PUBLISHED = 1495e6
VGG19_DBL_KNOWN_GAP = 0.063
DBL_COUNT_TOLERANCE = 0.065

# surviving weights per layer of the 79%-sparse VGG19
VGG19_PRUNED79_CENSUS = [
    1087, 18102, 50134, 97936, 198189, 381144, 379358, 344924,
    548035, 749074, 461873, 196359, 99450, 84433, 225496, 328861,
    44546,
]
STUDENT79_WEIGHTS = 4_153_613
STUDENT79_CHANNELS = (40, 49, 111, 97, 225, 187, 224, 170, 356, 233, 220, 99, 111, 84, 297, 122)

GRAD_TOLERANCE = 1e-4
KD_LSR_TOLERANCE = 1e-10
KD_LSR_INSTANCES = 1000
COUNT_TOLERANCE = 0.02
SMOOTHNESS_FLOOR = -0.05
SCHEDULE = (2, 4, 7)


@dataclass(frozen=True)
class CheckResult:
    check: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""


def probe_arch(num_classes: int = 5) -> ArchitectureSpec:
    """Tiny net containing every layer kind, including a projected residual block."""
    layers = (
        Conv2d(3, 4, 3, 3, pad=1, has_bias=False),
        BatchNorm(4),
        ReLU(),
        basic_block(4, 6),
        ReLU(),
        MaxPool(2, 2),
        Flatten(),
        Dense(54, 8),
        ReLU(),
        Dense(8, num_classes),
    )
    return ArchitectureSpec((3, 6, 6), num_classes, layers, "probe")


def check_gradients(loss_kind: str, seed: int = 0) -> CheckResult:
    arch = probe_arch()
    rng = np.random.default_rng(seed)
    with precision("f64"):
        params = init_params(arch, seed)
    batch = rng.standard_normal((4, *arch.input_shape))
    labels = rng.integers(0, arch.num_classes, size=4)
    dcfg = DistillConfig(alpha=0.5, tau=4.0) if loss_kind == "kd" else None
    err = gradient_check(arch, params, batch, labels, loss_kind, dcfg=dcfg, seed=seed)
    return CheckResult(f"gradient_{loss_kind}", err <= GRAD_TOLERANCE, err, GRAD_TOLERANCE, "max relative error, f64")


def check_kd_lsr(instances: int = KD_LSR_INSTANCES, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        k = int(rng.integers(2, 11))
        n = int(rng.integers(1, 9))
        student = rng.normal(0.0, 3.0, size=(n, k))
        teacher = rng.normal(0.0, 3.0, size=(n, k))
        labels = rng.integers(0, k, size=n)
        alpha = float(rng.uniform())
        kd = kd_loss(student, teacher, labels, DistillConfig(alpha, 1.0, tau_sq_scaling=False))
        lsr = lsr_loss(student, teacher, labels, alpha)
        worst = max(worst, abs(kd - lsr) / max(abs(lsr), 1e-300))
    return CheckResult("kd_equals_lsr", worst <= KD_LSR_TOLERANCE, worst, KD_LSR_TOLERANCE, f"{instances} instances, tau 1")


def check_pruning_schedule(seed: int = 0, rate: float = 0.2) -> CheckResult:
    arch = vgg(VGG_CONFIGS["mini_vgg"], DESK_SHAPE, 10, name="mini_vgg")
    params = init_params(arch, seed)
    masks = None
    worst = 0.0
    ok = True
    for k in range(1, max(SCHEDULE) + 1):
        target = 1.0 - (1.0 - rate) ** k
        new = global_magnitude_mask(params, target, masks)
        if masks is not None and any((new[n] & ~masks[n]).any() for n in new):
            ok = False
        total = count_total(new)
        worst = max(worst, abs(count_pruned(new) - round(target * total)))
        kept = np.concatenate([np.abs(params[n][new[n]]) for n in new])
        pruned = np.concatenate([np.abs(params[n][~new[n]]) for n in new])
        ok = ok and kept.min() >= pruned.max()
        masks = new
        params = {n: (np.where(new[n], v, 0) if n in new else v) for n, v in params.items()}
    return CheckResult("pruning_schedule", ok and worst <= 1, worst, 1, "weights off 1-(1-r)^k, k <= 7")


def check_vgg19_params() -> CheckResult:
    arch = named("vgg19")
    counts = count_params(arch)
    ok = counts.values() == VGG19_LAYER_WEIGHTS and counts.total == VGG19_WEIGHTS
    return CheckResult("vgg19_params", ok, counts.total, VGG19_WEIGHTS, "per-layer weights match the published rows")


def check_vgg19_macs() -> CheckResult:
    total = count_macs(named("vgg19")).total
    rel = abs(total - VGG19_MACS_PUBLISHED) / VGG19_MACS_PUBLISHED
    return CheckResult("vgg19_macs", rel <= COUNT_TOLERANCE, total, VGG19_MACS_PUBLISHED, f"{rel:.2%} off")


def check_vgg19_dbl_macs() -> CheckResult:
    total = count_macs(named("vgg19_dbl")).total
    rel = abs(total - VGG19_DBL_MACS_PUBLISHED) / VGG19_DBL_MACS_PUBLISHED
    detail = f"{total:,} MACs, {rel:.2%} off the published 1495M (known gap {VGG19_DBL_KNOWN_GAP:.1%})"
    return CheckResult("vgg19_dbl_macs", rel <= DBL_COUNT_TOLERANCE, rel, DBL_COUNT_TOLERANCE, detail)


def check_student_solver() -> CheckResult:
    teacher = named("vgg19")
    plan = solve_student_channels(teacher, census_from_counts(teacher, VGG19_PRUNED79_CENSUS))
    rel = abs(plan.total - STUDENT79_WEIGHTS) / STUDENT79_WEIGHTS
    first = plan.channels[1] == 40 and plan.layer_params["0"] == 1080
    identity = solve_student_channels(teacher, census_from_counts(teacher, VGG19_LAYER_WEIGHTS)).arch.layers == teacher.layers
    ok = first and identity and rel <= COUNT_TOLERANCE
    return CheckResult("student_solver", ok, plan.total, STUDENT79_WEIGHTS, f"{rel:.2%} off; conv-0 {plan.channels[1]} channels")


def check_checkpoint_roundtrip(count: int = 10, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    arch = vgg([4, "M", 8], (3, 8, 8), 5, name="roundtrip")
    same = 0
    for i in range(count):
        ckpt = MaskedCheckpoint.fresh(arch, seed + i)
        ckpt.masks = {n: rng.random(m.shape) < 0.7 for n, m in ckpt.masks.items()}
        ckpt.metrics = {"val_acc": float(rng.random())}
        blob = to_bytes(ckpt)
        same += to_bytes(from_bytes(blob)) == blob
    return CheckResult("checkpoint_roundtrip", same == count, same, count, "save -> load -> save byte-identical")


def check_smoothness(dense: MaskedCheckpoint, pruned: MaskedCheckpoint, data, split: str = "val") -> CheckResult:
    report = smoothness_report(dense, pruned, data, split)
    return CheckResult(
        "smoothness",
        report.mean_log_ratio >= SMOOTHNESS_FLOOR,
        report.mean_log_ratio,
        SMOOTHNESS_FLOOR,
        f"sparsity {pruned.sparsity:.4f} vs {dense.sparsity:.4f}",
    )


def run_verification(pairs=(), data=None, split: str = "val") -> list[CheckResult]:
    checks = [
        lambda: check_gradients("ce"),
        lambda: check_gradients("kd"),
        check_kd_lsr,
        check_pruning_schedule,
        check_vgg19_params,
        check_vgg19_macs,
        check_vgg19_dbl_macs,
        check_student_solver,
        check_checkpoint_roundtrip,
    ]
    checks += [lambda d=d, p=p: check_smoothness(d, p, data, split) for d, p in pairs]
    results = []
    for check in checks:
        start = time.perf_counter()
        result = check()
        log.info(
            "%-22s %s  value %s (threshold %s) in %.2fs",
            result.check,
            "pass" if result.passed else "FAIL",
            result.value,
            result.threshold,
            time.perf_counter() - start,
        )
        results.append(result)
    return results


def write_results(results: list[CheckResult], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(asdict(r) for r in results)
    return path
