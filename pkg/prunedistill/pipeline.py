"""The prune-then-distill steps as file-to-file runs, and the multi-seed report."""
import csv
import json
import logging
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from prunedistill.checkpoint import MaskedCheckpoint, load_checkpoint, save_checkpoint
from prunedistill.config import PipelineConfig, resolve_arch
from prunedistill.data import LabeledDataset, load_dataset
from prunedistill.errors import ConfigError
from prunedistill.pruning import (
    PruneConfig,
    PruneStep,
    SCHEDULE_EPS,
    apply_masks,
    iterations_for_target,
    iterative_prune_lr_rewind,
)
from prunedistill.smoothness import smoothness_report
from prunedistill.student import census, plan_table, solve_student_channels, write_plan_csv
from prunedistill.synflow import synflow_prune
from prunedistill.trainer import agreement, distill, evaluate, train

log = logging.getLogger(__name__)

PRUNE_COLUMNS = ("iteration", "target", "sparsity", "val_acc", "epochs")
RUN_COLUMNS = (
    "seed",
    "target",
    "setting",
    "test_acc",
    "val_acc",
    "agreement",
    "sparsity",
    "weights",
    "mean_log_ratio",
)
SUMMARY_COLUMNS = ("target", "setting", "runs", "test_acc_mean", "test_acc_std", "agreement_mean", "weights")


def _write_rows(rows: list[dict], columns, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    return path


def _write_metrics(metrics: dict, path) -> None:
    Path(path).write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def prepare(cfg: PipelineConfig, seed: int | None = None) -> tuple[LabeledDataset, object]:
    """Dataset (split by the run seed) and the configured architecture fitted to it."""
    seed = cfg.seed if seed is None else seed
    data = load_dataset(cfg.data, split_seed=seed)
    arch = resolve_arch(cfg.arch, data.sample_shape, data.num_classes)
    return data, arch


def prune_checkpoint(
    ckpt: MaskedCheckpoint,
    cfg: PruneConfig,
    data: LabeledDataset,
    target: float | None = None,
    quiet: bool = False,
) -> tuple[MaskedCheckpoint, list[PruneStep]]:
    """Prune with the configured method; ``target`` overrides the iteration count."""
    if target is not None:
        if target < ckpt.sparsity - SCHEDULE_EPS:
            raise ConfigError(f"target sparsity {target} is below the checkpoint's {ckpt.sparsity:.6f}")
        cfg = replace(cfg, iterations=iterations_for_target(target, cfg.rate_per_iteration))
    cfg.check_valid()
    if cfg.method == "lr-rewind":
        return iterative_prune_lr_rewind(ckpt, cfg, data, quiet=quiet)

    goal = max(cfg.schedule_sparsity(cfg.iterations), ckpt.sparsity)
    masks = synflow_prune(ckpt.arch, ckpt.params, goal, cfg.synflow_rounds, ckpt.masks, quiet)
    pruned = MaskedCheckpoint(ckpt.arch, apply_masks(ckpt.params, masks), masks, ckpt.seed, ckpt.epoch, dict(ckpt.metrics))
    tcfg = cfg.post_train_config(ckpt.seed)
    if tcfg.epochs:
        pruned, _ = train(pruned.arch, data, tcfg, init=pruned, quiet=quiet)
    val_acc = evaluate(pruned, data, "val") if data.size("val") else float("nan")
    log.info("synflow pruning: target %.4f, sparsity %.4f, val acc %.4f", goal, pruned.sparsity, val_acc)
    pruned.metrics["sparsity"] = pruned.sparsity
    return pruned, [PruneStep(1, goal, pruned.sparsity, val_acc, tcfg.epochs)]


# --- single steps ----------------------------------------------------------


def run_train(cfg: PipelineConfig, out, quiet: bool = False) -> MaskedCheckpoint:
    out = Path(out)
    cfg.dump(out)
    data, arch = prepare(cfg)
    ckpt, report = train(arch, data, cfg.train, quiet=quiet)
    save_checkpoint(ckpt, out / "teacher.ptdl")
    report.to_csv(out / "train.csv")
    _write_metrics(report.final, out / "metrics.json")
    log.info("teacher %s: %s", arch.name, _fmt(report.final))
    return ckpt


def run_prune(cfg: PipelineConfig, teacher_path, out, target=None, method=None, quiet=False) -> MaskedCheckpoint:
    out = Path(out)
    prune_cfg = cfg.prune if method is None else replace(cfg.prune, method=method)
    cfg = replace(cfg, prune=prune_cfg)
    cfg.dump(out)
    teacher = load_checkpoint(teacher_path)
    data, _ = prepare(cfg)
    pruned, history = prune_checkpoint(teacher, prune_cfg, data, target, quiet)
    save_checkpoint(pruned, out / "pruned.ptdl")
    _write_rows([asdict(step) for step in history], PRUNE_COLUMNS, out / "prune.csv")
    _write_metrics(dict(pruned.metrics), out / "metrics.json")
    return pruned


def run_make_student(ckpt_path, out) -> Path:
    out = Path(out)
    ckpt = load_checkpoint(ckpt_path)
    layer_census = census(ckpt)
    plan = solve_student_channels(ckpt.arch, layer_census)
    out.mkdir(parents=True, exist_ok=True)
    arch_path = out / "student.json"
    plan.arch.save(arch_path)
    write_plan_csv(plan_table(layer_census, plan), out / "plan.csv")
    log.info("student channels %s, %d weights", list(plan.channels), plan.total)
    return arch_path


def run_distill(cfg: PipelineConfig, teacher_path, student_arch, out, quiet: bool = False) -> MaskedCheckpoint:
    out = Path(out)
    cfg.dump(out)
    teacher = load_checkpoint(teacher_path)
    data, _ = prepare(cfg)
    spec = student_arch if student_arch is not None else cfg.student.arch
    if spec is None:
        raise ConfigError("no student architecture: pass --student or set student.arch")
    student_arch = resolve_arch(spec, data.sample_shape, data.num_classes)
    student, report = distill(student_arch, teacher, data, cfg.distill, cfg.distill_train, quiet=quiet)
    save_checkpoint(student, out / "student.ptdl")
    report.to_csv(out / "distill.csv")
    _write_metrics(report.final, out / "metrics.json")
    log.info("student %s: %s", student_arch.name, _fmt(report.final))
    return student


def run_eval(cfg: PipelineConfig, ckpt_path, teacher_path=None) -> dict:
    ckpt = load_checkpoint(ckpt_path)
    data, _ = prepare(cfg)
    result = {"sparsity": ckpt.sparsity}
    for split in ("val", "test"):
        if data.size(split):
            result[f"{split}_acc"] = evaluate(ckpt, data, split)
    if teacher_path is not None:
        teacher = load_checkpoint(teacher_path)
        split = "test" if data.size("test") else "val"
        result["agreement"] = agreement(ckpt, teacher, data, split)
    return result


def _fmt(metrics: dict) -> str:
    return ", ".join(f"{k} {v:.4f}" for k, v in sorted(metrics.items()))


# --- multi-seed report -----------------------------------------------------


def _acc(ckpt: MaskedCheckpoint, data: LabeledDataset) -> float:
    return evaluate(ckpt, data, "test" if data.size("test") else "val")


def run_seed(cfg: PipelineConfig, seed: int, out, quiet: bool = False) -> tuple[list[dict], dict]:
    """Teacher, pruned teachers and the three students for one seed."""
    cfg = cfg.with_seed(seed)
    out = Path(out)
    data, arch = prepare(cfg, seed)
    val_split = "val" if data.size("val") else "train"
    teacher, teacher_report = train(arch, data, cfg.train, quiet=quiet)
    save_checkpoint(teacher, out / "teacher.ptdl")
    teacher_report.to_csv(out / "teacher.csv")
    curves = {"teacher": [row.val_acc for row in teacher_report.history]}

    def row(target, setting, ckpt, agree=None, log_ratio=None):
        return {
            "seed": seed,
            "target": target,
            "setting": setting,
            "test_acc": _acc(ckpt, data),
            "val_acc": evaluate(ckpt, data, val_split),
            "agreement": agree,
            "sparsity": ckpt.sparsity,
            "weights": int(sum(np.count_nonzero(m) for m in ckpt.masks.values())),
            "mean_log_ratio": log_ratio,
        }

    rows = [row(0.0, "teacher", teacher)]
    eval_split = "test" if data.size("test") else "val"
    for target in cfg.report.targets:
        tag = f"s{round(100 * target)}"
        pruned, history = prune_checkpoint(teacher, cfg.prune, data, target, quiet)
        save_checkpoint(pruned, out / f"pruned_{tag}.ptdl")
        _write_rows([asdict(step) for step in history], PRUNE_COLUMNS, out / f"prune_{tag}.csv")
        curves[f"pruned {tag}"] = [step.val_acc for step in history]
        smooth = smoothness_report(teacher, pruned, data, cfg.report.smoothness_split)
        smooth.to_csv(out / f"smoothness_{tag}.csv")
        rows.append(row(target, "pruned_teacher", pruned, log_ratio=smooth.mean_log_ratio))

        plan = solve_student_channels(arch, census(pruned), name=f"{arch.name}_st{round(100 * target)}")
        plan.arch.save(out / f"student_{tag}.json")
        scratch, _ = train(plan.arch, data, cfg.distill_train, quiet=quiet)
        rows.append(row(target, "scratch", scratch, agreement(scratch, pruned, data, eval_split)))
        for setting, source in (("kd_unpruned", teacher), ("kd_pruned", pruned)):
            student, _ = distill(plan.arch, source, data, cfg.distill, cfg.distill_train, quiet=quiet)
            save_checkpoint(student, out / f"{setting}_{tag}.ptdl")
            rows.append(row(target, setting, student, agreement(student, source, data, eval_split)))
    _write_rows(rows, RUN_COLUMNS, out / "runs.csv")
    return rows, curves


def summarize(rows: list[dict]) -> list[dict]:
    """Mean and standard deviation over seeds per (target, setting)."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["target"], r["setting"]), []).append(r)
    summary = []
    for (target, setting), group in groups.items():
        acc = np.array([r["test_acc"] for r in group])
        agree = [r["agreement"] for r in group if r["agreement"] is not None]
        summary.append(
            {
                "target": target,
                "setting": setting,
                "runs": len(group),
                "test_acc_mean": float(acc.mean()),
                "test_acc_std": float(acc.std()),
                "agreement_mean": float(np.mean(agree)) if agree else None,
                "weights": group[0]["weights"],
            }
        )
    return summary


def run_report(cfg: PipelineConfig, out, seeds=None, plot: bool | None = None, quiet: bool = False) -> list[dict]:
    out = Path(out)
    seeds = tuple(seeds) if seeds is not None else tuple(cfg.report.seeds)
    cfg = replace(cfg, report=replace(cfg.report, seeds=seeds))
    cfg.dump(out)
    rows, curves = [], {}
    for seed in seeds:
        log.info("report: seed %d", seed)
        seed_rows, seed_curves = run_seed(cfg, seed, out / f"seed{seed}", quiet)
        rows += seed_rows
        curves[seed] = seed_curves
    summary = summarize(rows)
    _write_rows(rows, RUN_COLUMNS, out / "runs.csv")
    _write_rows(summary, SUMMARY_COLUMNS, out / "summary.csv")
    if cfg.report.plot if plot is None else plot:
        from prunedistill.plotting import plot_report

        plot_report(summary, curves, cfg, out / "report.png")
    return summary

