"""Report figure: accuracy per setting, teacher training curves and pruning curves."""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

SETTINGS = ("teacher", "pruned_teacher", "scratch", "kd_unpruned", "kd_pruned")


def plot_report(summary: list[dict], curves: dict, cfg, path) -> None:
    plt.figure(figsize=(12, 11))  # Width, Height in inches

    plt.subplot(3, 1, 1)
    rows = sorted(summary, key=lambda r: (r["target"], SETTINGS.index(r["setting"])))
    labels = [r["setting"] if r["setting"] == "teacher" else f"{r['setting']}\n{r['target']:.0%}" for r in rows]
    plt.bar(
        range(len(rows)),
        [100 * r["test_acc_mean"] for r in rows],
        yerr=[100 * r["test_acc_std"] for r in rows],
        capsize=4,
    )
    plt.xticks(range(len(rows)), labels, fontsize=8)
    plt.ylabel("Accuracy (%)")
    plt.title("Mean accuracy over seeds")

    plt.subplot(3, 1, 2)
    for seed, seed_curves in curves.items():
        plt.plot(seed_curves["teacher"], label=f"teacher, seed {seed}")
    plt.xlabel("Epoch")
    plt.ylabel("Validation accuracy")
    plt.title("Teacher validation accuracy")
    plt.legend(fontsize=8)

    plt.subplot(3, 1, 3)
    for seed, seed_curves in curves.items():
        for name, accs in seed_curves.items():
            if name.startswith("pruned"):
                plt.plot(range(1, len(accs) + 1), accs, marker="o", label=f"{name}, seed {seed}")
    plt.xlabel("Pruning step")
    plt.ylabel("Validation accuracy")
    plt.title("Pruned teacher after each fine-tune")
    plt.legend(fontsize=8)

    plt.tight_layout(rect=[0, 0, 0.75, 1])  # [left, bottom, right, top]

    params_text = (
        f"Architecture: {cfg.arch if isinstance(cfg.arch, str) else 'custom'}\n"
        f"Seeds: {list(cfg.report.seeds)}\n"
        f"Targets: {list(cfg.report.targets)}\n"
        f"Train epochs: {cfg.train.epochs}\n"
        f"Prune rate: {cfg.prune.rate_per_iteration}\n"
        f"Post epochs: {cfg.prune.post_epochs}\n"
        f"Alpha: {cfg.distill.alpha}\n"
        f"Tau: {cfg.distill.tau}"
    )
    plt.figtext(
        0.78,
        0.5,
        params_text,
        fontsize=10,
        verticalalignment="center",
        bbox=dict(boxstyle="round", facecolor="wheat", alpha=0.5),
    )
    plt.savefig(path, dpi=120)
    plt.close()
