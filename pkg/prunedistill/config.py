"""Pipeline configuration: one JSON file, one strictly-checked record per section."""
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from prunedistill.architectures import CIFAR_SHAPE, from_builder, load_architecture, named
from prunedistill.data import DataConfig
from prunedistill.errors import ConfigError
from prunedistill.layers import ArchitectureSpec, check_valid_arch, rebuild_widths
from prunedistill.losses import DistillConfig
from prunedistill.pruning import PruneConfig
from prunedistill.trainer import TrainConfig

log = logging.getLogger(__name__)

RESOLVED_NAME = "config.resolved.json"
SEEDS = (0, 1, 2)
TARGETS = (0.79,)


def _strict(cls, d: dict, section: str) -> dict:
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return d


@dataclass(frozen=True)
class StudentConfig:
    # architecture file (or builder dict) used by `distill` when --student is absent
    arch: str | dict | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "StudentConfig":
        return cls(**_strict(cls, d, "student"))


@dataclass(frozen=True)
class ReportConfig:
    seeds: tuple = SEEDS
    targets: tuple = TARGETS
    smoothness_split: str = "val"
    plot: bool = False

    def check_valid(self) -> None:
        if not self.seeds:
            raise ConfigError("report needs at least one seed")
        if any(not 0.0 < t < 1.0 for t in self.targets):
            raise ConfigError(f"report targets must lie in (0, 1), got {list(self.targets)}")
        if self.smoothness_split not in ("train", "val", "test"):
            raise ConfigError(f"unknown split {self.smoothness_split!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "ReportConfig":
        d = dict(_strict(cls, d, "report"))
        for key in ("seeds", "targets"):
            if key in d:
                d[key] = tuple(d[key])
        cfg = cls(**d)
        cfg.check_valid()
        return cfg


_DISTILL_KEYS = {f.name for f in fields(DistillConfig)}


@dataclass(frozen=True)
class PipelineConfig:
    provenance: str = ""
    seed: int = 0
    out: str = "runs"
    arch: str | dict = "mini_vgg"
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)
    # KD weighting plus the distillation run's own schedule
    distill: DistillConfig = field(default_factory=DistillConfig)
    distill_train: TrainConfig = field(default_factory=TrainConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    report: ReportConfig = field(default_factory=ReportConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        sections = {"provenance", "seed", "out", "arch", "data", "train", "prune", "distill", "student", "report"}
        unknown = set(d) - sections
        if unknown:
            raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
        distill = dict(d.get("distill", {}))
        kd = {k: distill.pop(k) for k in list(distill) if k in _DISTILL_KEYS}
        try:
            return cls(
                provenance=str(d.get("provenance", "")),
                seed=int(d.get("seed", 0)),
                out=str(d.get("out", "runs")),
                arch=d.get("arch", "mini_vgg"),
                data=DataConfig.from_dict(d.get("data", {})),
                train=TrainConfig.from_dict(d.get("train", {})),
                prune=PruneConfig.from_dict(d.get("prune", {})),
                distill=DistillConfig.from_dict(kd),
                distill_train=TrainConfig.from_dict(distill),
                student=StudentConfig.from_dict(d.get("student", {})),
                report=ReportConfig.from_dict(d.get("report", {})),
            )
        except (TypeError, ValueError) as err:
            raise ConfigError(f"bad config value: {err}") from None

    def to_dict(self) -> dict:
        distill = self.distill.to_dict()
        distill.update(self.distill_train.to_dict())
        report = asdict(self.report)
        report["seeds"] = list(self.report.seeds)
        report["targets"] = list(self.report.targets)
        return {
            "provenance": self.provenance,
            "seed": self.seed,
            "out": self.out,
            "arch": self.arch,
            "data": self.data.to_dict(),
            "train": self.train.to_dict(),
            "prune": self.prune.to_dict(),
            "distill": distill,
            "student": asdict(self.student),
            "report": report,
        }

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Same config with every run seeded by ``seed``."""
        return replace(
            self,
            seed=seed,
            train=replace(self.train, seed=seed),
            distill_train=replace(self.distill_train, seed=seed),
        )

    def dump(self, out_dir) -> Path:
        path = Path(out_dir) / RESOLVED_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Read a config file (or defaults when ``path`` is None) and apply section overrides."""
    d: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: {err}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be an object")
    for key, value in (overrides or {}).items():
        if isinstance(value, dict):
            d[key] = {**d.get(key, {}), **value}
        else:
            d[key] = value
    cfg = PipelineConfig.from_dict(d)
    log.debug("config %s: %s", path or "<defaults>", cfg.provenance or "no provenance")
    return cfg


def resolve_arch(spec, input_shape: tuple = CIFAR_SHAPE, num_classes: int = 100) -> ArchitectureSpec:
    """Architecture from a built-in name, a file path or an inline dict, fitted to the data."""
    if isinstance(spec, dict):
        if "builder" in spec:
            spec = {"input_shape": list(input_shape), "num_classes": num_classes, **spec}
            arch = from_builder(spec)
        else:
            arch = ArchitectureSpec.from_dict(spec)
    elif isinstance(spec, str) and (spec.endswith(".json") or Path(spec).exists()):
        arch = load_architecture(spec)
    elif isinstance(spec, str):
        arch = named(spec, tuple(input_shape), num_classes)
    else:
        raise ConfigError(f"cannot build an architecture from {spec!r}")
    if tuple(arch.input_shape) != tuple(input_shape):
        raise ConfigError(f"{arch.name} expects inputs {tuple(arch.input_shape)}, the data has {tuple(input_shape)}")
    if arch.num_classes != num_classes:
        # only the classifier width changes
        arch = rebuild_widths(
            ArchitectureSpec(arch.input_shape, num_classes, arch.layers, arch.name),
            lambda _p, layer, _w: getattr(layer, "out_ch", getattr(layer, "out_features", None)),
        )
    check_valid_arch(arch)
    return arch
