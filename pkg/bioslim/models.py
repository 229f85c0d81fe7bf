"""Run configuration schema, loaded from JSON and validated with pydantic."""

from pathlib import Path
from typing import Annotated, List, Optional

from pydantic import (
    AfterValidator,
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    ValidationInfo,
    field_validator,
    model_validator,
)

from bioslim.bench import EnergyConfig, Mode
from bioslim.datagen import PhantomSpec
from bioslim.errors import ConfigError
from bioslim.metrics import MetricName
from bioslim.pruner import Criterion
from bioslim.quantizer import ObserverKind, ObserverTag
from bioslim.trainer import LossKind, SGDConfig
from bioslim.zoo import ARCHITECTURES


def _existing(value: str, info: ValidationInfo) -> str:
    path = Path(value)
    base = (info.context or {}).get("base")
    if not path.is_absolute() and base is not None:
        path = Path(base) / path
    if not path.exists():
        raise ValueError(f"path does not exist: {value}")
    return str(path.resolve())


ExistingPath = Annotated[str, AfterValidator(_existing)]


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PruneSection(Section):
    criterion: Criterion = Criterion.L1
    sparsity: float = Field(default=0.5, ge=0, lt=1)
    finetune: Optional[SGDConfig] = None
    train_data: Optional[ExistingPath] = None
    loss: LossKind = LossKind.MSE


class QuantSection(Section):
    observer: ObserverTag = ObserverTag.EMA_QUANTILE
    quantile: float = Field(default=0.9999, gt=0, le=1)
    ema_momentum: float = Field(default=0.9, ge=0, lt=1)
    calib_samples: int = Field(default=5, ge=1)
    calib_data: ExistingPath

    def observer_kind(self) -> ObserverKind:
        return ObserverKind(self.observer, self.quantile, self.ema_momentum)


class InferSection(Section):
    data: ExistingPath
    window: Optional[List[int]] = None
    overlap: float = Field(default=0.1, ge=0, lt=1)
    max_workers: int = Field(default=1, ge=1)
    task: str = "task"
    hardware: str = "cpu"


class MetricSection(Section):
    name: MetricName = MetricName.PEARSON
    threshold: float = 0.5


class TrainSection(Section):
    data: ExistingPath
    arch: str = "unet"
    base: int = Field(default=4, ge=1)
    depth: int = Field(default=2, ge=0)
    batchnorm: bool = False
    final_activation: Optional[str] = None
    loss: LossKind = LossKind.MSE
    sgd: SGDConfig = SGDConfig()

    @field_validator("arch")
    @classmethod
    def _known_arch(cls, value: str) -> str:
        if value not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {value!r}; expected one of {', '.join(ARCHITECTURES)}")
        return value


class DatasetSection(Section):
    name: str
    spec: PhantomSpec
    count: int = Field(default=8, ge=1)


class DatagenSection(Section):
    datasets: List[DatasetSection] = Field(min_length=1)


class SweepSection(Section):
    eval_data: ExistingPath
    criteria: List[Criterion] = Field(default_factory=lambda: list(Criterion), min_length=1)
    ratios: List[float] = Field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75], min_length=1)
    finetune: Optional[SGDConfig] = None
    train_data: Optional[ExistingPath] = None
    loss: LossKind = LossKind.MSE
    min_params_reduction: float = Field(default=0.0, ge=0, le=1)


class BenchEntry(Section):
    model: ExistingPath
    mode: Mode


class BenchSection(Section):
    data: ExistingPath
    entries: List[BenchEntry] = Field(min_length=1)
    runs: int = Field(default=5, ge=1)
    warmup: int = Field(default=1, ge=0)
    window: Optional[List[int]] = None
    overlap: float = Field(default=0.1, ge=0, lt=1)
    task: str = "task"
    hardware: str = "cpu"


class RunConfig(Section):
    model: Optional[ExistingPath] = None
    mode: Mode = Mode.FP32
    prune: Optional[PruneSection] = None
    quant: Optional[QuantSection] = None
    infer: Optional[InferSection] = None
    metric: MetricSection = MetricSection()
    energy: EnergyConfig = EnergyConfig()
    train: Optional[TrainSection] = None
    datagen: Optional[DatagenSection] = None
    sweep: Optional[SweepSection] = None
    bench: Optional[BenchSection] = None
    output: Optional[str] = None
    seed: int = 0

    @model_validator(mode="after")
    def _mode_sections(self):
        if self.mode in (Mode.PRUNE, Mode.PRUNE_INT8) and self.prune is None:
            raise ValueError(f"mode {self.mode.value} needs a 'prune' section")
        if self.mode in (Mode.INT8, Mode.PRUNE_INT8) and self.quant is None:
            raise ValueError(f"mode {self.mode.value} needs a 'quant' section")
        return self

    def require(self, *sections: str) -> "RunConfig":
        missing = [name for name in sections if getattr(self, name) is None]
        if missing:
            raise ConfigError([f"{name}: section required for this command" for name in missing])
        return self


def _problems(error: ValidationError) -> List[str]:
    problems = []
    for item in error.errors():
        where = ".".join(str(part) for part in item["loc"]) or "<root>"
        problems.append(f"{where}: {item['msg']}")
    return problems


def parse_config(raw: str, base: Optional[Path] = None) -> RunConfig:
    try:
        return RunConfig.model_validate_json(raw, context={"base": base})
    except ValidationError as e:
        raise ConfigError(_problems(e)) from None


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = path.read_text()
    except OSError as e:
        raise ConfigError([f"<file>: cannot read {path}: {e}"]) from None
    return parse_config(raw, base=path.parent)


def dump_config(cfg: RunConfig) -> str:
    return cfg.model_dump_json(indent=2)
