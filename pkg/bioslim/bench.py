"""Latency timing and energy measurement (cumulative counter files with a TDP-model fallback)."""

import enum
import re
import threading
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field, model_validator

from bioslim.config import logger, settings
from bioslim.errors import CounterUnavailable
from bioslim.executor import fit_window, run_tiled
from bioslim.graph import Graph
from bioslim.tensor import Tensor

JOULES_PER_KWH = 3.6e6
ENERGY_FILE = "energy_uj"
RANGE_FILE = "max_energy_range_uj"
# nested powercap zones (package:0:core) are already included in their parent
SUBZONE = re.compile(r".+:\d+:\d+$")

# one measured workload per process at a time
_MEASUREMENT_LOCK = threading.Lock()

Workload = Callable[[], Any]


class EnergyBackend(str, enum.Enum):
    COUNTER_FILE = "CounterFile"
    TDP_MODEL = "TdpModel"


class Mode(str, enum.Enum):
    FP32 = "fp32"
    INT8 = "int8"
    PRUNE_INT8 = "prune+int8"
    PRUNE = "prune"


class LatencyStats(BaseModel):
    runs: int = Field(ge=1)
    warmup: int = Field(ge=0)
    mean_s: float
    median_s: float
    p90_s: float
    min_s: float

    @model_validator(mode="after")
    def _ordered(self):
        if not self.min_s <= self.median_s <= self.p90_s:
            raise ValueError("latency stats must satisfy min <= median <= p90")
        return self


class EnergyReading(BaseModel):
    backend: EnergyBackend
    joules: float = Field(ge=0)
    kwh: float = Field(ge=0)
    samples: int = Field(default=0, ge=0)
    seconds: float = Field(default=0.0, ge=0)
    fallback: bool = False

    @classmethod
    def from_joules(cls, backend: EnergyBackend, joules: float, **extra) -> "EnergyReading":
        return cls(backend=backend, joules=joules, kwh=joules / JOULES_PER_KWH, **extra)

    def scaled(self, factor: float) -> "EnergyReading":
        return self.model_copy(update={"joules": self.joules * factor, "kwh": self.kwh * factor})


class EnergyConfig(BaseModel):
    backend: EnergyBackend = EnergyBackend.COUNTER_FILE
    tdp_watts: Optional[float] = Field(default=None, gt=0)
    counter_root: Optional[str] = None
    fallback: bool = True
    sample_period_s: Optional[float] = Field(default=None, gt=0)

    @property
    def root(self) -> str:
        return self.counter_root or settings.counter_root

    @property
    def period(self) -> float:
        return self.sample_period_s or settings.energy_sample_period_s


class BenchRow(BaseModel):
    task: str
    mode: Mode
    hardware: str = "cpu"
    latency: LatencyStats
    energy: EnergyReading
    accuracy: Optional[float] = None
    accuracy_metric: Optional[str] = None
    image_shape: List[int] = Field(default_factory=list)
    model_bytes: Optional[int] = None


def time_run(workload: Workload, runs: int = 10, warmup: int = 1) -> LatencyStats:
    if runs < 1:
        raise ValueError("runs must be at least 1")
    for _ in range(warmup):
        workload()

    durations = []
    for _ in range(runs):
        start = time.perf_counter()
        workload()
        durations.append(time.perf_counter() - start)

    values = np.asarray(durations)
    median = float(np.median(values))
    return LatencyStats(
        runs=runs,
        warmup=warmup,
        mean_s=float(values.mean()),
        median_s=median,
        p90_s=max(median, float(np.percentile(values, 90))),
        min_s=float(values.min()),
    )


def tiled_workload(
    g: Graph, images: Sequence[Tensor], window: Optional[Sequence[int]], overlap: float, max_workers: int = 1
) -> Callable[[], List[Tensor]]:
    """Tiled inference over every image; the input is re-declared once per distinct image extent."""
    fitted: Dict[tuple, tuple] = {}
    for image in images:
        spatial = tuple(image.shape[2:])
        if spatial not in fitted:
            fitted[spatial] = fit_window(g, spatial, window)

    def workload() -> List[Tensor]:
        outputs = []
        for image in images:
            model, effective = fitted[tuple(image.shape[2:])]
            outputs.append(run_tiled(model, image, effective, overlap, max_workers=max_workers))
        return outputs

    return workload


def counter_delta(prev: int, curr: int, max_range: int) -> int:
    if curr >= prev:
        return curr - prev
    return (max_range - prev) + curr


def _read_int(path: Path) -> int:
    return int(path.read_text().strip())


class EnergySampler:
    """Accumulates wraparound-safe deltas over every counter domain under a root directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.domains = self._discover()
        self.ranges = {name: self._read(name, RANGE_FILE) for name in self.domains}
        self.previous: Dict[str, int] = {}
        self.total_uj = 0
        self.samples = 0

    def _discover(self) -> List[str]:
        if not self.root.is_dir():
            raise CounterUnavailable(f"counter root {self.root} does not exist")
        domains = sorted(
            entry.name
            for entry in self.root.iterdir()
            if (entry / ENERGY_FILE).is_file() and not SUBZONE.match(entry.name)
        )
        if not domains:
            raise CounterUnavailable(f"no energy counters under {self.root}")
        return domains

    def _read(self, domain: str, name: str) -> int:
        try:
            return _read_int(self.root / domain / name)
        except (OSError, ValueError) as e:
            raise CounterUnavailable(f"cannot read {self.root / domain / name}: {e}") from e

    def read(self) -> Dict[str, int]:
        return {name: self._read(name, ENERGY_FILE) for name in self.domains}

    def begin(self) -> None:
        self.previous = self.read()
        self.total_uj = 0
        self.samples = 0

    def sample(self) -> None:
        current = self.read()
        for name, value in current.items():
            self.total_uj += counter_delta(self.previous[name], value, self.ranges[name])
        self.previous = current
        self.samples += 1

    @property
    def joules(self) -> float:
        return self.total_uj / 1e6


class _SamplingThread(threading.Thread):
    def __init__(self, sampler: EnergySampler, period: float):
        super().__init__(name="energy-sampler", daemon=True)
        self.sampler = sampler
        self.period = period
        self.stopped = threading.Event()
        self.error: Optional[BaseException] = None

    def run(self):
        try:
            while not self.stopped.wait(self.period):
                self.sampler.sample()
        except CounterUnavailable as e:
            self.error = e

    def stop(self):
        self.stopped.set()
        self.join()


def _tdp_reading(cfg: EnergyConfig, seconds: float, fallback: bool = False) -> EnergyReading:
    if cfg.tdp_watts is None:
        raise CounterUnavailable("the TDP model needs energy.tdp_watts > 0; set it in the run config")
    return EnergyReading.from_joules(
        EnergyBackend.TDP_MODEL, cfg.tdp_watts * seconds, seconds=seconds, fallback=fallback
    )


def _timed(workload: Workload) -> float:
    start = time.perf_counter()
    workload()
    return time.perf_counter() - start


def measure_energy(workload: Workload, cfg: EnergyConfig = EnergyConfig()) -> EnergyReading:
    with _MEASUREMENT_LOCK:
        if cfg.backend is EnergyBackend.TDP_MODEL:
            return _tdp_reading(cfg, _timed(workload))

        try:
            sampler = EnergySampler(cfg.root)
            sampler.begin()
        except CounterUnavailable as e:
            if not cfg.fallback:
                raise
            if cfg.tdp_watts is None:
                raise CounterUnavailable(f"{e}; set energy.tdp_watts to fall back to the TDP model") from e
            logger.warning("⚠️ energy counters unavailable, using TDP model", reason=str(e))
            return _tdp_reading(cfg, _timed(workload), fallback=True)

        thread = _SamplingThread(sampler, cfg.period)
        start = time.perf_counter()
        thread.start()
        try:
            workload()
        finally:
            thread.stop()
        seconds = time.perf_counter() - start
        if thread.error is not None:
            raise thread.error
        sampler.sample()

        logger.debug("energy measured", joules=sampler.joules, samples=sampler.samples, seconds=seconds)
        return EnergyReading.from_joules(
            EnergyBackend.COUNTER_FILE, sampler.joules, samples=sampler.samples, seconds=seconds
        )


def bench_workload(workload: Workload, runs: int, warmup: int, cfg: EnergyConfig):
    """Warm up outside the measurement window, then time and meter the measured runs together."""
    for _ in range(warmup):
        workload()
    captured = []
    energy = measure_energy(lambda: captured.append(time_run(workload, runs=runs, warmup=0)), cfg)
    stats = captured[0].model_copy(update={"warmup": warmup})
    return stats, energy.scaled(1.0 / runs)
