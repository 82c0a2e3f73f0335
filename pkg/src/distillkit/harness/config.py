"""Run configuration and result records for the desk-scale harness.

All randomness in a run flows from the single `seed` through named
sub-streams (`stream_seed`), so data order, weight init, bank init, and
negative sampling can be varied independently and collapse identities
(e.g. beta=0 vs. plain training) hold exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import zlib
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..crd import CriticConfig, SamplingPolicy
from ..errors import ConfigError


class Objective(str, Enum):
    VANILLA = "VANILLA"
    KD = "KD"
    AT = "AT"
    FITNET = "FITNET"
    CRD = "CRD"
    CRD_KD = "CRD_KD"
    INFONCE_CRD = "INFONCE_CRD"


CRD_FAMILY = (Objective.CRD, Objective.CRD_KD, Objective.INFONCE_CRD)

# Per-objective default distillation weights; the soft-label objective
# uses alpha/rho instead of beta.
DEFAULT_BETA = {
    Objective.VANILLA: 0.0,
    Objective.KD: 0.0,
    Objective.AT: 1000.0,
    Objective.FITNET: 100.0,
    Objective.CRD: 0.8,
    Objective.CRD_KD: 0.8,
    Objective.INFONCE_CRD: 0.8,
}


class Mode(str, Enum):
    COMPRESSION = "COMPRESSION"
    ENSEMBLE = "ENSEMBLE"
    CROSSMODAL = "CROSSMODAL"


def stream_seed(seed: int, name: str) -> int:
    """Independent integer seed for the named sub-stream of a run seed."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(name.encode()),))
    return int(ss.generate_state(1, dtype=np.uint64)[0] & 0x7FFFFFFFFFFFFFFF)


@dataclass
class OptimizerConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def validate(self):
        if self.lr <= 0:
            raise ConfigError("optimizer.lr", "must be positive")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError("optimizer.momentum", "must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("optimizer.weight_decay", "must be nonnegative")


@dataclass
class ScheduleConfig:
    """Step schedule: lr is lr0 * decay_factor^(number of decay epochs passed)."""

    total_epochs: int = 30
    decay_epochs: Sequence[int] = (15, 23)
    decay_factor: float = 0.1

    def validate(self):
        if self.total_epochs < 0:
            raise ConfigError("schedule.total_epochs", "must be nonnegative")
        de = list(self.decay_epochs)
        if any(b <= a for a, b in zip(de, de[1:])):
            raise ConfigError("schedule.decay_epochs", "must be strictly increasing")
        if any(e >= self.total_epochs for e in de) and self.total_epochs > 0:
            raise ConfigError("schedule.decay_epochs", "must all be < total_epochs")
        if not (0 < self.decay_factor <= 1):
            raise ConfigError("schedule.decay_factor", "must be in (0, 1]")

    def lr_at(self, lr0: float, epoch: int) -> float:
        n = sum(1 for d in self.decay_epochs if d <= epoch)
        return lr0 * self.decay_factor ** n


@dataclass
class ArchSpec:
    """Tiny model descriptor: a small convnet or an MLP.

    Conv nets are Conv3x3-BN-ReLU-MaxPool blocks followed by global
    average pooling and a linear classifier; the penultimate feature is
    the pooled vector (dimension = last width).
    """

    kind: str = "conv"
    widths: Sequence[int] = (6, 12, 24)
    classes: int = 10
    in_channels: int = 3
    image_size: int = 32
    in_dim: int = 32          # only used by kind="mlp"

    def validate(self):
        if self.kind not in ("conv", "mlp"):
            raise ConfigError("arch.kind", f"unknown kind {self.kind!r}")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ConfigError("arch.widths", "must be positive")
        if self.classes < 2:
            raise ConfigError("arch.classes", "must be >= 2")

    @property
    def descriptor(self) -> str:
        return f"{self.kind}{'-'.join(str(w) for w in self.widths)}"


@dataclass
class DatasetSpec:
    """Synthetic dataset descriptor. Generation is deterministic in the
    spec itself (the generator seed is derived from these fields), so all
    runs over the same spec see identical data."""

    name: str = "synthshapes"
    subset_size: int = 5000
    classes: int = 10
    image_size: int = 32
    channels: int = 3
    test_size: int = 2000
    teacher_pool_size: int = 12000
    noise: float = 0.18
    distractor_rate: float = 0.5
    dim: int = 32             # vector datasets (name="blobs")
    separation: float = 3.0   # blobs class separation

    def validate(self):
        if self.name not in ("synthshapes", "blobs"):
            raise ConfigError("dataset.name", f"unknown dataset {self.name!r}")
        if self.subset_size < 2:
            raise ConfigError("dataset.subset_size", "must be >= 2")
        if self.classes < 2:
            raise ConfigError("dataset.classes", "must be >= 2")
        if self.test_size < 1:
            raise ConfigError("dataset.test_size", "must be >= 1")
        if self.teacher_pool_size < self.subset_size:
            raise ConfigError("dataset.teacher_pool_size",
                              "must be >= subset_size (the distill subset is drawn from it)")

    def generation_seed(self) -> int:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return int.from_bytes(hashlib.sha256(blob).digest()[:4], "little")


def _coerce(cls, value):
    if value is None or isinstance(value, cls):
        return value
    if isinstance(value, dict):
        return cls(**value)
    raise ConfigError(cls.__name__.lower(), f"expected mapping or {cls.__name__}")


@dataclass
class DistillRunConfig:
    """One experiment: objective choice, weights, architectures, schedule,
    dataset, and the seed that drives every random sub-stream."""

    name: str = "run"
    mode: Mode = Mode.COMPRESSION
    objective: Objective = Objective.VANILLA
    beta: Optional[float] = None          # None -> per-objective default
    alpha: float = 0.9
    rho: float = 4.0
    critic: Optional[CriticConfig] = None  # None -> desk default (tau=0.1, N=512)
    sampling_policy: str = SamplingPolicy.UNSUPERVISED
    teacher_spec: ArchSpec = field(default_factory=lambda: ArchSpec(widths=(24, 48, 96)))
    student_spec: ArchSpec = field(default_factory=lambda: ArchSpec(widths=(6, 12, 24)))
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    batch_size: int = 64
    seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    embed_dim: int = 128
    teacher_checkpoint: Optional[str] = None
    deterministic: bool = True
    augment: bool = False
    fitnet_squared: bool = False
    n_negatives: int = 512                # desk-scale default for the critic
    tau: float = 0.1
    z0: Optional[float] = None            # explicit partition constant
    auto_z0: bool = True                  # estimate Z0 from the first batch
    n_teachers: int = 1                   # ENSEMBLE mode trains this many

    def __post_init__(self):
        if isinstance(self.mode, str):
            self.mode = Mode(self.mode)
        if isinstance(self.objective, str):
            self.objective = Objective(self.objective)
        self.teacher_spec = _coerce(ArchSpec, self.teacher_spec)
        self.student_spec = _coerce(ArchSpec, self.student_spec)
        self.optimizer = _coerce(OptimizerConfig, self.optimizer)
        self.schedule = _coerce(ScheduleConfig, self.schedule)
        self.dataset = _coerce(DatasetSpec, self.dataset)
        if isinstance(self.critic, dict):
            self.critic = CriticConfig(**self.critic)
        if isinstance(self.schedule.decay_epochs, list):
            self.schedule.decay_epochs = tuple(self.schedule.decay_epochs)
        self.validate()

    def validate(self):
        if self.beta is not None and self.beta < 0:
            raise ConfigError("beta", "must be nonnegative")
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError("alpha", "must be in [0, 1]")
        if not (self.rho > 0):
            raise ConfigError("rho", "must be positive")
        if not (self.tau > 0):
            raise ConfigError("tau", "must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim", "must be >= 1")
        if self.n_negatives < 1:
            raise ConfigError("n_negatives", "must be >= 1")
        if self.n_teachers < 1:
            raise ConfigError("n_teachers", "must be >= 1")
        if self.sampling_policy not in (SamplingPolicy.UNSUPERVISED, SamplingPolicy.SUPERVISED):
            raise ConfigError("sampling_policy", f"unknown policy {self.sampling_policy!r}")
        if self.mode == Mode.CROSSMODAL and self.sampling_policy == SamplingPolicy.SUPERVISED:
            raise ConfigError("sampling_policy",
                              "SUPERVISED needs labels; cross-modal transfer has none")
        self.optimizer.validate()
        self.schedule.validate()
        self.teacher_spec.validate()
        self.student_spec.validate()
        self.dataset.validate()

    @property
    def effective_beta(self) -> float:
        return DEFAULT_BETA[self.objective] if self.beta is None else self.beta

    def make_critic(self) -> CriticConfig:
        if self.critic is not None:
            return self.critic
        return CriticConfig(dataset_size=self.dataset.subset_size,
                            tau=self.tau, n_negatives=self.n_negatives, z0=self.z0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["objective"] = self.objective.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DistillRunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown config field")
        return cls(**d)

    def config_hash(self) -> str:
        """Hash of everything except `seed` and `name`, so seed replicates
        of one configuration group together in reports."""
        d = self.to_dict()
        d.pop("seed", None)
        d.pop("name", None)
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    ce_term: float
    distill_term: float
    weak_bound: float  # nan for objectives without a critic
    lr: float


@dataclass
class RunRecord:
    """Persisted result of one run: per-epoch trace plus final metrics."""

    per_epoch: list
    final: dict
    config_hash: str
    seed: int
    objective: str = ""
    name: str = ""
    teacher: str = ""
    student: str = ""
    tau: float = float("nan")
    config: Optional[dict] = None

    def to_dict(self) -> dict:
        return {
            "per_epoch": [asdict(e) if isinstance(e, EpochStats) else e
                          for e in self.per_epoch],
            "final": self.final,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "objective": self.objective,
            "name": self.name,
            "teacher": self.teacher,
            "student": self.student,
            "tau": self.tau,
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(per_epoch=[EpochStats(**e) for e in d["per_epoch"]],
                   final=d["final"], config_hash=d["config_hash"], seed=d["seed"],
                   objective=d.get("objective", ""), name=d.get("name", ""),
                   teacher=d.get("teacher", ""), student=d.get("student", ""),
                   tau=d.get("tau", float("nan")), config=d.get("config"))

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True,
                                         allow_nan=True))

    @classmethod
    def load_json(cls, path) -> "RunRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "ce_term", "distill_term",
                        "weak_bound", "lr"])
            for e in self.per_epoch:
                s = e if isinstance(e, EpochStats) else EpochStats(**e)
                w.writerow([s.epoch, f"{s.train_loss:.6f}", f"{s.ce_term:.6f}",
                            f"{s.distill_term:.6f}",
                            "" if math.isnan(s.weak_bound) else f"{s.weak_bound:.6f}",
                            f"{s.lr:.6f}"])
