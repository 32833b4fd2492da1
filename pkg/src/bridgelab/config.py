"""Project configuration: one INI-style text file drives every subcommand.

The data root may be overridden by the BRIDGELAB_DATA_ROOT environment
variable. Referenced paths must exist at load time (the gen-data command
creates the data root first).
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path

from .scorenet import ScoreNetConfig
from .training import TrainConfig

DEFAULT_SCALES = (1.0, 2.0, 4.0, 5.0, 8.0, 10.0)

DEFAULT_CONFIG_TEXT = """\
[schedule]
n_steps = 1000
beta_min = 1e-4
beta_max = 0.3

[network]
widths = 16,32
time_freqs = 16
time_hidden = 64
reward_dim = 16
reward_hidden = 32
drop_z0 = false

[train]
epochs = 63
batch_size = 8
learning_rate = 1.5e-3
lr_final = 1e-4
adam_beta1 = 0.9
adam_beta2 = 0.999
adam_eps = 1e-8
p_uncond = 0.1
t_min_index = 50
loss_kind = naive
checkpoint_every = 7
seed = 0

[sampler]
nfe = 10
scales = 1.0,2.0,4.0,5.0,8.0,10.0
deterministic = true

[dataset]
n_subjects = 20
slices_per_subject = 16
size = 64
seed = 7
train_fraction = 0.85

[service]
host = 127.0.0.1
port = 8765

[paths]
data_root = ./data
"""


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class SamplerDefaults:
    nfe: int = 10
    scales: tuple[float, ...] = DEFAULT_SCALES
    deterministic: bool = True


@dataclass(frozen=True)
class DatasetDefaults:
    n_subjects: int = 20
    slices_per_subject: int = 16
    size: int = 64
    seed: int = 7
    train_fraction: float = 0.85


@dataclass(frozen=True)
class ScheduleDefaults:
    n_steps: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.3


@dataclass
class ProjectConfig:
    schedule: ScheduleDefaults = field(default_factory=ScheduleDefaults)
    network: ScoreNetConfig = field(default_factory=ScoreNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerDefaults = field(default_factory=SamplerDefaults)
    dataset: DatasetDefaults = field(default_factory=DatasetDefaults)
    host: str = "127.0.0.1"
    port: int = 8765
    data_root: Path = Path("./data")

    def snapshot(self) -> dict:
        out = {
            "schedule": asdict(self.schedule),
            "network": asdict(self.network),
            "train": asdict(self.train),
            "sampler": asdict(self.sampler),
            "dataset": asdict(self.dataset),
            "service": {"host": self.host, "port": self.port},
            "paths": {"data_root": str(self.data_root)},
        }
        return out


def _floats(text: str) -> tuple[float, ...]:
    vals = tuple(float(v) for v in text.replace(" ", "").split(",") if v)
    if not vals:
        raise ConfigError("empty list value")
    return vals


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def load_config(path: str | Path, create_data_root: bool = False) -> ProjectConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    try:
        cp.read(path)
        sched = ScheduleDefaults(
            n_steps=cp.getint("schedule", "n_steps", fallback=1000),
            beta_min=cp.getfloat("schedule", "beta_min", fallback=1e-4),
            beta_max=cp.getfloat("schedule", "beta_max", fallback=0.3),
        )
        net = ScoreNetConfig(
            widths=_ints(cp.get("network", "widths", fallback="16,32")),
            time_freqs=cp.getint("network", "time_freqs", fallback=16),
            time_hidden=cp.getint("network", "time_hidden", fallback=64),
            reward_dim=cp.getint("network", "reward_dim", fallback=16),
            reward_hidden=cp.getint("network", "reward_hidden", fallback=32),
            n_steps=sched.n_steps,
            drop_z0=cp.getboolean("network", "drop_z0", fallback=False),
        )
        train = TrainConfig(
            epochs=cp.getint("train", "epochs", fallback=63),
            batch_size=cp.getint("train", "batch_size", fallback=8),
            learning_rate=cp.getfloat("train", "learning_rate", fallback=1.5e-3),
            lr_final=cp.getfloat("train", "lr_final", fallback=1e-4),
            adam_beta1=cp.getfloat("train", "adam_beta1", fallback=0.9),
            adam_beta2=cp.getfloat("train", "adam_beta2", fallback=0.999),
            adam_eps=cp.getfloat("train", "adam_eps", fallback=1e-8),
            p_uncond=cp.getfloat("train", "p_uncond", fallback=0.1),
            t_min_index=cp.getint("train", "t_min_index", fallback=50),
            loss_kind=cp.get("train", "loss_kind", fallback="naive"),
            checkpoint_every=cp.getint("train", "checkpoint_every", fallback=7),
            seed=cp.getint("train", "seed", fallback=0),
        )
        sampler = SamplerDefaults(
            nfe=cp.getint("sampler", "nfe", fallback=10),
            scales=_floats(cp.get("sampler", "scales", fallback="1,2,4,5,8,10")),
            deterministic=cp.getboolean("sampler", "deterministic", fallback=True),
        )
        dataset = DatasetDefaults(
            n_subjects=cp.getint("dataset", "n_subjects", fallback=20),
            slices_per_subject=cp.getint("dataset", "slices_per_subject", fallback=16),
            size=cp.getint("dataset", "size", fallback=64),
            seed=cp.getint("dataset", "seed", fallback=7),
            train_fraction=cp.getfloat("dataset", "train_fraction", fallback=0.85),
        )
        host = cp.get("service", "host", fallback="127.0.0.1")
        port = cp.getint("service", "port", fallback=8765)
        data_root = Path(cp.get("paths", "data_root", fallback="./data"))
    except (configparser.Error, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    env_root = os.environ.get("BRIDGELAB_DATA_ROOT")
    if env_root:
        data_root = Path(env_root)
    if not data_root.is_absolute():
        data_root = (path.parent / data_root).resolve()
    if create_data_root:
        data_root.mkdir(parents=True, exist_ok=True)
    if not data_root.exists():
        raise ConfigError(f"data root does not exist: {data_root} (run gen-data first)")

    if not sampler.scales:
        raise ConfigError("sampler scales must be nonempty")
    train.validate()
    net.validate()

    return ProjectConfig(
        schedule=sched, network=net, train=train, sampler=sampler,
        dataset=dataset, host=host, port=port, data_root=data_root,
    )


def write_default_config(path: str | Path) -> None:
    Path(path).write_text(DEFAULT_CONFIG_TEXT)
