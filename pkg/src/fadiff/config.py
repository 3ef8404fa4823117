"""Run configuration: YAML sections mapped onto dataclasses, unknown keys rejected."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from .data import DEFAULT_CLASSES, EMPTY_CLASS_NAMES, DatasetSpec
from .expert import ExpertConfig, ExpertTrainConfig
from .ssim import SSIMParams
from .trainer import TrainConfig, TrainingError
from .unet import UNetConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    num_classes: int = 8
    samples_per_class: int = 200
    image_size: int = 32
    jitter: float = 1.0
    max_noise: float = 0.08
    classes: List[str] = field(default_factory=lambda: list(DEFAULT_CLASSES))


@dataclass
class ExpertSection:
    conv_channels: List[int] = field(default_factory=lambda: [16, 32, 64])
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 10
    weight_decay: float = 0.0


@dataclass
class DiffusionSection:
    base_channels: int = 32
    channel_multipliers: List[int] = field(default_factory=lambda: [1, 2, 4])
    time_embed_dim: int = 128
    num_res_blocks: int = 2
    norm_groups: int = 8
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 1e-4
    mode: str = "baseline"
    adam_betas: List[float] = field(default_factory=lambda: [0.9, 0.999])
    adam_eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class LossSection:
    w1: float = 1.0
    w2: float = 1.0


@dataclass
class AlignSection:
    target: str = "noisy"


@dataclass
class SampleSection:
    count: int = 10
    num_steps: Optional[int] = None
    batch_size: int = 128


@dataclass
class EvalSection:
    seeds: List[int] = field(default_factory=lambda: list(range(15)))
    exclude_classes: List[str] = field(default_factory=lambda: list(EMPTY_CLASS_NAMES))
    sample_per_class: int = 10
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_k1: float = 0.01
    ssim_k2: float = 0.03
    ssim_data_range: float = 1.0


@dataclass
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    expert: ExpertSection = field(default_factory=ExpertSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    loss: LossSection = field(default_factory=LossSection)
    align: AlignSection = field(default_factory=AlignSection)
    sample: SampleSection = field(default_factory=SampleSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- conversion to module-level configs ---------------------------------

    def dataset_spec(self) -> DatasetSpec:
        d = self.data
        return DatasetSpec(num_classes=d.num_classes, samples_per_class=d.samples_per_class,
                           image_size=d.image_size, seed=self.seed, jitter=d.jitter,
                           max_noise=d.max_noise, classes=tuple(d.classes))

    def expert_config(self, num_classes: int, image_size: int) -> ExpertConfig:
        return ExpertConfig(conv_channels=tuple(self.expert.conv_channels),
                            num_classes=num_classes, image_size=image_size)

    def expert_train_config(self) -> ExpertTrainConfig:
        e = self.expert
        return ExpertTrainConfig(learning_rate=e.learning_rate, batch_size=e.batch_size,
                                 epochs=e.epochs, weight_decay=e.weight_decay)

    def unet_config(self, num_classes: int, image_size: int) -> UNetConfig:
        d = self.diffusion
        return UNetConfig(image_size=image_size, base_channels=d.base_channels,
                          channel_multipliers=tuple(d.channel_multipliers),
                          num_classes=num_classes, time_embed_dim=d.time_embed_dim,
                          num_res_blocks=d.num_res_blocks, norm_groups=d.norm_groups)

    def train_config(self, mode: Optional[str] = None) -> TrainConfig:
        d = self.diffusion
        return TrainConfig(epochs=d.epochs, batch_size=d.batch_size,
                           learning_rate=d.learning_rate, T=d.T, beta_start=d.beta_start,
                           beta_end=d.beta_end, mode=mode or d.mode,
                           align_target=self.align.target, w1=self.loss.w1, w2=self.loss.w2,
                           master_seed=self.seed, adam_betas=tuple(d.adam_betas),
                           adam_eps=d.adam_eps, weight_decay=d.weight_decay)

    def ssim_params(self) -> SSIMParams:
        e = self.eval
        return SSIMParams(window=e.ssim_window, sigma=e.ssim_sigma, k1=e.ssim_k1,
                          k2=e.ssim_k2, data_range=e.ssim_data_range)

    # -- (de)serialisation ----------------------------------------------------

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=None)

    def validate(self) -> "RunConfig":
        """Build every derived config once so bad values fail early."""
        try:
            spec = self.dataset_spec()
            spec.validate()
            self.expert_config(spec.num_classes, spec.image_size)
            self.unet_config(spec.num_classes, spec.image_size)
            self.train_config()
            if self.sample.count < 1:
                raise ConfigError("sample.count must be >= 1")
            if self.sample.num_steps is not None and not 1 <= self.sample.num_steps <= self.diffusion.T:
                raise ConfigError(f"sample.num_steps must be in [1, {self.diffusion.T}]")
            if not self.eval.seeds:
                raise ConfigError("eval.seeds must be non-empty")
        except ConfigError:
            raise
        except (ValueError, TypeError, TrainingError) as exc:
            raise ConfigError(str(exc)) from exc
        return self


def _build(cls, raw: Any, where: str):
    if not dataclasses.is_dataclass(cls):
        return raw
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in raw.items():
        sub = fields[name].type
        sub_cls = globals().get(sub) if isinstance(sub, str) else sub
        if dataclasses.is_dataclass(sub_cls):
            kwargs[name] = _build(sub_cls, value, f"{where}.{name}" if where else name)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(raw: Dict[str, Any]) -> RunConfig:
    return _build(RunConfig, raw, "")


def parse(text: str) -> RunConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc
    return from_dict(raw or {})


def load(path: Optional[Path]) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse(path.read_text())
