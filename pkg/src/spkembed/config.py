"""Run configuration: one INI file with a section per pipeline stage."""

from __future__ import annotations

import configparser
import dataclasses
import io
import os
from dataclasses import dataclass

from . import losses, nn
from .audio import AugmentPolicy
from .features import FrameSpec, frame_count


class ConfigError(ValueError):
    code = "config_error"


@dataclass(frozen=True)
class RunConfig:
    frame: FrameSpec = FrameSpec()
    crop_len: int = 48240
    reverse_prob: float = 0.5
    train_augment: bool = True
    test_augment: bool = True
    layers: tuple = ()
    embedding_dim: int = 128
    dropout: float = 0.0
    init_scheme: str = "he"
    loss: losses.LossConfig = losses.Softmax()
    batch_size: int = 50
    momentum: float = 0.93
    weight_decay: float = 0.0005
    schedule: nn.LrSchedule = nn.LrSchedule(0.05, 0.75, 8, 2800)
    seed: int = 0
    n_crops: int = 50
    val_crops: int = 1

    def __post_init__(self):
        if not self.layers:
            desk = nn.desk_config(self.input_shape, embedding_dim=self.embedding_dim)
            object.__setattr__(self, "layers", desk.layers)
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.batch_size < 1 or self.n_crops < 1 or self.val_crops < 1:
            raise ConfigError("batch_size, n_crops and val_crops must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if any(isinstance(layer, nn.Dropout) for layer in self.layers):
            raise ConfigError("give dropout through the 'dropout' key, not in the layer list")
        try:
            self.encoder_config().validate()
        except ValueError as exc:
            raise ConfigError(f"encoder does not fit the input: {exc}") from exc

    @property
    def input_shape(self) -> tuple:
        return (frame_count(self.crop_len, self.frame), self.frame.n_bins)

    def train_policy(self) -> AugmentPolicy:
        return AugmentPolicy(self.crop_len, self.reverse_prob, self.train_augment)

    def test_policy(self) -> AugmentPolicy:
        return AugmentPolicy(self.crop_len, self.reverse_prob, self.test_augment)

    def encoder_config(self) -> nn.EncoderConfig:
        layers = list(self.layers)
        if self.dropout > 0:
            last_dense = max(i for i, layer in enumerate(layers) if isinstance(layer, nn.Dense))
            layers.insert(last_dense, nn.Dropout(self.dropout))
        return nn.EncoderConfig(tuple(layers), self.embedding_dim, self.input_shape)

    def replace(self, **changes) -> "RunConfig":
        if "embedding_dim" in changes and "layers" not in changes:
            dim = changes["embedding_dim"]
            changes["layers"] = tuple(nn.Dense(dim) if isinstance(l, nn.Dense) and i == len(self.layers) - 1 else l
                                      for i, l in enumerate(self.layers))
        return dataclasses.replace(self, **changes)


def toy_config(**changes) -> RunConfig:
    """Half-second crops and a narrow encoder; trains on the synthetic corpus in seconds."""
    frame = FrameSpec()
    crop_len = frame.crop_samples(48)
    shape = (48, frame.n_bins)
    dim = changes.pop("embedding_dim", 64)
    layers = nn.desk_config(shape, widths=(8, 16, 16, 32), embedding_dim=dim).layers
    base = RunConfig(
        frame=frame, crop_len=crop_len, layers=layers, embedding_dim=dim,
        batch_size=32, schedule=nn.LrSchedule(0.01, 0.75, 5, 150), n_crops=10,
    )
    return dataclasses.replace(base, **changes)


# --------------------------------------------------------------------------- INI round trip


def _loss_section(cfg: losses.LossConfig) -> dict:
    out = {"type": cfg.name}
    for f in dataclasses.fields(cfg):
        out[f.name] = repr(getattr(cfg, f.name))
    return out


def to_ini(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser()
    cp["features"] = {k: str(v) for k, v in dataclasses.asdict(cfg.frame).items()}
    cp["augment"] = {
        "crop_len": str(cfg.crop_len),
        "reverse_prob": repr(cfg.reverse_prob),
        "train_augment": str(cfg.train_augment).lower(),
        "test_augment": str(cfg.test_augment).lower(),
    }
    cp["encoder"] = {
        "layers": nn.format_layers(cfg.layers),
        "embedding_dim": str(cfg.embedding_dim),
        "dropout": repr(cfg.dropout),
        "init_scheme": cfg.init_scheme,
    }
    cp["loss"] = _loss_section(cfg.loss)
    cp["optimizer"] = {
        "batch_size": str(cfg.batch_size),
        "momentum": repr(cfg.momentum),
        "weight_decay": repr(cfg.weight_decay),
    }
    cp["schedule"] = {
        "initial_lr": repr(cfg.schedule.initial_lr),
        "factor": repr(cfg.schedule.factor),
        "n_steps": str(cfg.schedule.n_steps),
        "iters_per_step": str(cfg.schedule.iters_per_step),
    }
    cp["run"] = {"seed": str(cfg.seed), "n_crops": str(cfg.n_crops), "val_crops": str(cfg.val_crops)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def from_ini(text: str) -> RunConfig:
    cp = configparser.ConfigParser()
    cp.read_string(text)
    try:
        frame = FrameSpec(**{k: cp.getint("features", k) for k in ("win_len", "hop", "fft_size", "sample_rate")}) \
            if cp.has_section("features") else FrameSpec()
        loss_cfg = losses.Softmax()
        if cp.has_section("loss"):
            sec = dict(cp["loss"])
            cls = losses.LOSS_TYPES.get(sec.pop("type", "softmax"))
            if cls is None:
                raise ConfigError(f"unknown loss type {cp['loss'].get('type')!r}")
            kwargs = {}
            for f in dataclasses.fields(cls):
                if f.name in sec:
                    kwargs[f.name] = int(sec[f.name]) if f.type in ("int", int) else float(sec[f.name])
            loss_cfg = cls(**kwargs)
        sched = nn.LrSchedule(
            cp.getfloat("schedule", "initial_lr", fallback=0.05),
            cp.getfloat("schedule", "factor", fallback=0.75),
            cp.getint("schedule", "n_steps", fallback=8),
            cp.getint("schedule", "iters_per_step", fallback=2800),
        )
        layers = nn.parse_layers(cp.get("encoder", "layers", fallback=""))
        return RunConfig(
            frame=frame,
            crop_len=cp.getint("augment", "crop_len", fallback=48240),
            reverse_prob=cp.getfloat("augment", "reverse_prob", fallback=0.5),
            train_augment=cp.getboolean("augment", "train_augment", fallback=True),
            test_augment=cp.getboolean("augment", "test_augment", fallback=True),
            layers=layers,
            embedding_dim=cp.getint("encoder", "embedding_dim", fallback=128),
            dropout=cp.getfloat("encoder", "dropout", fallback=0.0),
            init_scheme=cp.get("encoder", "init_scheme", fallback="he"),
            loss=loss_cfg,
            batch_size=cp.getint("optimizer", "batch_size", fallback=50),
            momentum=cp.getfloat("optimizer", "momentum", fallback=0.93),
            weight_decay=cp.getfloat("optimizer", "weight_decay", fallback=0.0005),
            schedule=sched,
            seed=cp.getint("run", "seed", fallback=0),
            n_crops=cp.getint("run", "n_crops", fallback=50),
            val_crops=cp.getint("run", "val_crops", fallback=1),
        )
    except ConfigError:
        raise
    except (configparser.Error, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    with open(os.fspath(path)) as fh:
        return from_ini(fh.read())


def save_config(path, cfg: RunConfig) -> None:
    with open(os.fspath(path), "w") as fh:
        fh.write(to_ini(cfg))
