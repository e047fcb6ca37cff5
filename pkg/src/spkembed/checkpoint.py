"""Checkpoint files.

Layout::

    SPKEMBED-CKPT\\n
    <header byte length>\\n
    <JSON header: format version, run config (INI text), iteration, seed,
     speaker list, training log, losses of the unfinished LR step,
     tensor table of (name, shape)>
    <each tensor in table order as little-endian float32, row-major>
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .config import RunConfig, from_ini, to_ini

MAGIC = b"SPKEMBED-CKPT\n"
FORMAT_VERSION = 1


class ConfigMismatchError(ValueError):
    code = "config_mismatch"


@dataclass
class Checkpoint:
    config: RunConfig
    iteration: int
    params: dict
    head: dict
    velocity: dict = field(default_factory=dict)
    speakers: list = field(default_factory=list)
    history: list = field(default_factory=list)
    warm_start: str | None = None
    # per-iteration losses of the LR step in progress, so a resumed run logs the same means
    step_losses: list = field(default_factory=list)

    def tensors(self) -> dict:
        out = {f"enc/{k}": v for k, v in self.params.items()}
        out.update({f"head/{k}": v for k, v in self.head.items()})
        out.update({f"vel/{k}": v for k, v in self.velocity.items()})
        return out


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    tensors = ckpt.tensors()
    header = {
        "format_version": FORMAT_VERSION,
        "config": to_ini(ckpt.config),
        "loss": ckpt.config.loss.name,
        "iteration": ckpt.iteration,
        "seed": ckpt.config.seed,
        "speakers": list(ckpt.speakers),
        "history": ckpt.history,
        "warm_start": ckpt.warm_start,
        "step_losses": list(ckpt.step_losses),
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()],
    }
    blob = json.dumps(header, sort_keys=True, indent=1).encode()
    with open(os.fspath(path), "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"{len(blob)}\n".encode())
        fh.write(blob)
        for v in tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_checkpoint(path, expect: RunConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``expect`` the encoder and loss must match it."""
    with open(os.fspath(path), "rb") as fh:
        if fh.readline() != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        size = int(fh.readline())
        header = json.loads(fh.read(size))
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
        groups: dict = {"enc": {}, "head": {}, "vel": {}}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(4 * count)
            if len(raw) != 4 * count:
                raise ValueError(f"{path}: truncated tensor {entry['name']}")
            group, name = entry["name"].split("/", 1)
            groups[group][name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    config = from_ini(header["config"])
    expected_shapes = nn.param_shapes(config.encoder_config())
    actual_shapes = {k: v.shape for k, v in groups["enc"].items()}
    if actual_shapes != expected_shapes:
        raise ConfigMismatchError(f"{path}: parameter tensors do not match the stored encoder config")
    if expect is not None:
        check_compatible(config, expect, what=os.fspath(path))
    return Checkpoint(
        config=config,
        iteration=header["iteration"],
        params=groups["enc"],
        head=groups["head"],
        velocity=groups["vel"],
        speakers=header["speakers"],
        history=header["history"],
        warm_start=header.get("warm_start"),
        step_losses=header.get("step_losses", []),
    )


def check_compatible(have: RunConfig, want: RunConfig, what: str = "checkpoint", same_loss: bool = True) -> None:
    if nn.param_shapes(have.encoder_config()) != nn.param_shapes(want.encoder_config()):
        raise ConfigMismatchError(
            f"{what}: encoder ({have.embedding_dim}-dim) does not match the configured encoder ({want.embedding_dim}-dim)"
        )
    if have.input_shape != want.input_shape:
        raise ConfigMismatchError(f"{what}: input shape {have.input_shape} != {want.input_shape}")
    if same_loss and have.loss != want.loss:
        raise ConfigMismatchError(f"{what}: loss {have.loss} != {want.loss}")
