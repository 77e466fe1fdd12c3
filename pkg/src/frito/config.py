"""Flat run configuration: one key namespace covering model, task and training.

Unknown keys are rejected. Keys written by manifests (``subcommand``,
``tool_version``, ``artifact.*``) are ignored so a manifest can be fed back
in as a config.
"""

from __future__ import annotations

from .model import EncoderConfig
from .trainer import SynthTaskSpec, TrainConfig

DEFAULTS: dict[str, str] = {
    # model
    "h": "8", "w": "8", "patch_f": "4", "patch_t": "4", "k": "1", "d": "32",
    "r": "2", "v": "1", "depth": "2", "heads": "2", "mlp_ratio": "4", "model_seed": "0",
    "classes": "4",
    # task
    "mels": "32", "frames": "32", "train_domain": "0",
    "domain_tilts": "0.0,1.5,-1.5", "domain_distortions": "0.0,0.6,0.6",
    "bands_per_class": "2", "band_width": "3", "band_amplitude": "1.0", "noise": "0.2", "task_seed": "0",
    # training
    "steps": "300", "batch_size": "16", "lr": "0.001", "beta1": "0.9", "beta2": "0.999", "eps": "1e-08",
    "train_seed": "0", "eval_every": "50", "eval_samples": "64",
    "baseline": "0",
}

_IGNORED = ("subcommand", "tool_version")


class ConfigError(ValueError):
    pass


def resolve(*layers: dict[str, str]) -> dict[str, str]:
    """Defaults overlaid by each layer in turn; later layers win."""
    out = dict(DEFAULTS)
    for layer in layers:
        for key, value in layer.items():
            if key in _IGNORED or key.startswith("artifact."):
                continue
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            out[key] = str(value)
    return out


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip())


def encoder_config(kv: dict[str, str]) -> EncoderConfig:
    try:
        return EncoderConfig.build(
            int(kv["h"]), int(kv["w"]), patch_f=int(kv["patch_f"]), patch_t=int(kv["patch_t"]),
            k=int(kv["k"]), d=int(kv["d"]), r=int(kv["r"]), v=int(kv["v"]), depth=int(kv["depth"]),
            heads=int(kv["heads"]), mlp_ratio=int(kv["mlp_ratio"]), classes=int(kv["classes"]),
            seed=int(kv["model_seed"]),
        )
    except ValueError as e:
        raise ConfigError(str(e)) from None


def task_spec(kv: dict[str, str]) -> SynthTaskSpec:
    try:
        return SynthTaskSpec(
            classes=int(kv["classes"]), mels=int(kv["mels"]), frames=int(kv["frames"]),
            train_domain=int(kv["train_domain"]), domain_tilts=_floats(kv["domain_tilts"]),
            domain_distortions=_floats(kv["domain_distortions"]), bands_per_class=int(kv["bands_per_class"]),
            band_width=int(kv["band_width"]), band_amplitude=float(kv["band_amplitude"]),
            noise=float(kv["noise"]), seed=int(kv["task_seed"]),
        )
    except ValueError as e:
        raise ConfigError(str(e)) from None


def train_config(kv: dict[str, str]) -> TrainConfig:
    try:
        return TrainConfig(
            steps=int(kv["steps"]), batch_size=int(kv["batch_size"]), lr=float(kv["lr"]),
            beta1=float(kv["beta1"]), beta2=float(kv["beta2"]), eps=float(kv["eps"]),
            seed=int(kv["train_seed"]), eval_every=int(kv["eval_every"]), eval_samples=int(kv["eval_samples"]),
        )
    except ValueError as e:
        raise ConfigError(str(e)) from None
