"""Experiment configuration.

Hyperparameter keys use the notation of the model's hyperparameter table
(``T``, ``d``, ``eta_mu``, ...); the remaining keys describe the experiment.
Config files are flat JSON objects and unknown keys are rejected.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    # model / training hyperparameters
    T: int = 40
    F: int = 5
    d: int = 95
    d_q: int = 95
    d_k: int = 95
    d_v: int = 95
    d_prime: int = 95
    N: int | None = None  # inferred from the topology
    K: int = 5
    K_prime: int = 5
    phi: int = 512
    eta_mu: float = 0.001
    eta_Q: float = 0.001
    gamma: float = 0.6
    rho: float = 0.2
    epsilon: float = 0.5
    k: int = 5
    M: int = 32
    delta: float = 0.5
    P: float = 233233
    B: float = 1000.0  # Mbps

    # experiment
    topology: str | None = None  # None -> bundled AARNet
    trace: str | None = None  # None -> synthetic arrivals
    synth_ar: tuple[float, ...] = (0.97,)
    synth_noise_sd: float = 0.024  # innovation sd as a fraction of P
    synth_length: int = 5000
    variant: str = "STRL"
    episodes: int = 1000
    steps: int = 100
    seeds: tuple[int, ...] = (0, 1, 2)
    out_dir: str = "runs"
    packet_bits: float = 10_000.0
    utilization: float = 0.7
    service_rate: float | None = None  # None -> sized from utilization
    node_buffer: int | None = None
    link_buffer: int | None = None
    warmup_min_steps: int = 5
    warmup_utilization: float = 0.9
    warmup_window: int = 3
    warmup_max_steps: int = 200
    epsilon_final: float = 0.05
    replay_capacity: int = 10_000
    route_top1: bool = False
    mlp_layers: int = 2
    optimizer: str = "adam"
    inference_steps: int = 500
    mutation: str | None = None  # None -> bundled Armidale links

    def __post_init__(self) -> None:
        for name in ("T", "F", "d", "d_q", "d_k", "d_v", "d_prime", "K", "K_prime", "phi",
                     "k", "M", "episodes", "steps", "synth_length", "replay_capacity", "mlp_layers"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name}: expected a positive integer, got {v!r}")
        if self.d_q != self.d_k:
            raise ConfigError("d_q: must equal d_k")
        if self.d_v != self.d:
            raise ConfigError("d_v: must equal d")
        checks = {
            "gamma": 0.0 <= self.gamma <= 1.0,
            "rho": 0.0 < self.rho < 1.0,
            "epsilon": self.epsilon >= 0,
            "delta": 0.0 <= self.delta < 1.0,
            "P": self.P > 0,
            "B": self.B > 0,
            "eta_mu": self.eta_mu > 0,
            "eta_Q": self.eta_Q > 0,
            "utilization": 0.0 < self.utilization,
            "packet_bits": self.packet_bits > 0,
            "variant": self.variant in ("STRL", "SRL", "TRL"),
            "optimizer": self.optimizer in ("adam", "sgd"),
        }
        for name, ok in checks.items():
            if not ok:
                raise ConfigError(f"{name}: invalid value {getattr(self, name)!r}")

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    def dump(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


PROFILES = {
    "paper": {},
    "desk": {"T": 10, "d": 24, "d_q": 24, "d_k": 24, "d_v": 24, "d_prime": 24,
             "episodes": 50, "steps": 20, "k": 3, "inference_steps": 100},
}

_TUPLE_KEYS = {"synth_ar", "seeds"}


def make_config(profile: str = "paper", **overrides) -> ExperimentConfig:
    if profile not in PROFILES:
        raise ConfigError(f"profile: unknown profile {profile!r}")
    values = {**PROFILES[profile], **overrides}
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown configuration key")
    for key in _TUPLE_KEYS & set(values):
        values[key] = tuple(values[key])
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path | None, profile: str = "paper", **overrides) -> ExperimentConfig:
    values = {}
    if path is not None:
        try:
            values = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: {exc}") from None
        if not isinstance(values, dict):
            raise ConfigError("config: expected a flat JSON object")
        profile = values.pop("profile", profile)
    return make_config(profile, **{**values, **overrides})
