"""Run configuration: a flat, diff-friendly key-value format.

One `key = value` per line, dotted sections for grouping, `#` comments.
Unknown keys are rejected and every range violation is reported at once so
an experiment matrix fails loudly rather than half-running.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .data import PartitionSpec
from .errors import ConfigurationError
from .tensorcore import ModelSpec

ALGORITHMS = ("mmic", "fedavg", "fedadagrad")
BACKENDS = ("lsh", "svd")
ACTIVATIONS = ("tanh", "relu")
THRESHOLD_MODES = ("zero", "running_mean")


@dataclass(frozen=True)
class SimConfig:
    algorithm: str = "mmic"
    rounds: int = 90
    warmup_rounds: int = -1          # -1 -> rounds // 3
    participation: float = 0.4
    local_epochs: int = 3
    batch_size: int = 16
    subset_size: int = 128
    client_lr: float = 0.005
    server_lr: float = 0.1
    beta: float = 0.9
    risk_lambda: float = 0.5
    tau_smooth: float = 10.0
    tau_select: float = 1.0
    tau_adapt: float = 1e-3
    core_threshold: str = "zero"
    pps: bool = True
    bpi: bool = True
    mpo: bool = True
    pooled_server_state: bool = False
    sequential_clusters: bool = False
    data_clients: int = 20
    data_classes: int = 4
    data_dim_a: int = 16
    data_dim_b: int = 16
    data_samples_per_class: int = 300
    data_beta_diri: float = 0.5
    data_mm: float = 0.0
    data_mc: float = 0.0
    data_noise: float = 1.0
    data_proto_scale: float = 2.0
    data_feature_shift: float = 0.0
    data_min_samples: int = 20
    data_dynamic_missing: bool = False
    model_hidden: int = 16
    model_activation: str = "tanh"
    cluster_backend: str = "lsh"
    cluster_sweep: tuple[float, ...] = ()
    cluster_planes: int = 32
    cluster_svd_rank: int = 3
    seed_data: int = 0
    seed_model: int = 1
    seed_selection: int = 2
    seed_clustering: int = 3

    @property
    def effective_warmup(self) -> int:
        return self.rounds // 3 if self.warmup_rounds < 0 else self.warmup_rounds

    def partition_spec(self) -> PartitionSpec:
        return PartitionSpec(
            clients=self.data_clients,
            classes=self.data_classes,
            dim_a=self.data_dim_a,
            dim_b=self.data_dim_b,
            samples_per_class=self.data_samples_per_class,
            beta_diri=self.data_beta_diri,
            mm=self.data_mm,
            mc=self.data_mc,
            noise=self.data_noise,
            proto_scale=self.data_proto_scale,
            feature_shift=self.data_feature_shift,
            min_samples=self.data_min_samples,
            dynamic_missing=self.data_dynamic_missing,
            seed=self.seed_data,
        )

    def model_spec(self) -> ModelSpec:
        return ModelSpec(dim_a=self.data_dim_a, dim_b=self.data_dim_b,
                         hidden=self.model_hidden, classes=self.data_classes,
                         activation=self.model_activation)


# Config-file key -> dataclass field. Order here is the emit order.
KEY_TO_FIELD = {
    "algorithm": "algorithm",
    "rounds": "rounds",
    "warmup_rounds": "warmup_rounds",
    "participation": "participation",
    "local_epochs": "local_epochs",
    "batch_size": "batch_size",
    "subset_size": "subset_size",
    "client_lr": "client_lr",
    "server_lr": "server_lr",
    "beta": "beta",
    "lambda": "risk_lambda",
    "tau_smooth": "tau_smooth",
    "tau_select": "tau_select",
    "tau_adapt": "tau_adapt",
    "core_threshold": "core_threshold",
    "toggle.pps": "pps",
    "toggle.bpi": "bpi",
    "toggle.mpo": "mpo",
    "server.pooled_state": "pooled_server_state",
    "server.sequential_clusters": "sequential_clusters",
    "data.clients": "data_clients",
    "data.classes": "data_classes",
    "data.dim_a": "data_dim_a",
    "data.dim_b": "data_dim_b",
    "data.samples_per_class": "data_samples_per_class",
    "data.beta_diri": "data_beta_diri",
    "data.mm": "data_mm",
    "data.mc": "data_mc",
    "data.noise": "data_noise",
    "data.proto_scale": "data_proto_scale",
    "data.feature_shift": "data_feature_shift",
    "data.min_samples": "data_min_samples",
    "data.dynamic_missing": "data_dynamic_missing",
    "model.hidden": "model_hidden",
    "model.activation": "model_activation",
    "cluster.backend": "cluster_backend",
    "cluster.sweep": "cluster_sweep",
    "cluster.planes": "cluster_planes",
    "cluster.svd_rank": "cluster_svd_rank",
    "seed.data": "seed_data",
    "seed.model": "seed_model",
    "seed.selection": "seed_selection",
    "seed.clustering": "seed_clustering",
}
FIELD_TO_KEY = {v: k for k, v in KEY_TO_FIELD.items()}
_FIELD_TYPES = {f.name: f.type for f in fields(SimConfig)}


def _parse_value(key: str, text: str):
    ftype = _FIELD_TYPES[KEY_TO_FIELD[key]]
    text = text.strip()
    if ftype == "bool":
        if text.lower() in ("true", "on", "yes", "1"):
            return True
        if text.lower() in ("false", "off", "no", "0"):
            return False
        raise ConfigurationError(f"{key}: expected a boolean, got {text!r}")
    if ftype == "int":
        try:
            return int(text)
        except ValueError:
            raise ConfigurationError(f"{key}: expected an integer, got {text!r}") from None
    if ftype == "float":
        try:
            return float(text)
        except ValueError:
            raise ConfigurationError(f"{key}: expected a number, got {text!r}") from None
    if ftype == "tuple[float, ...]":
        if not text:
            return ()
        try:
            return tuple(float(v) for v in text.split(","))
        except ValueError:
            raise ConfigurationError(f"{key}: expected comma-separated numbers, got {text!r}") from None
    return text  # str


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def validate(config: SimConfig) -> SimConfig:
    """Raise with every offending key listed; returns the config unchanged."""
    bad = []

    def check(cond, key, message):
        if not cond:
            bad.append(f"{FIELD_TO_KEY.get(key, key)}: {message}")

    check(config.algorithm in ALGORITHMS, "algorithm", f"must be one of {ALGORITHMS}")
    check(config.rounds >= 1, "rounds", "must be >= 1")
    check(config.warmup_rounds >= -1, "warmup_rounds", "must be >= 0 (or -1 for rounds/3)")
    check(0.0 < config.participation <= 1.0, "participation", "must lie in (0, 1]")
    check(config.local_epochs >= 1, "local_epochs", "must be >= 1")
    check(config.batch_size >= 1, "batch_size", "must be >= 1")
    check(config.subset_size >= 1, "subset_size", "must be >= 1")
    check(config.client_lr > 0, "client_lr", "must be positive")
    check(config.server_lr > 0, "server_lr", "must be positive")
    check(0.0 <= config.beta < 1.0, "beta", "must lie in [0, 1)")
    check(0.0 <= config.risk_lambda <= 1.0, "risk_lambda", "must lie in [0, 1]")
    check(config.tau_smooth > 0, "tau_smooth", "must be positive")
    check(config.beta + 1.0 / config.tau_smooth <= 1.0 if config.tau_smooth > 0 else False,
          "tau_smooth", "beta + 1/tau_smooth must not exceed 1")
    check(config.tau_select > 0, "tau_select", "must be positive")
    check(config.tau_adapt > 0, "tau_adapt", "must be positive")
    check(config.core_threshold in THRESHOLD_MODES, "core_threshold",
          f"must be one of {THRESHOLD_MODES}")
    check(config.data_clients >= 1, "data_clients", "must be >= 1")
    check(config.data_classes >= 2, "data_classes", "must be >= 2")
    check(config.data_dim_a >= 1, "data_dim_a", "must be >= 1")
    check(config.data_dim_b >= 1, "data_dim_b", "must be >= 1")
    check(config.data_samples_per_class >= 1, "data_samples_per_class", "must be >= 1")
    check(config.data_beta_diri > 0, "data_beta_diri", "must be positive")
    check(0.0 <= config.data_mm <= 1.0, "data_mm", "must lie in [0, 1]")
    check(0.0 <= config.data_mc <= 1.0, "data_mc", "must lie in [0, 1]")
    check(config.data_noise >= 0, "data_noise", "must be nonnegative")
    check(config.data_min_samples >= 5, "data_min_samples", "must be >= 5")
    check(config.model_hidden >= 1, "model_hidden", "must be >= 1")
    check(config.model_activation in ACTIVATIONS, "model_activation",
          f"must be one of {ACTIVATIONS}")
    check(config.cluster_backend in BACKENDS, "cluster_backend",
          f"must be one of {BACKENDS}")
    check(config.cluster_planes >= 1, "cluster_planes", "must be >= 1")
    check(config.cluster_svd_rank >= 1, "cluster_svd_rank", "must be >= 1")
    if bad:
        raise ConfigurationError("invalid configuration: " + "; ".join(bad))
    return config


def parse_config_text(text: str, base: SimConfig | None = None) -> SimConfig:
    values = {}
    errors = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
            continue
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in KEY_TO_FIELD:
            errors.append(f"line {lineno}: unknown key {key!r}")
            continue
        try:
            values[KEY_TO_FIELD[key]] = _parse_value(key, value)
        except ConfigurationError as exc:
            errors.append(f"line {lineno}: {exc}")
    if errors:
        raise ConfigurationError("; ".join(errors))
    config = replace(base, **values) if base is not None else SimConfig(**values)
    return validate(config)


def parse_config(path, base: SimConfig | None = None) -> SimConfig:
    with open(path) as fh:
        return parse_config_text(fh.read(), base=base)


def apply_overrides(config: SimConfig, overrides) -> SimConfig:
    """Apply `key=value` strings on top of a parsed config."""
    values = {}
    errors = []
    for item in overrides:
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep:
            errors.append(f"override {item!r} is not of the form key=value")
            continue
        if key not in KEY_TO_FIELD:
            errors.append(f"unknown override key {key!r}")
            continue
        try:
            values[KEY_TO_FIELD[key]] = _parse_value(key, value)
        except ConfigurationError as exc:
            errors.append(str(exc))
    if errors:
        raise ConfigurationError("; ".join(errors))
    return validate(replace(config, **values))


def emit_config(config: SimConfig) -> str:
    """Serialize every key (defaults included) in registry order."""
    lines = [f"{key} = {_format_value(getattr(config, attr))}"
             for key, attr in KEY_TO_FIELD.items()]
    return "\n".join(lines) + "\n"
