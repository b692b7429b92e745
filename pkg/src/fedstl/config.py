"""Flat key=value run configuration with presets and strict validation."""

from __future__ import annotations

from dataclasses import dataclass, fields

from .datagen import GenSpec, GroupFamily
from .federation import FedConfig
from .models import LinearAR, MiniGRU


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_floats(text: str):
    return tuple(float(p) for p in text.split(",") if p.strip())


def _parse_ints(text: str):
    return tuple(int(p) for p in text.split(",") if p.strip())


@dataclass
class RunConfig:
    # experiment
    method: str = "fedstl"
    seed: int = 0
    out_dir: str = "out"
    threads: int = 1
    # federation
    rounds: int = 50
    participation: float = 0.25
    epoch_preset: str = "main"  # main: 6 local / 4 cluster; appendix: 8 / 2
    local_epochs: int | None = None
    cluster_epochs: int | None = None
    clustering_period: int = 5
    n_clusters: int = 5
    lam: float = 1.0
    lr: float = 0.2
    cluster_lr: float = 0.2
    batch_size: int = 64
    sample_windows: int = 32
    share_private: bool = False
    # mining
    templates: tuple = (1, 2)
    window_len: int = 2
    # model
    arch: str = "gru"
    hidden_dim: int = 8
    input_len: int = 16
    output_len: int = 8
    # datagen
    n_clients: int = 20
    n_groups: int = 4
    n_vars: int = 1
    series_len: int = 120
    levels: tuple = (-5.0, -2.5, 2.5, 5.0)
    periods: tuple = (6.0, 8.0, 12.0, 16.0)
    amplitude: float = 0.6
    noise_sigma: float = 0.05
    var_offsets: tuple = (0.0,)
    gap: float | None = None

    def resolved_epochs(self):
        presets = {"main": (6, 4), "appendix": (8, 2)}
        if self.epoch_preset not in presets and self.epoch_preset != "custom":
            raise ConfigError(f"unknown epoch_preset {self.epoch_preset!r}")
        tau, kappa = presets.get(self.epoch_preset, (None, None))
        if self.local_epochs is not None:
            tau = self.local_epochs
        if self.cluster_epochs is not None:
            kappa = self.cluster_epochs
        if tau is None or kappa is None:
            raise ConfigError("epoch_preset=custom requires local_epochs and cluster_epochs")
        return tau, kappa

    def validate(self):
        if self.method not in ("fedstl", "fedavg"):
            raise ConfigError(f"method must be fedstl or fedavg, got {self.method!r}")
        if not 0 < self.participation <= 1:
            raise ConfigError("participation must be in (0, 1]")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        tau, kappa = self.resolved_epochs()
        if tau < 0 or kappa < 0:
            raise ConfigError("epoch counts must be >= 0")
        if tau + kappa < 1:
            raise ConfigError("need local_epochs + cluster_epochs >= 1")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.arch not in ("linear", "gru"):
            raise ConfigError(f"arch must be linear or gru, got {self.arch!r}")
        if self.n_groups > len(self.levels) or self.n_groups > len(self.periods):
            raise ConfigError("levels and periods must cover every group")
        if len(self.var_offsets) != self.n_vars:
            raise ConfigError("var_offsets must list one offset per variable")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        return self

    def fed_config(self) -> FedConfig:
        tau, kappa = self.resolved_epochs()
        return FedConfig(
            rounds=self.rounds,
            participation=self.participation,
            local_epochs=tau,
            cluster_epochs=kappa,
            clustering_period=self.clustering_period,
            n_clusters=self.n_clusters,
            lam=self.lam,
            lr=self.lr,
            cluster_lr=self.cluster_lr,
            batch_size=self.batch_size,
            sample_windows=self.sample_windows,
            template_rows=tuple(self.templates),
            window_len=self.window_len,
            share_private=self.share_private,
            seed=self.seed,
            threads=self.threads,
        )

    def gen_spec(self) -> GenSpec:
        families = [
            GroupFamily(
                level=self.levels[g],
                amplitude=self.amplitude,
                period=self.periods[g],
                noise_sigma=self.noise_sigma,
                var_offsets=tuple(self.var_offsets),
            )
            for g in range(self.n_groups)
        ]
        return GenSpec(
            n_clients=self.n_clients,
            n_groups=self.n_groups,
            families=families,
            n_vars=self.n_vars,
            series_len=self.series_len,
            input_len=self.input_len,
            output_len=self.output_len,
            gap=self.gap,
            seed=self.seed,
        )

    def model_arch(self):
        if self.arch == "linear":
            return LinearAR(self.input_len, self.output_len, self.n_vars)
        return MiniGRU(self.hidden_dim, self.input_len, self.output_len, self.n_vars)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out


_PARSERS = {
    "method": str,
    "seed": int,
    "out_dir": str,
    "threads": int,
    "rounds": int,
    "participation": float,
    "epoch_preset": str,
    "local_epochs": int,
    "cluster_epochs": int,
    "clustering_period": int,
    "n_clusters": int,
    "lam": float,
    "lambda": float,  # alias
    "lr": float,
    "cluster_lr": float,
    "batch_size": int,
    "sample_windows": int,
    "share_private": _parse_bool,
    "templates": _parse_ints,
    "window_len": int,
    "arch": str,
    "hidden_dim": int,
    "input_len": int,
    "output_len": int,
    "n_clients": int,
    "n_groups": int,
    "n_vars": int,
    "series_len": int,
    "levels": _parse_floats,
    "periods": _parse_floats,
    "amplitude": float,
    "noise_sigma": float,
    "var_offsets": _parse_floats,
    "gap": float,
    "preset": str,
}


PRESETS = {
    # 20 heterogeneous clients, 50 rounds; the standard desk-scale run
    "desk20": {},
    # the same data and schedule evaluated with the FedAvg baseline
    # (10 local epochs, as the baselines are conventionally run)
    "desk20-fedavg": {
        "method": "fedavg",
        "epoch_preset": "custom",
        "local_epochs": 10,
        "cluster_epochs": 0,
        "n_clusters": 1,
        "lam": 0.0,
    },
    # the alternate epoch split
    "desk20-appendix": {"epoch_preset": "appendix"},
}


def from_preset(name: str, **overrides) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r} (have: {', '.join(sorted(PRESETS))})")
    kw = dict(PRESETS[name])
    kw.update(overrides)
    return RunConfig(**kw).validate()


def parse_config_text(text: str) -> RunConfig:
    """Parse `key = value` lines; '#' starts a comment; unknown keys error."""
    values: dict = {}
    preset = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _PARSERS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            parsed = _PARSERS[key](val)
        except ConfigError:
            raise
        except ValueError as err:
            raise ConfigError(f"line {lineno}: bad value for {key}: {err}") from None
        if key == "preset":
            preset = parsed
        elif key == "lambda":
            values["lam"] = parsed
        else:
            values[key] = parsed
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}")
        merged = dict(PRESETS[preset])
        merged.update(values)
        values = merged
    try:
        cfg = RunConfig(**values)
    except TypeError as err:
        raise ConfigError(str(err)) from None
    return cfg.validate()


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config_text(fh.read())
