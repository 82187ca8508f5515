"""Topology configuration: nested dataclasses loaded from TOML plus env overrides.

Environment variables of the form ``QKDTUNNEL__LINK__SEED=9`` override the
field ``link.seed``; values are coerced to the type of the field default.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from typing import Optional

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .errors import InvalidArgument

ENV_PREFIX = "QKDTUNNEL__"
CONFIG_ENV = "QKDTUNNEL_CONFIG"


@dataclass
class SiteConfig:
    sae_id: str
    token: str
    kme_id: str
    kme_host: str = "127.0.0.1"
    kme_port: int = 0


@dataclass
class LinkConfig:
    n: int = 200_000
    noise_qber: float = 0.0
    eve_probability: float = 0.0
    channel_seed: int = 1
    key_size_bits: int = 256
    qber_abort_threshold: float = 0.11
    sample_fraction: float = 0.1
    seed: int = 7


@dataclass
class KmeConfig:
    max_key_count: int = 100_000
    max_keys_per_request: int = 1024
    journal_dir: str = ""


@dataclass
class PoolConfig:
    low_water: int = 16
    high_water: int = 64
    fallback_timeout: float = 2.0


@dataclass
class TunnelConfig:
    host: str = "127.0.0.1"
    client_port: int = 0
    server_port: int = 0
    # empty upstream_host means: start the built-in echo server on echo_port
    upstream_host: str = ""
    upstream_port: int = 0
    echo_port: int = 0


@dataclass
class OtpConfig:
    ledger_path: str = ""
    chunk: int = 65536


@dataclass
class TopologyConfig:
    site_a: SiteConfig = field(
        default_factory=lambda: SiteConfig("alice.site-a.test", "token-site-a", "KME-A")
    )
    site_b: SiteConfig = field(
        default_factory=lambda: SiteConfig("bob.site-b.test", "token-site-b", "KME-B")
    )
    link: LinkConfig = field(default_factory=LinkConfig)
    kme: KmeConfig = field(default_factory=KmeConfig)
    pool: PoolConfig = field(default_factory=PoolConfig)
    tunnel: TunnelConfig = field(default_factory=TunnelConfig)
    otp: OtpConfig = field(default_factory=OtpConfig)
    mode: str = "psk_tunnel"
    control_host: str = "127.0.0.1"
    control_port: int = 0
    run_dir: str = ".qkdtunnel"

    def validate(self) -> "TopologyConfig":
        if self.mode not in ("psk_tunnel", "otp"):
            raise InvalidArgument(f"mode must be psk_tunnel or otp, not {self.mode!r}")
        if self.site_a.sae_id == self.site_b.sae_id:
            raise InvalidArgument("site SAE IDs must differ")
        if self.site_a.token == self.site_b.token:
            raise InvalidArgument("site bearer tokens must differ")
        ks = self.link.key_size_bits
        if ks < 64 or ks % 8:
            raise InvalidArgument("link.key_size_bits must be a multiple of 8 and >= 64")
        if not 0 <= self.pool.low_water <= self.pool.high_water:
            raise InvalidArgument("pool watermarks must satisfy 0 <= low <= high")
        return self


def _build(cls, data: dict, path: str):
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in fields:
            raise InvalidArgument(f"unknown config key {path}{key}")
        ftype = fields[key].type
        sub = _SECTIONS.get(ftype) if isinstance(ftype, str) else None
        if sub is not None:
            if not isinstance(value, dict):
                raise InvalidArgument(f"{path}{key} must be a table")
            kwargs[key] = _build(sub, value, f"{path}{key}.")
        else:
            kwargs[key] = value
    if cls is SiteConfig:
        missing = {"sae_id", "token", "kme_id"} - kwargs.keys()
        if missing:
            raise InvalidArgument(f"{path} missing {sorted(missing)}")
    return cls(**kwargs)


_SECTIONS = {
    "SiteConfig": SiteConfig,
    "LinkConfig": LinkConfig,
    "KmeConfig": KmeConfig,
    "PoolConfig": PoolConfig,
    "TunnelConfig": TunnelConfig,
    "OtpConfig": OtpConfig,
}


def _coerce(text: str, current):
    if isinstance(current, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    return text


def apply_env(cfg: TopologyConfig, environ=None) -> TopologyConfig:
    environ = os.environ if environ is None else environ
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        parts = name[len(ENV_PREFIX):].lower().split("__")
        target = cfg
        for part in parts[:-1]:
            if not hasattr(target, part):
                raise InvalidArgument(f"{name}: unknown section {part}")
            target = getattr(target, part)
        leaf = parts[-1]
        if not dataclasses.is_dataclass(target) or not hasattr(target, leaf):
            raise InvalidArgument(f"{name}: unknown field {leaf}")
        setattr(target, leaf, _coerce(value, getattr(target, leaf)))
    return cfg


def config_from_dict(data: dict) -> TopologyConfig:
    base = TopologyConfig()
    merged = dataclasses.asdict(base)
    for key, value in data.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key].update(value)
        else:
            merged[key] = value
    return _build(TopologyConfig, merged, "")


def load_config(path: Optional[str] = None, environ=None) -> TopologyConfig:
    """Load ``path`` (or ``$QKDTUNNEL_CONFIG``), apply env overrides, validate."""
    environ = os.environ if environ is None else environ
    path = path or environ.get(CONFIG_ENV)
    data = {}
    if path:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    return apply_env(config_from_dict(data), environ).validate()


def to_dict(cfg: TopologyConfig) -> dict:
    return dataclasses.asdict(cfg)
