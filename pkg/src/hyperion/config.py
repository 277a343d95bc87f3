"""YAML configuration.

Example::

    sim:     {seed: 7, mode: virtual}
    latency: {net_rtt_us: 1.0, nvme_min_us: 5.0, nvme_max_us: 8.0, distribution: uniform}
    devices: {count: 4, capacity_blocks: 65536, queue_depth: 16, backing: memory}
    server:  {bind: "127.0.0.1:7474"}
    slot:    {zero_on_free: false, queue_depth: 64, lane_width: 4, kv_get_via_ebpf: false}
    tenants:
      - {id: 1, token: "<64 hex digits>"}
    client:  {endpoint: "127.0.0.1:7474", tenant: 1, token: "<64 hex digits>", timeout_s: 1.0, retries: 3}

``HYPERION_BIND`` overrides ``server.bind``; ``HYPERION_TOKEN`` overrides
``client.token``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from typing import Any

import yaml

from .nvme import DeviceConfig
from .simclock import LatencyModel
from .slots import DEFAULT_QUEUE_DEPTH, Tenant

DEFAULT_BIND = "127.0.0.1:7474"


class ConfigError(ValueError):
    pass


@dataclass
class SimSection:
    seed: int = 0
    mode: str = "virtual"
    realtime_scale: float = 1.0


@dataclass
class LatencySection:
    net_rtt_us: float = 1.0
    nvme_min_us: float = 5.0
    nvme_max_us: float = 8.0
    distribution: str = "uniform"

    def model(self) -> LatencyModel:
        return LatencyModel(self.net_rtt_us, self.nvme_min_us, self.nvme_max_us, self.distribution)


@dataclass
class DevicesSection:
    count: int = 4
    capacity_blocks: int = 65536
    queue_depth: int = 16
    backing: str = "memory"

    def device_config(self) -> DeviceConfig:
        return DeviceConfig(self.count, self.capacity_blocks, self.queue_depth, backing=self.backing)


@dataclass
class ServerSection:
    bind: str = DEFAULT_BIND


@dataclass
class SlotSection:
    zero_on_free: bool = False
    queue_depth: int = DEFAULT_QUEUE_DEPTH
    lane_width: int = 4
    kv_get_via_ebpf: bool = False


@dataclass
class ClientSection:
    endpoint: str = DEFAULT_BIND
    tenant: int = 1
    token: str | None = field(default=None, repr=False)
    timeout_s: float = 1.0
    retries: int = 3


@dataclass
class Config:
    sim: SimSection = field(default_factory=SimSection)
    latency: LatencySection = field(default_factory=LatencySection)
    devices: DevicesSection = field(default_factory=DevicesSection)
    server: ServerSection = field(default_factory=ServerSection)
    slot: SlotSection = field(default_factory=SlotSection)
    client: ClientSection = field(default_factory=ClientSection)
    tenants: list[Tenant] = field(default_factory=list)

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None) -> Config:
        data = dict(data or {})
        sections = {
            "sim": SimSection, "latency": LatencySection, "devices": DevicesSection,
            "server": ServerSection, "slot": SlotSection, "client": ClientSection,
        }
        unknown = set(data) - set(sections) - {"tenants"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs: dict[str, Any] = {}
        for name, section in sections.items():
            raw = data.get(name) or {}
            allowed = {f.name for f in fields(section)}
            bad = set(raw) - allowed
            if bad:
                raise ConfigError(f"unknown keys in {name}: {sorted(bad)}")
            kwargs[name] = section(**raw)
        tenants = []
        for entry in data.get("tenants") or []:
            try:
                tenants.append(Tenant(int(entry["id"]), parse_token(entry["token"])))
            except (KeyError, TypeError) as err:
                raise ConfigError(f"bad tenant entry: {err}") from err
        return cls(tenants=tenants, **kwargs)

    @classmethod
    def load(cls, path: str | None) -> Config:
        if path is None:
            return cls()
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def bind_address(self) -> tuple[str, int]:
        return parse_endpoint(os.environ.get("HYPERION_BIND") or self.server.bind)

    def client_token(self) -> bytes | None:
        raw = os.environ.get("HYPERION_TOKEN") or self.client.token
        return parse_token(raw) if raw else None


def parse_token(raw: str | bytes) -> bytes:
    if isinstance(raw, bytes) and len(raw) == 32:
        return raw
    try:
        token = bytes.fromhex(str(raw))
    except ValueError as err:
        raise ConfigError("tokens are 64 hex digits") from err
    if len(token) != 32:
        raise ConfigError("tokens are 64 hex digits")
    return token


def parse_endpoint(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"endpoint {text!r} is not host:port")
    return host.strip("[]") or "127.0.0.1", int(port)
