"""Deterministic synthetic flows: a benign baseline with labeled anomaly episodes.

Day 1 is always clean, so the generated data can stand in for the
train-on-first-day protocol. Three episode kinds exist:

* ``rare_token_burst`` - protocol/size combinations never produced by the
  benign profile, sent to a server on an ordinary port.
* ``port_sweep`` - one small TCP flow per destination port over a range.
* ``low_and_slow`` - in-profile web requests trickled over a whole hour.
"""
from __future__ import annotations

import configparser
import csv
import os
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta

import numpy as np

from .ingest import BENIGN, ConfigError, FlowRecord

KINDS = ("rare_token_burst", "port_sweep", "low_and_slow")

# (protocol, byte bucket, service port) -> probability
DEFAULT_PROFILE = {
    "client": {
        (6, 6, 443): 0.05, (6, 9, 443): 0.18, (6, 12, 443): 0.14, (6, 14, 443): 0.08,
        (6, 10, 80): 0.10, (6, 13, 80): 0.07, (17, 6, 53): 0.15, (17, 7, 53): 0.07,
        (17, 6, 123): 0.05, (6, 11, 445): 0.06, (6, 8, 22): 0.05,
    },
    "server": {
        (6, 11, 80): 0.30, (6, 15, 80): 0.20, (6, 10, 443): 0.20,
        (6, 7, 22): 0.10, (6, 8, 21): 0.10, (17, 8, 53): 0.10,
    },
}


@dataclass(frozen=True)
class Episode:
    attack_name: str
    day: int
    hour: int
    kind: str
    n_flows: int = 60
    port_lo: int = 1
    port_hi: int = 1024


def default_episodes() -> list[Episode]:
    return [
        Episode("Heartbleed", 2, 10, "rare_token_burst", n_flows=60),
        Episode("PortScan", 2, 14, "port_sweep", port_lo=1, port_hi=1024),
        Episode("SlowLoris", 3, 11, "low_and_slow", n_flows=150),
        Episode("Heartbleed", 3, 15, "rare_token_burst", n_flows=40),
    ]


@dataclass
class SynthConfig:
    seed: int = 7
    n_days: int = 3
    start_date: date = date(2017, 7, 3)
    n_internal: int = 12
    n_servers: int = 3
    n_external: int = 24
    flows_per_day: int = 3000
    first_hour: int = 8
    last_hour: int = 17
    inbound_fraction: float = 0.25
    benign_profile: dict = field(default_factory=lambda: {k: dict(v) for k, v in DEFAULT_PROFILE.items()})
    episodes: list[Episode] = field(default_factory=default_episodes)

    internal_prefix = "192.168.10."
    external_prefix = "203.0.113."
    attacker_ip = "198.51.100.66"

    def validate(self) -> None:
        if self.n_days < 1 or self.flows_per_day < 1:
            raise ConfigError("n_days and flows_per_day must be positive")
        if not 0 < self.n_servers < self.n_internal:
            raise ConfigError("need at least one server and one client among internal hosts")
        if not 0 <= self.first_hour <= self.last_hour <= 23:
            raise ConfigError("active hours must satisfy 0 <= first_hour <= last_hour <= 23")
        for role in ("client", "server"):
            dist = self.benign_profile.get(role)
            if not dist:
                raise ConfigError(f"benign profile for role {role!r} is missing")
            if abs(sum(dist.values()) - 1.0) > 1e-9 or min(dist.values()) < 0:
                raise ConfigError(f"benign profile for role {role!r} must sum to 1")
        for ep in self.episodes:
            if ep.kind not in KINDS:
                raise ConfigError(f"episode {ep.attack_name!r}: unknown kind {ep.kind!r}")
            if ep.day == 1:
                raise ConfigError(f"episode {ep.attack_name!r} on day 1: the first day must stay clean")
            if not 1 < ep.day <= self.n_days or not 0 <= ep.hour <= 23:
                raise ConfigError(f"episode {ep.attack_name!r}: day/hour out of range")
            if ep.attack_name == BENIGN:
                raise ConfigError("an episode cannot be labeled BENIGN")
            if ep.kind == "port_sweep" and not 0 <= ep.port_lo <= ep.port_hi <= 65535:
                raise ConfigError(f"episode {ep.attack_name!r}: bad port range")

    @classmethod
    def from_config(cls, path: str | os.PathLike) -> "SynthConfig":
        """Load an INI-style file.

        ``[synth]`` holds scalar keys; ``[profile:client]`` / ``[profile:server]``
        map ``proto:bucket:port`` to a probability; each ``[episode:NAME]``
        section has ``day``, ``hour``, ``kind`` and optional ``n_flows``,
        ``port_lo``, ``port_hi``. Sections that are absent keep defaults.
        """
        # "=" only: profile keys contain colons
        parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
        parser.optionxform = str
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
        cfg = cls()
        if parser.has_section("synth"):
            for key, raw in parser.items("synth"):
                if key == "start_date":
                    cfg.start_date = date.fromisoformat(raw)
                elif key == "inbound_fraction":
                    cfg.inbound_fraction = float(raw)
                elif key in cls.__dataclass_fields__ and key not in ("benign_profile", "episodes"):
                    setattr(cfg, key, int(raw))
                else:
                    raise ConfigError(f"unknown [synth] key {key!r}")
        profiles = [s for s in parser.sections() if s.startswith("profile:")]
        for sec in profiles:
            dist = {}
            for key, raw in parser.items(sec):
                try:
                    proto, bucket, port = (int(x) for x in key.split(":"))
                except ValueError:
                    raise ConfigError(f"[{sec}] key {key!r} is not proto:bucket:port") from None
                dist[(proto, bucket, port)] = float(raw)
            cfg.benign_profile[sec.split(":", 1)[1]] = dist
        episodes = [s for s in parser.sections() if s.startswith("episode:")]
        if episodes:
            cfg.episodes = []
            for sec in episodes:
                opts = dict(parser.items(sec))
                cfg.episodes.append(Episode(
                    sec.split(":", 1)[1], int(opts["day"]), int(opts["hour"]), opts["kind"],
                    int(opts.get("n_flows", 60)), int(opts.get("port_lo", 1)), int(opts.get("port_hi", 1024)),
                ))
        cfg.validate()
        return cfg


def _bytes_in_bucket(rng: np.random.Generator, bucket: int) -> int:
    lo = 1 << bucket
    return int(rng.integers(lo, 2 * lo))


def _categorical(rng: np.random.Generator, dist: dict):
    keys = list(dist)
    p = np.array([dist[k] for k in keys], dtype=float)
    return keys[int(rng.choice(len(keys), p=p / p.sum()))]


def generate(cfg: SynthConfig | None = None) -> list[FlowRecord]:
    """All flows, sorted by time; row ids follow that order."""
    cfg = cfg or SynthConfig()
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    internal = [f"{cfg.internal_prefix}{i + 2}" for i in range(cfg.n_internal)]
    servers, clients = internal[: cfg.n_servers], internal[cfg.n_servers:]
    external = [f"{cfg.external_prefix}{i + 2}" for i in range(cfg.n_external)]
    active_seconds = (cfg.last_hour - cfg.first_hour + 1) * 3600

    flows: list[tuple] = []  # (timestamp, seq, src, dst, sport, dport, proto, bytes, label)

    def emit(ts, src, dst, sport, dport, proto, nbytes, label):
        flows.append((ts, len(flows), src, dst, sport, dport, proto, nbytes, label))

    for d in range(cfg.n_days):
        day0 = datetime.combine(cfg.start_date + timedelta(days=d), datetime.min.time())
        start = day0 + timedelta(hours=cfg.first_hour)
        offsets = np.sort(rng.integers(0, active_seconds, size=cfg.flows_per_day))
        for off in offsets:
            ts = start + timedelta(seconds=int(off))
            sport = int(rng.integers(49152, 65536))
            if rng.random() < cfg.inbound_fraction:
                proto, bucket, port = _categorical(rng, cfg.benign_profile["server"])
                src = external[int(rng.integers(len(external)))]
                dst = servers[int(rng.integers(len(servers)))]
            else:
                proto, bucket, port = _categorical(rng, cfg.benign_profile["client"])
                src = clients[int(rng.integers(len(clients)))]
                if rng.random() < 0.2:
                    dst = servers[int(rng.integers(len(servers)))]
                else:
                    dst = external[int(rng.integers(len(external)))]
            emit(ts, src, dst, sport, port, proto, _bytes_in_bucket(rng, bucket), BENIGN)

    benign_tokens = {(p, b) for dist in cfg.benign_profile.values() for p, b, _ in dist}
    rare = [(p, b) for p in (6, 17, 47) for b in range(16, 23) if (p, b) not in benign_tokens]
    for ep in cfg.episodes:
        hour0 = datetime.combine(cfg.start_date + timedelta(days=ep.day - 1), datetime.min.time()) \
            + timedelta(hours=ep.hour)
        victim = servers[int(rng.integers(len(servers)))]
        if ep.kind == "rare_token_burst":
            base = int(rng.integers(0, 3000))
            for k in range(ep.n_flows):
                proto, bucket = rare[int(rng.integers(len(rare)))]
                ts = hour0 + timedelta(seconds=min(base + 5 * k, 3599))
                emit(ts, cfg.attacker_ip, victim, int(rng.integers(49152, 65536)), 443, proto,
                     _bytes_in_bucket(rng, bucket), ep.attack_name)
        elif ep.kind == "port_sweep":
            ports = range(ep.port_lo, ep.port_hi + 1)
            sport = int(rng.integers(49152, 65536))
            step = 3600 / len(ports)
            for k, port in enumerate(ports):
                ts = hour0 + timedelta(seconds=int(k * step))
                emit(ts, cfg.attacker_ip, victim, sport, port, 6, _bytes_in_bucket(rng, 6), ep.attack_name)
        else:
            step = 3600 / ep.n_flows
            for k in range(ep.n_flows):
                ts = hour0 + timedelta(seconds=int(k * step))
                emit(ts, cfg.attacker_ip, victim, int(rng.integers(49152, 65536)), 80, 6,
                     _bytes_in_bucket(rng, 11), ep.attack_name)

    flows.sort(key=lambda f: (f[0], f[1]))
    return [FlowRecord(i, ts, src, dst, sp, dp, pr, nb, lab)
            for i, (ts, _, src, dst, sp, dp, pr, nb, lab) in enumerate(flows)]


CSV_COLUMNS = (
    "Flow ID", "Source IP", "Source Port", "Destination IP", "Destination Port", "Protocol",
    "Timestamp", "Total Length of Fwd Packets", "Total Length of Bwd Packets", "Label",
)


def _cicids_time(ts: datetime) -> str:
    return f"{ts.month}/{ts.day}/{ts.year} {ts.hour}:{ts.minute:02d}:{ts.second:02d}"


def write_csv(records, path: str | os.PathLike) -> None:
    """Write flows in the CICIDS2017 column layout the default schema reads.

    The byte total is split deterministically: forward gets the larger half.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in records:
            fwd = (r.byte_count + 1) // 2
            flow_id = f"{r.src_ip}-{r.dst_ip}-{r.src_port}-{r.dst_port}-{r.protocol}"
            w.writerow([flow_id, r.src_ip, r.src_port, r.dst_ip, r.dst_port, r.protocol,
                        _cicids_time(r.timestamp), fwd, r.byte_count - fwd, r.label])


def write_internal_ips(cfg: SynthConfig, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# internal network of the synthetic dataset\n")
        fh.write(f"{cfg.internal_prefix}0/24\n")
