"""Network configuration types.

Internal units are microseconds for durations and bits for sizes, so a PHY
rate in bits/us is numerically the rate in Mbps.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError

DEFAULT_RETRY_LIMIT = 5
DEFAULT_BEACON_US = 100_000.0


@dataclass(frozen=True)
class ProtocolTimings:
    sigma: float = 9.0
    sifs: float = 16.0
    difs: float = 34.0
    eifs: float = 88.67
    t_rts: float = 46.67
    t_cts: float = 38.67
    t_ack: float = 38.67
    t_phyhdr: float = 20.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError(f"duration must be a positive number, got {v!r}",
                                  field=f"timings.{f.name}")
        if abs(self.eifs - (self.t_ack + self.sifs + self.difs)) > 1e-6:
            raise ConfigError(
                f"eifs={self.eifs} must equal t_ack + sifs + difs "
                f"= {self.t_ack + self.sifs + self.difs}", field="timings.eifs")

    @classmethod
    def derived(cls, **kw) -> "ProtocolTimings":
        """Build timings with EIFS computed from ACK, SIFS and DIFS."""
        base = {f.name: f.default for f in dataclasses.fields(cls)}
        base.update(kw)
        base["eifs"] = base["t_ack"] + base["sifs"] + base["difs"]
        return cls(**base)

    @property
    def t_col(self) -> float:
        """Duration of an RTS collision."""
        return self.t_rts + self.eifs

    @property
    def t_packet_overhead(self) -> float:
        """Per-packet overhead inside a TXOP burst."""
        return self.t_phyhdr + 2 * self.sifs + self.t_ack


#: 802.11a/g OFDM timings used by every bundled scenario.
TABLE1 = ProtocolTimings()


@dataclass(frozen=True)
class AcClass:
    """One access category: ``n`` identical saturated stations."""

    name: str
    n: int
    p: float
    r: float
    t: int
    M: int = 1
    d: float = math.inf
    cw_min: float = 15.0

    def __post_init__(self):
        where = f"classes.{self.name}"
        if not isinstance(self.n, (int, np.integer)) or self.n < 0:
            raise ConfigError(f"n must be a non-negative integer, got {self.n!r}", field=f"{where}.n")
        if not (0.0 <= self.p < 1.0):
            raise ConfigError(f"p must lie in [0, 1), got {self.p!r}", field=f"{where}.p")
        if not (self.r > 0 and math.isfinite(self.r)):
            raise ConfigError(f"r must be positive, got {self.r!r}", field=f"{where}.r")
        if not isinstance(self.M, (int, np.integer)) or self.M < 1:
            raise ConfigError(f"M must be an integer >= 1, got {self.M!r}", field=f"{where}.M")
        if not isinstance(self.t, (int, np.integer)) or self.t < 1:
            raise ConfigError(f"t must be an integer >= 1, got {self.t!r}", field=f"{where}.t")
        if not self.d > 0:
            raise ConfigError(f"d must be positive, got {self.d!r}", field=f"{where}.d")
        if not (self.cw_min >= 1 and math.isfinite(self.cw_min)):
            raise ConfigError(f"cw_min must be >= 1, got {self.cw_min!r}", field=f"{where}.cw_min")

    def aifs(self, timings: ProtocolTimings) -> float:
        return timings.sifs + self.t * timings.sigma

    def burst_overhead(self, timings: ProtocolTimings) -> float:
        """RTS/CTS handshake plus AIFS paid once per TXOP burst."""
        return timings.t_rts + timings.sifs + timings.t_cts + self.aifs(timings)


@dataclass(frozen=True)
class NetworkConfig:
    classes: tuple[AcClass, ...]
    timings: ProtocolTimings = TABLE1
    L: float = 8000.0
    m: int = DEFAULT_RETRY_LIMIT
    beacon: float = DEFAULT_BEACON_US

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if not self.classes:
            raise ConfigError("at least one access category is required", field="classes")
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate class names in {names}", field="classes")
        if not any(c.n >= 1 for c in self.classes):
            raise ConfigError("at least one class must have n >= 1", field="classes")
        if not self.L > 0:
            raise ConfigError(f"L must be positive, got {self.L!r}", field="global.L")
        if not isinstance(self.m, (int, np.integer)) or self.m < 0:
            raise ConfigError(f"m must be a non-negative integer, got {self.m!r}", field="global.m")
        if not self.beacon > 0:
            raise ConfigError(f"beacon must be positive, got {self.beacon!r}", field="global.beacon")

    @property
    def N(self) -> int:
        return len(self.classes)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.classes]

    @property
    def n(self) -> np.ndarray:
        return np.array([c.n for c in self.classes], dtype=float)

    @property
    def cw_min(self) -> np.ndarray:
        return np.array([c.cw_min for c in self.classes], dtype=float)

    @property
    def active(self) -> np.ndarray:
        """Boolean mask of classes with at least one station."""
        return np.array([c.n >= 1 for c in self.classes])

    @property
    def t_min(self) -> int:
        return min(c.t for c in self.classes if c.n >= 1)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigError(f"unknown access category {name!r}", field="ac") from None

    def replace_class(self, which: int | str, **changes) -> "NetworkConfig":
        i = self.index(which) if isinstance(which, str) else which
        classes = list(self.classes)
        classes[i] = dataclasses.replace(classes[i], **changes)
        return dataclasses.replace(self, classes=tuple(classes))

    def with_cw(self, cw: Sequence[float]) -> "NetworkConfig":
        cw = np.asarray(cw, dtype=float)
        classes = tuple(dataclasses.replace(c, cw_min=float(w)) for c, w in zip(self.classes, cw))
        return dataclasses.replace(self, classes=classes)

    def subset(self, mask: Sequence[bool]) -> "NetworkConfig":
        classes = tuple(c for c, keep in zip(self.classes, mask) if keep)
        return dataclasses.replace(self, classes=classes)


def burst_size(txop_limit: float, rate: float, L: float, timings: ProtocolTimings = TABLE1) -> int:
    """Packets that fit in a TXOP limit (us); a zero limit means one packet."""
    per_packet = L / rate + timings.t_packet_overhead
    return max(1, int(txop_limit // per_packet))


# 802.11e default TXOP limits for OFDM PHYs, in us.
TXOP_LIMITS = {"BK": 0.0, "BE": 0.0, "VI": 3008.0, "VO": 1504.0}
AIFSN = {"BK": 7, "BE": 3, "VI": 2, "VO": 2}


def edca_classes(
    n: dict[str, int],
    p: dict[str, float],
    r: dict[str, float],
    d: dict[str, float] | None = None,
    cw_min: dict[str, float] | None = None,
    L: float = 8000.0,
    timings: ProtocolTimings = TABLE1,
) -> tuple[AcClass, ...]:
    """The four standard ACs (BK, BE, VI, VO) with recommended AIFSN and TXOP."""
    d = d or {}
    cw_min = cw_min or {}
    out = []
    for name in ("BK", "BE", "VI", "VO"):
        out.append(AcClass(
            name=name, n=n[name], p=p[name], r=r[name], t=AIFSN[name],
            M=burst_size(TXOP_LIMITS[name], r[name], L, timings),
            d=d.get(name, math.inf), cw_min=cw_min.get(name, 15.0),
        ))
    return tuple(out)
