"""Problem instances, algorithm configuration and the JSON scenario format.

Physical quantities are stored in the units a human writes them in (dBm, dB,
MHz, meters); linear SI values are exposed as cached properties so a scenario
round-trips through JSON field-exactly.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


class ScenarioError(ValueError):
    """Raised when a scenario or configuration violates an invariant."""


def dbm_to_w(value):
    return 10.0 ** (np.asarray(value, dtype=float) / 10.0) / 1000.0


def db_to_ratio(value):
    return 10.0 ** (np.asarray(value, dtype=float) / 10.0)


_CONVERSIONS = {
    "dBm": dbm_to_w,
    "dB": db_to_ratio,
    "dBm/Hz": dbm_to_w,
}


def convert(value, unit: str):
    """Convert a logarithmic quantity to linear (W, ratio or W/Hz)."""
    try:
        fn = _CONVERSIONS[unit]
    except KeyError:
        raise ValueError(f"unknown unit {unit!r}; expected one of {sorted(_CONVERSIONS)}") from None
    out = fn(value)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class ChannelParams:
    alpha: float = 2.5
    beta0_db: float = -30.0
    B1: float = -4.3224
    B2: float = 6.0750
    C1: float = 0.0
    C2: float = 1.0
    A1: float = 5.0
    A2: float = 2.0
    eps0: float = 0.05

    @property
    def beta0(self) -> float:
        return convert(self.beta0_db, "dB")

    def validate(self) -> None:
        if not 2.0 <= self.alpha <= 6.0:
            raise ScenarioError(f"path-loss exponent alpha={self.alpha} outside [2, 6]")
        if abs(self.C1 + self.C2 - 1.0) > 1e-12:
            raise ScenarioError(f"C1+C2 ≠ 1 (got {self.C1 + self.C2})")
        if self.C1 < 0 or self.C2 <= 0:
            raise ScenarioError("logistic coefficients need C1 >= 0 and C2 > 0")
        if not (self.B1 < 0 < self.B2):
            raise ScenarioError("logistic coefficients need B1 < 0 < B2")
        if not 0.0 < self.eps0 <= 0.1:
            raise ScenarioError(f"outage eps0={self.eps0} outside (0, 0.1]")
        if self.A1 < 0:
            raise ScenarioError("Rician coefficient A1 must be non-negative")


@dataclass(frozen=True)
class AlgoConfig:
    mu: float = 30.0
    grid_cell_m: float = 5.0
    L: int = 3
    eps: float = 1e-3
    seed: int = 0
    init_altitude_m: float = 50.0
    max_gs_iters: int = 50
    max_bcd_iters: int = 30
    max_outer_iters: int = 20
    max_sca_iters: int = 30
    random_select_n: int = 300
    resource_method: str = "exact"

    def validate(self, scenario: "Scenario | None" = None) -> None:
        if self.mu < 0:
            raise ScenarioError("mu must be >= 0")
        if not self.grid_cell_m > 0:
            raise ScenarioError("grid_cell_m must be > 0")
        if not self.eps > 0:
            raise ScenarioError("eps must be > 0")
        for name in ("L", "max_bcd_iters", "max_outer_iters", "max_sca_iters", "random_select_n"):
            if getattr(self, name) < 1:
                raise ScenarioError(f"{name} must be >= 1")
        if self.resource_method not in ("sca", "exact"):
            raise ScenarioError(f"resource_method must be 'sca' or 'exact', got {self.resource_method!r}")
        if self.max_gs_iters < 0:
            raise ScenarioError("max_gs_iters must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ScenarioError("seed must be a 64-bit unsigned integer")
        if scenario is not None:
            lo, hi = scenario.altitude_m
            if not lo <= self.init_altitude_m <= hi:
                raise ScenarioError(f"init altitude {self.init_altitude_m} outside [{lo}, {hi}]")
            x0, x1, y0, y1 = scenario.region
            for extent in (x1 - x0, y1 - y0, hi - lo):
                if extent > 0 and self.grid_cell_m > extent + 1e-9:
                    raise ScenarioError("grid cell larger than the deployment region")


def _default_region(src: np.ndarray, dst: np.ndarray) -> tuple[float, float, float, float]:
    pts = np.vstack([src, dst])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    side = float(max(hi - lo))
    centre = (lo + hi) / 2.0
    return (float(centre[0] - side / 2), float(centre[0] + side / 2),
            float(centre[1] - side / 2), float(centre[1] + side / 2))


@dataclass(frozen=True)
class Scenario:
    """Ground pairs, budgets and radio constants of one relaying instance."""

    src: tuple[tuple[float, float], ...]
    dst: tuple[tuple[float, float], ...]
    num_uavs: int
    bandwidth_mhz: float = 10.0
    noise_dbm_per_hz: float = -169.0
    snr_gap_db: float = 8.2
    uav_power_w: tuple[float, ...] = ()
    source_power_dbm: tuple[float, ...] = ()
    altitude_m: tuple[float, float] = (30.0, 150.0)
    channel: ChannelParams = field(default_factory=ChannelParams)
    region: tuple[float, float, float, float] = ()

    def __post_init__(self):
        src = tuple(tuple(float(c) for c in p) for p in self.src)
        dst = tuple(tuple(float(c) for c in p) for p in self.dst)
        object.__setattr__(self, "src", src)
        object.__setattr__(self, "dst", dst)
        k, m = len(src), int(self.num_uavs)
        object.__setattr__(self, "num_uavs", m)
        object.__setattr__(self, "uav_power_w", _broadcast(self.uav_power_w, m, 2.0))
        object.__setattr__(self, "source_power_dbm", _broadcast(self.source_power_dbm, k, 15.0))
        object.__setattr__(self, "altitude_m", tuple(float(h) for h in self.altitude_m))
        if not self.region and k:
            object.__setattr__(self, "region", _default_region(np.array(src), np.array(dst)))
        else:
            object.__setattr__(self, "region", tuple(float(r) for r in self.region))

    # sizes -----------------------------------------------------------------
    @property
    def K(self) -> int:
        return len(self.src)

    @property
    def M(self) -> int:
        return self.num_uavs

    # linear SI views -------------------------------------------------------
    @cached_property
    def src_xy(self) -> np.ndarray:
        return np.array(self.src, dtype=float).reshape(-1, 2)

    @cached_property
    def dst_xy(self) -> np.ndarray:
        return np.array(self.dst, dtype=float).reshape(-1, 2)

    @cached_property
    def bandwidth_hz(self) -> float:
        return self.bandwidth_mhz * 1e6

    @cached_property
    def noise_w_per_hz(self) -> float:
        return convert(self.noise_dbm_per_hz, "dBm/Hz")

    @cached_property
    def snr_gap(self) -> float:
        return convert(self.snr_gap_db, "dB")

    @cached_property
    def source_power(self) -> np.ndarray:
        return np.atleast_1d(convert(np.array(self.source_power_dbm), "dBm"))

    @cached_property
    def uav_power(self) -> np.ndarray:
        return np.array(self.uav_power_w, dtype=float)

    @cached_property
    def gamma0(self) -> float:
        """Reference SNR gain beta0 / (N0 B Gamma)."""
        return self.channel.beta0 / (self.noise_w_per_hz * self.bandwidth_hz * self.snr_gap)

    @property
    def h_min(self) -> float:
        return self.altitude_m[0]

    @property
    def h_max(self) -> float:
        return self.altitude_m[1]

    def validate(self) -> None:
        if self.K < 1:
            raise ScenarioError("need at least one source-destination pair (K >= 1)")
        if len(self.dst) != self.K:
            raise ScenarioError("every pair needs both a source and a destination")
        if self.M < 1:
            raise ScenarioError("need at least one UAV (M >= 1)")
        lo, hi = self.altitude_m
        if not lo > 0:
            raise ScenarioError("H_min must be > 0")
        if lo > hi:
            raise ScenarioError(f"altitude range inverted: [{lo}, {hi}]")
        if not self.bandwidth_mhz > 0:
            raise ScenarioError("bandwidth must be > 0")
        if self.snr_gap_db < 0:
            raise ScenarioError("SNR gap must be >= 0 dB (Gamma >= 1)")
        if min(self.uav_power_w) <= 0:
            raise ScenarioError("all UAV powers must be > 0")
        if len(self.uav_power_w) != self.M or len(self.source_power_dbm) != self.K:
            raise ScenarioError("power lists must have one entry per UAV / per source")
        for name in ("bandwidth_mhz", "noise_dbm_per_hz", "snr_gap_db"):
            if not math.isfinite(getattr(self, name)):
                raise ScenarioError(f"{name} must be finite")
        self.channel.validate()
        x0, x1, y0, y1 = self.region
        if not (x0 <= x1 and y0 <= y1):
            raise ScenarioError("region bounds inverted")
        pts = np.vstack([self.src_xy, self.dst_xy])
        tol = 1e-9 * max(1.0, abs(x1 - x0), abs(y1 - y0))
        inside = ((pts[:, 0] >= x0 - tol) & (pts[:, 0] <= x1 + tol)
                  & (pts[:, 1] >= y0 - tol) & (pts[:, 1] <= y1 + tol))
        if not inside.all():
            raise ScenarioError("ground node outside the deployment region")

    def with_(self, **changes) -> "Scenario":
        return dataclasses.replace(self, **changes)

    def digest(self) -> str:
        return hashlib.sha256(dumps_scenario(self).encode()).hexdigest()[:16]


def _broadcast(value, n: int, default: float) -> tuple[float, ...]:
    if value is None or (not np.isscalar(value) and len(value) == 0):
        return (float(default),) * n
    if np.isscalar(value):
        return (float(value),) * n
    return tuple(float(v) for v in value)


# ---------------------------------------------------------------------------
# JSON I/O

_CHANNEL_KEYS = ("alpha", "B1", "B2", "C1", "C2")
_ALGO_KEYS = {
    "mu": "mu", "grid_cell_m": "grid_cell_m", "L": "L", "eps": "eps", "seed": "seed",
    "init_altitude_m": "init_altitude_m", "max_gs_iters": "max_gs_iters",
    "max_bcd_iters": "max_bcd_iters", "max_outer_iters": "max_outer_iters",
    "max_sca_iters": "max_sca_iters", "random_select_n": "random_select_n",
    "resource_method": "resource_method",
}


def scenario_from_dict(doc: dict) -> tuple[Scenario, AlgoConfig]:
    try:
        pairs = doc["pairs"]
        src = [p["src"] for p in pairs]
        dst = [p["dst"] for p in pairs]
        ch = dict(doc.get("channel", {}))
        chan_kwargs = {k: float(ch[k]) for k in _CHANNEL_KEYS + ("A1", "A2", "eps0") if k in ch}
        if "beta0_db" in ch:
            chan_kwargs["beta0_db"] = float(ch["beta0_db"])
        unknown = set(ch) - set(chan_kwargs)
        if unknown:
            raise ScenarioError(f"unknown channel keys: {sorted(unknown)}")
        kwargs = dict(src=src, dst=dst, num_uavs=int(doc["num_uavs"]), channel=ChannelParams(**chan_kwargs))
        for key in ("bandwidth_mhz", "noise_dbm_per_hz", "snr_gap_db"):
            if key in doc:
                kwargs[key] = float(doc[key])
        if "uav_power_w" in doc:
            kwargs["uav_power_w"] = doc["uav_power_w"]
        if "source_power_dbm" in doc:
            kwargs["source_power_dbm"] = doc["source_power_dbm"]
        if "altitude_m" in doc:
            kwargs["altitude_m"] = tuple(doc["altitude_m"])
        if "region" in doc:
            kwargs["region"] = tuple(doc["region"])
        scenario = Scenario(**kwargs)
        algo_doc = dict(doc.get("algo", {}))
        unknown = set(algo_doc) - set(_ALGO_KEYS)
        if unknown:
            raise ScenarioError(f"unknown algo keys: {sorted(unknown)}")
        int_keys = {"L", "seed", "max_gs_iters", "max_bcd_iters", "max_outer_iters",
                    "max_sca_iters", "random_select_n"}
        str_keys = {"resource_method"}
        algo = AlgoConfig(**{_ALGO_KEYS[k]: (int(v) if k in int_keys else str(v) if k in str_keys else float(v))
                             for k, v in algo_doc.items()})
    except (KeyError, TypeError, IndexError) as exc:
        raise ScenarioError(f"malformed scenario: {exc!r}") from exc
    scenario.validate()
    algo.validate(scenario)
    return scenario, algo


def scenario_to_dict(scenario: Scenario, algo: AlgoConfig | None = None) -> dict:
    ch = scenario.channel
    doc = {
        "pairs": [{"src": list(s), "dst": list(d)} for s, d in zip(scenario.src, scenario.dst)],
        "num_uavs": scenario.num_uavs,
        "bandwidth_mhz": scenario.bandwidth_mhz,
        "noise_dbm_per_hz": scenario.noise_dbm_per_hz,
        "snr_gap_db": scenario.snr_gap_db,
        "uav_power_w": list(scenario.uav_power_w),
        "source_power_dbm": list(scenario.source_power_dbm),
        "altitude_m": list(scenario.altitude_m),
        "region": list(scenario.region),
        "channel": {"alpha": ch.alpha, "beta0_db": ch.beta0_db, "B1": ch.B1, "B2": ch.B2,
                    "C1": ch.C1, "C2": ch.C2, "A1": ch.A1, "A2": ch.A2, "eps0": ch.eps0},
    }
    if algo is not None:
        doc["algo"] = dataclasses.asdict(algo)
    return doc


def load_scenario(text: str | bytes) -> tuple[Scenario, AlgoConfig]:
    """Parse, default and validate a JSON scenario document."""
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"parse error: {exc}") from exc
    if not isinstance(doc, dict):
        raise ScenarioError("parse error: top-level JSON value must be an object")
    return scenario_from_dict(doc)


def dumps_scenario(scenario: Scenario, algo: AlgoConfig | None = None) -> str:
    return json.dumps(scenario_to_dict(scenario, algo), indent=2)


def reference_defaults() -> dict:
    """Radio and budget constants of the reference simulation setup."""
    return {
        "bandwidth_mhz": 10.0, "noise_dbm_per_hz": -169.0, "snr_gap_db": 8.2,
        "uav_power_w": 2.0, "source_power_dbm": 15.0, "altitude_m": [30.0, 150.0],
        "channel": {"alpha": 2.5, "beta0_db": -30.0, "B1": -4.3224, "B2": 6.0750, "C1": 0.0, "C2": 1.0},
    }


def random_scenario(K: int, M: int, seed: int, side: float = 300.0, **overrides) -> Scenario:
    """K pairs dropped uniformly in a side x side square, reference radio constants."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0.0, side, size=(2 * K, 2))
    defaults = reference_defaults()
    kwargs = dict(
        src=pts[:K].tolist(), dst=pts[K:].tolist(), num_uavs=M,
        bandwidth_mhz=defaults["bandwidth_mhz"], noise_dbm_per_hz=defaults["noise_dbm_per_hz"],
        snr_gap_db=defaults["snr_gap_db"], uav_power_w=defaults["uav_power_w"],
        source_power_dbm=defaults["source_power_dbm"], altitude_m=tuple(defaults["altitude_m"]),
        channel=ChannelParams(**defaults["channel"]), region=(0.0, side, 0.0, side),
    )
    kwargs.update(overrides)
    sc = Scenario(**kwargs)
    sc.validate()
    return sc
