"""Scenario parameters, unit conversion and validation."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Any, Mapping

# Reference physical parameters, plus chosen defaults for BS density, machine
# count, error target, arrival rate and packet size.
DEFAULT_CONFIG: dict[str, Any] = {
    "tx_power_dbm": 24.0,
    "serving_distance_m": 10.0,
    "noise_psd_w_per_hz": 1e-10,
    "bandwidth_hz": 100e6,
    "n_machines": 50,
    "path_loss_exponent": 4.0,
    "bs_density_per_m2": 1e-5,
    "packet_bits": 100.0,
    "error_prob": 1e-5,
    "delay_threshold_s": 1e-3,
    "arrival_rate_pps": 100.0,
}

PACKET_BITS_RANGE = (20.0, 250.0)


class ConfigError(ValueError):
    """Invalid scenario configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class PathLossExponentTooSmall(ConfigError):
    def __init__(self, value: float):
        super().__init__(
            "path_loss_exponent",
            f"must be > 2 (got {value!r}); the interference term diverges at alpha <= 2",
        )


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def watts_to_dbm(watts: float) -> float:
    return 10.0 * math.log10(watts) + 30.0


def _positive(name: str, value: float) -> None:
    if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
        raise ConfigError(name, f"must be a finite positive number (got {value!r})")


def _non_negative(name: str, value: float) -> None:
    if not (isinstance(value, (int, float)) and math.isfinite(value) and value >= 0):
        raise ConfigError(name, f"must be a finite non-negative number (got {value!r})")


@dataclass(frozen=True)
class ScenarioParams:
    """All model symbols in SI units.

    ``bs_density_per_m2`` and ``arrival_rate_pps`` may be zero (noise-only
    channel, empty queue); every other physical quantity is strictly positive.
    """

    tx_power_w: float
    serving_distance_m: float
    noise_psd_w_per_hz: float
    bandwidth_hz: float
    n_machines: int
    path_loss_exponent: float
    bs_density_per_m2: float
    packet_bits: float
    error_prob: float
    delay_threshold_s: float
    arrival_rate_pps: float

    def __post_init__(self) -> None:
        for name in (
            "tx_power_w",
            "serving_distance_m",
            "noise_psd_w_per_hz",
            "bandwidth_hz",
            "packet_bits",
            "delay_threshold_s",
        ):
            _positive(name, getattr(self, name))
        _non_negative("bs_density_per_m2", self.bs_density_per_m2)
        _non_negative("arrival_rate_pps", self.arrival_rate_pps)
        n = self.n_machines
        if isinstance(n, bool) or not isinstance(n, int) or n < 1:
            raise ConfigError("n_machines", f"must be an integer >= 1 (got {n!r})")
        alpha = self.path_loss_exponent
        if not (isinstance(alpha, (int, float)) and math.isfinite(alpha)):
            raise ConfigError("path_loss_exponent", f"must be a finite number (got {alpha!r})")
        if alpha <= 2:
            raise PathLossExponentTooSmall(alpha)
        eps = self.error_prob
        if not (isinstance(eps, (int, float)) and 0 < eps < 1):
            raise ConfigError("error_prob", f"must lie in (0, 1) (got {eps!r})")

    @property
    def subband_hz(self) -> float:
        """Bandwidth of one machine's orthogonal sub-band, B_m / N_m."""
        return self.bandwidth_hz / self.n_machines

    @property
    def noise_power_w(self) -> float:
        """Noise power in one sub-band, N0 * B_m / N_m."""
        return self.noise_psd_w_per_hz * self.subband_hz

    def replace(self, **changes: Any) -> "ScenarioParams":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


FIELD_NAMES: tuple[str, ...] = tuple(f.name for f in dataclasses.fields(ScenarioParams))
CONFIG_KEYS: frozenset[str] = frozenset(FIELD_NAMES) | {"tx_power_dbm"}


def _as_float(name: str, value: Any) -> float:
    if isinstance(value, bool):
        raise ConfigError(name, f"must be a number (got {value!r})")
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(name, f"must be a number (got {value!r})") from None


def normalize_config(raw: Mapping[str, Any]) -> ScenarioParams:
    """Validate a key-value scenario description and convert it to SI units.

    Transmit power is given either as ``tx_power_w`` or ``tx_power_dbm``,
    never both. Unknown keys are rejected so that typos surface early.
    """
    unknown = sorted(set(raw) - CONFIG_KEYS)
    if unknown:
        raise ConfigError(unknown[0], "unknown configuration key")

    has_w = raw.get("tx_power_w") is not None
    has_dbm = raw.get("tx_power_dbm") is not None
    if has_w == has_dbm:
        raise ConfigError(
            "tx_power_w",
            "give exactly one of tx_power_w or tx_power_dbm",
        )
    if has_dbm:
        tx_power_w = dbm_to_watts(_as_float("tx_power_dbm", raw["tx_power_dbm"]))
    else:
        tx_power_w = _as_float("tx_power_w", raw["tx_power_w"])

    values: dict[str, Any] = {"tx_power_w": tx_power_w}
    for name in FIELD_NAMES:
        if name == "tx_power_w":
            continue
        if raw.get(name) is None:
            raise ConfigError(name, "missing")
        value = raw[name]
        if name == "n_machines":
            number = _as_float(name, value)
            if not number.is_integer():
                raise ConfigError(name, f"must be an integer (got {value!r})")
            values[name] = int(number)
        else:
            values[name] = _as_float(name, value)
    return ScenarioParams(**values)


def default_params(**overrides: Any) -> ScenarioParams:
    """The reference scenario with documented defaults, optionally overridden."""
    raw = dict(DEFAULT_CONFIG)
    if "tx_power_w" in overrides:
        raw.pop("tx_power_dbm")
    raw.update(overrides)
    return normalize_config(raw)


def utilization(p: ScenarioParams, mean_service_s: float) -> float:
    """Server utilization rho = lambda * E[T_t]; rho >= 1 means unstable."""
    if mean_service_s < 0:
        raise ValueError("mean_service_s must be non-negative")
    return p.arrival_rate_pps * mean_service_s


def is_stable(rho: float) -> bool:
    return rho < 1.0
