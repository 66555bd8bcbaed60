"""Delay metrics for downlink short-packet machine networks.

Closed-form transmission success probability, expected delay and delay
jitter under finite-blocklength rates, PPP interference and M/G/1 queuing,
together with an independent Monte Carlo / discrete-event validation path.
"""

from imdelay.core import (
    ConfigError,
    PathLossExponentTooSmall,
    ScenarioParams,
    dbm_to_watts,
    normalize_config,
    utilization,
    watts_to_dbm,
)
from imdelay.analytic import (
    AnalyticReport,
    DelayCdf,
    QuadratureError,
    UnstableQueue,
    analyze,
    delay_cdf,
    expected_delay,
    expected_queuing_delay,
    fbl_rate,
    jitter,
    q_function,
    q_inverse,
    success_probability,
    theta,
    truncated_moment,
)

__all__ = [
    "AnalyticReport",
    "ConfigError",
    "DelayCdf",
    "PathLossExponentTooSmall",
    "QuadratureError",
    "ScenarioParams",
    "UnstableQueue",
    "analyze",
    "dbm_to_watts",
    "delay_cdf",
    "expected_delay",
    "expected_queuing_delay",
    "fbl_rate",
    "jitter",
    "normalize_config",
    "q_function",
    "q_inverse",
    "success_probability",
    "theta",
    "truncated_moment",
    "utilization",
    "watts_to_dbm",
]

__version__ = "0.1.0"
