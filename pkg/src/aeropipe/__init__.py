"""aeropipe: a deterministic, file-backed sensor-fleet data pipeline.

Simulated device fleets feed an hourly DAG (clean, aggregate, merge
with weather, calibrate, fan out) whose outputs land in an embedded
commit log and a multi-dataset warehouse, with data-quality reports
computed from what was actually stored.
"""

from .broker import Broker, BrokerError
from .calibration import CalibrationError, CalibrationModel, calibrate, fit, forecast
from .metrics import (
    CalibrationStat,
    Counters,
    MetricsError,
    RateStat,
    availability,
    calibration_rate,
    parity,
    throughput,
)
from .model import (
    AeropipeError,
    CalibrationFlag,
    ConsolidatedRecord,
    DeviceInfo,
    ForecastRow,
    HourlyRecord,
    RawMeasurement,
    Registry,
    SiteMeta,
    WeatherRecord,
    format_hour,
    parse_hour,
)
from .orchestrator import (
    DagError,
    DagRunner,
    DagSpec,
    RunResult,
    Scheduler,
    SimClock,
    TaskSpec,
    TaskState,
    WallClock,
    render_tree,
)
from .pipeline import Pipeline, PipelineError, render_reports
from .scenario import Scenario, ScenarioError, load as load_scenario
from .sources import FleetProfile, derive_seed, generate_hour, generate_weather
from .transforms import aggregate, clean, merge
from .warehouse import DATASETS, UpsertResult, Warehouse, WarehouseError

__version__ = "0.1.0"

__all__ = [
    "AeropipeError",
    "Broker",
    "BrokerError",
    "CalibrationError",
    "CalibrationFlag",
    "CalibrationModel",
    "CalibrationStat",
    "ConsolidatedRecord",
    "Counters",
    "DATASETS",
    "DagError",
    "DagRunner",
    "DagSpec",
    "DeviceInfo",
    "FleetProfile",
    "ForecastRow",
    "HourlyRecord",
    "MetricsError",
    "Pipeline",
    "PipelineError",
    "RateStat",
    "RawMeasurement",
    "Registry",
    "RunResult",
    "Scenario",
    "ScenarioError",
    "Scheduler",
    "SimClock",
    "SiteMeta",
    "TaskSpec",
    "TaskState",
    "UpsertResult",
    "WallClock",
    "Warehouse",
    "WarehouseError",
    "WeatherRecord",
    "aggregate",
    "availability",
    "calibrate",
    "calibration_rate",
    "clean",
    "derive_seed",
    "fit",
    "forecast",
    "format_hour",
    "generate_hour",
    "generate_weather",
    "load_scenario",
    "merge",
    "parity",
    "parse_hour",
    "render_reports",
    "render_tree",
    "throughput",
    "__version__",
]
