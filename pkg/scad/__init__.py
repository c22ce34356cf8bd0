"""
SCAD: scheduling and co-run aware simulation of autonomous-driving DAGs

HEFT scheduling, accelerator-assignment instantiation, layer-graph
partitioning and a discrete-event platform simulator for reproducing
deadline-miss experiments on heterogeneous embedded SoCs.
"""

__version__ = "1.0.0"
__author__ = "SCAD Tool"

from .models import Dag, Platform, PolicyConfig, Schedule
from .heft import schedule_heft
from .simulator import PlatformSimulator, simulate
from .instantiate import iterate_corun_schedule, schedule_by_instantiation
from .experiment import ExperimentRunner, diff_reports, run_experiment
from .database import ReportStore

__all__ = [
    "Dag",
    "Platform",
    "PolicyConfig",
    "Schedule",
    "schedule_heft",
    "PlatformSimulator",
    "simulate",
    "schedule_by_instantiation",
    "iterate_corun_schedule",
    "ExperimentRunner",
    "run_experiment",
    "diff_reports",
    "ReportStore",
]
