"""Numerical experiments: box triaxial calibration and grouser plate test."""
from .plate import PlateMetrics, PlateTestConfig, extract_metrics, run_plate_test
from .triaxial import TriaxialConfig, TriaxialResult, mohr_coulomb_fit, run_triaxial, run_single
