"""Scenario-driven command-line front end."""

from .main import main, run_scenario
from .scenario import Scenario, lex, load_scenario, parse_scenario
from .systext import parse_system, system_to_text

__all__ = ["Scenario", "lex", "load_scenario", "main", "parse_scenario", "parse_system",
           "run_scenario", "system_to_text"]
