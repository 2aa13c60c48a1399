"""
cfsteer - Chance-constrained distribution steering with characteristic functions
"""

from .tools.scenario import load_scenario, parse_scenario
from .tools.solver import solve
from .tools.mc import simulate
