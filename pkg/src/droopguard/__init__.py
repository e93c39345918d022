"""droopguard: feeder simulation, droop-curve attack scenarios, and PPO mitigation."""

__version__ = "0.1.0"

from .feeder import FeederModel, PowerFlowSolution, load_feeder, solve_power_flow  # noqa: F401
