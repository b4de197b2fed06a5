"""Imitation from a single demonstration with a learned transition discriminator.

The surrogate reward of a step is the summed probability, under a learned
one-step reachability classifier, that the step's next state can reach each
state of the expert demonstration.
"""

from .agent import SoftQAgent
from .discriminator import OracleDiscriminator, TabularDiscriminator, TransitionDiscriminator
from .env import ChainEnv, ExpertDemo, GridWorld, default_demo, default_grid, load_grid
from .rewards import RewardConfig, RewardModel
from .trainer import TrainConfig, run_training

__version__ = "0.1.0"

__all__ = [
    "ChainEnv", "ExpertDemo", "GridWorld", "OracleDiscriminator", "RewardConfig", "RewardModel",
    "SoftQAgent", "TabularDiscriminator", "TrainConfig", "TransitionDiscriminator",
    "default_demo", "default_grid", "load_grid", "run_training",
]
