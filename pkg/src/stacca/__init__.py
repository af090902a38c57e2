"""Graph-transformer actor-critic MARL with counterfactual advantages."""

from stacca.graph import Graph, GraphSpec, generate
from stacca.env import Action, EnvConfig, GlobalState, RewardConfig

__version__ = "0.1.0"

__all__ = [
    "Action",
    "EnvConfig",
    "GlobalState",
    "Graph",
    "GraphSpec",
    "RewardConfig",
    "generate",
]
