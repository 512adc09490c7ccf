"""fairloop: simulation and learning laboratory for long-term fair
decision-making when outcome labels are revealed only after acceptance."""

__version__ = "0.1.0"

from .mdp import NotionKind, reward  # noqa: F401
