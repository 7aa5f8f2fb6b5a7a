"""banditlab — a simulation laboratory for K-armed linear contextual bandits."""

__version__ = "0.1.0"
