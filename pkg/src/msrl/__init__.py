"""Multi-stage reinforcement learning for generative preference models, at desk scale."""

__version__ = "0.1.0"
