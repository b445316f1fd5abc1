"""Alternating-network resets for continual plasticity, with SAC/PPO baselines."""
__version__ = "0.1.0"
