"""MADDPG agents with an opponent model that tracks the opponent's learning."""

__version__ = "0.1.0"
