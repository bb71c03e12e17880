"""Conversational recommendation with multi-view hypergraph state encoding and dueling double DQN."""

__version__ = "0.1.0"
