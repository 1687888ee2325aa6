"""Desk-scale lab for an interleaved perception/decision transformer agent
trained with PPO, contrastive alignment and imitation on a gridworld."""

__version__ = "0.1.0"
