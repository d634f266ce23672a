"""Spiking fuzzy Q-network: population-coded fuzzy encoding/decoding for
multi-modal deep spiking Q-learning, with a desk-scale highway simulator
and DQN training harness."""

__version__ = "0.1.0"
