"""Latent video world model on a desk-scale budget.

A frozen frame encoder maps videos to patch-feature grids; a cross-attention
predictor learns to forecast future features with teacher forcing; action
blocks graft control onto the pre-trained predictor; a CEM planner optimizes
action sequences directly in latent space.
"""

__version__ = "0.1.0"
