"""Preference-guided bridge diffusion for shade-artifact suppression.

Library + CLI: symmetric bridge schedules, a reward/time-conditioned score
network with exact gradients, guided few-step sampling, tournament-based
preference collection, synthetic phantom data, and evaluation reports.
"""

__version__ = "0.1.0"
