"""Planar character control through a spherical latent motion prior.

Pipeline stages: procedural motion clips -> PPO motion-tracking expert ->
distillation into a unit-sphere latent action space -> latent-driven
two-agent combat, plus the evaluation protocols (latent tracking,
random-rollout survival, sphere clustering).
"""

__version__ = "0.1.0"
