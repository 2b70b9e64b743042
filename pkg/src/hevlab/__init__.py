"""Energy management for a series-parallel hybrid: physics, a dynamic
programming baseline, and DQL / DDPG learners with an optional expert guard."""
__version__ = "0.1.0"
