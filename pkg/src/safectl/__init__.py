"""Safe learning control toolkit: dynamics, MPC, GP residual learning, safety filters, RL baselines."""

__version__ = "0.1.0"
