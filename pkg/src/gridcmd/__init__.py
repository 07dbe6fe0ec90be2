"""Language-commanded hierarchical gridworld agent.

Subpackages: grammar (sub-goal language), world (environment), expert
(demonstrations), models (networks + checkpoints), supervised (instruction
generator training), rl (controller PPO training), runtime (two-level agent
evaluation), service (HTTP session API), cli (entry point).
"""

__version__ = "0.1.0"
