"""Working-memory navigation engine on a deterministic gridworld.

Modules: ``gridworld`` (simulator, episodes, teacher), ``topomem`` (topological
map with forgetting), ``neural`` (GATv2 encoder, decoders, gradients),
``agent`` (navigation loop, policies, training), ``metrics`` and ``cli``.
"""
__version__ = "0.1.0"
