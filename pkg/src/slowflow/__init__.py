"""Graph-network emulator for slow-changing gridded fields on the sphere.

Modules: ``tensor`` (reverse-mode autodiff), ``graph`` (icosphere and
grid/mesh edges), ``model`` (graph network), ``cascade`` (stacked residual
correction and rollout), ``data`` (synthetic generator and preprocessing),
``training``, ``metrics`` and ``cli``.
"""

__version__ = "0.1.0"
