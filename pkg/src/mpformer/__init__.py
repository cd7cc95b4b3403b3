"""Multi-objective sequential retrieval with one shared transformer user tower.

Modules: ``numerics`` (autodiff), ``model`` (towers), ``objectives`` (losses),
``data`` (synthetic world), ``retrieval`` (indices, quotas, fusion),
``evaluation`` (metrics, cost model, probe), ``service`` and ``cli``.
"""

__version__ = "0.1.0"
