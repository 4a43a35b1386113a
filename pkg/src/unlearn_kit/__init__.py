"""Unlearning toolkit for overparameterized models.

Exact minimum-complexity unlearning solvers for linear models, deep linear
networks, and two-layer perceptrons, the MinNorm-OG iterative unlearner with
the standard loss-gradient baselines, and a seeded benchmark harness for the
desk-scale experiment suites.

Submodules: ``numkit`` (dense linear algebra), ``models`` (networks,
gradients, AdamW), ``exact`` (closed-form solvers), ``unlearners`` (iterative
methods), ``tasks`` (experiment generators and metrics), ``cli`` and
``verify`` (harness).
"""

__version__ = "0.1.0"
