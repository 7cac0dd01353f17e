"""Dissipative hidden-state dynamics on weighted graphs and graph learning.

The package couples four layers:

* ``graph_core``    -- weighted graphs, discrete operators, Sobolev norms;
* ``dynamics``      -- the dissipative Schrodinger flow, its spin-space
                       counterparts, a fixed-step RK4 integrator, and
                       steady-state solving;
* ``sensitivity``   -- implicit differentiation of steady states;
* ``moduli``        -- stochastic descent over the stratified space of
                       weighted edge sets (add / prune / reweight);
* ``topo_metric``   -- ground-truth 1-manifold nets, Betti numbers, metric
                       distortion, teacher samplers;
* ``fann_model``    -- a three-layer model whose middle layer is the flow's
                       steady state, plus a dense baseline;
* ``cli``           -- reproducible command-line experiment drivers.
"""

from . import graph_core, dynamics, sensitivity, moduli, topo_metric, fann_model

__version__ = "0.1.0"

__all__ = [
    "graph_core",
    "dynamics",
    "sensitivity",
    "moduli",
    "topo_metric",
    "fann_model",
    "__version__",
]
