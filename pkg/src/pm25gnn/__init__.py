"""City-graph PM2.5 forecasting with knowledge-gated message passing.

Submodules: ``numerics`` (tape autodiff, RMSprop), ``geograph`` (city graph),
``featurize`` (feature panels, standardization), ``model`` (forecasters),
``train``, ``metrics``, ``synth`` (synthetic world and loop oracles),
``dataio`` (file formats) and ``cli``.
"""

__version__ = "0.1.0"
