"""Learned user-centric AP selection for cell-free massive MIMO downlinks.

Submodules:

``netmodel``    network geometry, large-scale fading and channel draws
``linkrate``    precoders, sum-rate and single-link rates
``clustering``  LSF and BSR serving-set heuristics
``mlp``         numpy multilayer perceptron with Adam training
``pipeline``    datasets, cross-validation, evaluation and timing
``config``      run configuration files
``store``       on-disk datasets, models and CSV reports
``cli``         the ``uccf`` command
"""

__version__ = "0.1.0"
