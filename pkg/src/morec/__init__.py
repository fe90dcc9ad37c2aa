"""Multi-objective recommender testbed.

Subpackages:
    autodiff   reverse-mode engine every trainable component runs on
    simenv     synthetic multi-objective consumer environment
    encoder    attention + time-gated recurrent consumer-state encoder
    predictor  per-objective hypernetwork mixture and shared-bottom nets
    policy     contextual actor-critic for dynamic objective weighting
    pipeline   recommendation loop, baselines, ablations
    analytics  Pareto math, correlation studies, robust OLS
    experiments  frontier / sensitivity / timing protocols
    config     experiment file parsing
    cli        command-line entry point
"""

__version__ = "0.1.0"
