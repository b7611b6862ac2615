"""Bayesian hierarchical B-spline estimation of neonatal mortality rates.

The package fits country-specific trajectories of the ratio of neonatal to
non-neonatal under-five deaths with a penalized cubic B-spline regression,
shares information across countries through hierarchical priors, and turns
posterior draws into neonatal mortality rate estimates with credible
intervals.  Submodules:

- ``splines``     knot grids, cubic B-spline bases, difference reparameterization
- ``model``       parameters, transforms, likelihood and prior densities
- ``ingest``      CSV loading, error imputation, VR preprocessing
- ``sampler``     Metropolis-within-Gibbs engine and convergence diagnostics
- ``estimates``   projection, no-data countries, NMR trajectories and summaries
- ``validation``  out-of-sample validation harness
- ``synth``       synthetic data generation for testing
- ``cli``         command-line pipeline
"""

__version__ = "0.1.0"
