"""Large-deviation toolkit for stochastically forced Galerkin Navier-Stokes models.

Modules
-------
galerkin
    Torus and generic Galerkin truncations, tensor export and import.
sde
    Exponential Euler integration, ensembles and trajectory storage.
empirical
    Occupation, windowed and periodized empirical measures and their metrics.
feynman_kac
    Feynman-Kac semigroups, pressure estimation and the Duhamel check.
dv_rate
    Rate functions by Legendre transform, resolvent calculus and entropy.
chain_oracle
    Exact finite-state computations used as reference values.
probes
    Coupling, hitting time, recurrence and moment probes.
runner, cli, verify
    Config-driven runs with manifests, the command line and acceptance checks.
"""

__version__ = "0.1.0"
