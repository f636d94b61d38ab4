"""Built-in benchmark problems."""
from .baseline import BaselineResult, subsampling_baseline, subsampling_rate
from .darcy import DarcySpec, darcy_problem, darcy_solve
from .gaussians import GaussianSpec, nested_gaussians, shifting_gaussians
from .kde import kde_mixture_proposal, silverman_bandwidth

__all__ = [
    "BaselineResult",
    "DarcySpec",
    "GaussianSpec",
    "darcy_problem",
    "darcy_solve",
    "kde_mixture_proposal",
    "nested_gaussians",
    "shifting_gaussians",
    "silverman_bandwidth",
    "subsampling_baseline",
    "subsampling_rate",
]
