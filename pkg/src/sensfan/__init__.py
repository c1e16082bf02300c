"""Sampling, dispatch and analysis for variance-based and local sensitivity
studies of computational models served as stateless HTTP functions."""

from .analysis import local_sensitivity, output_table, quadrature_moments, sobol_indices
from .campaign import (
    Campaign,
    Normal,
    ParameterSpec,
    RunRecord,
    RunState,
    Sample,
    Uniform,
    create_campaign,
    open_campaign,
)
from .executor import Backoff, ExecutorConfig, RunSummary, run
from .models import BuiltInModel, FunctionModel, SubprocessModel
from .sampling import (
    monte_carlo,
    perturbation_design,
    saltelli_design,
    stochastic_collocation,
    transform_point,
)
from .sobol import sobol_points
from .worker import MockCloudConfig, mock_cloud_serve, serve

__version__ = "0.1.0"
