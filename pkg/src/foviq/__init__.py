"""Foveated model-observer detectability metrics for 2D and 3D search."""

from .detectability import (
    DPrimeCurve, Method, NoiseStats, analytic_dprime, dprime_curve, empirical_dprime, fourier_dprime,
)
from .estimators import FoveatedCHO, FoveatedNPWE, FoveatedSearchModel
from .exceptions import (
    DataError, DegenerateError, FoviqError, InvalidArgumentError, NumericalFailureError,
)
from .fit import ReferencePoint, neg_log_likelihood
from .pipeline import FigureOfMeritRecord, RunConfig, export_table, load_config, run_pipeline
from .stimulus import Modality, SignalKind, generate_noise_volume, insert_signal, make_signal
from .templates import EccentricityTemplateSet, ObserverModel, build_template_set
from .weighting import Scheme, WeightVector, aggregate_dprime

__version__ = "0.1.0"
