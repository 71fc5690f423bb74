"""Covariate-adjusted functional data analysis and MEWMA monitoring of daily profiles."""

from .archive import ModelArchive, load_model, save_model
from .dataset import DayProfile, FunctionalDataset, load_csv, write_csv
from .errors import (ArchiveError, CafdaError, ConfigError, DataError, DensityError, DomainError,
                     EmptyDataError, NumericError, ParseError, SpecError, ValidationError)
from .famm import FittedModel, ModelSpec, fit_stage1, fit_stage2, parse_term
from .fpca import EigenSystem
from .mewma import ChartConfig, calibrate_h4, estimate_arl, monitor_stream
from .pipeline import train
from .scores import day_scores, scores_by_blup, scores_by_integration

__version__ = "0.1.0"
