"""Two-stage wind-speed forecasting: a directed-dynamic-graph delayed
regressive predictor per data resolution, corrected by a multi-resolution
sparse variational Gaussian process with uncertainty intervals."""

from .data import (FarmCatalog, WindRecords, ClusterAssignment,
                   ResolutionView, load_wind_csv, kmeans_cluster, aggregate,
                   pairwise_distances)
from .graph import (GraphSupport, DynamicGraph, TravelTimeTensor,
                    build_support, cardinal_bearings, extract_ddg,
                    estimate_travel_times)
from .stdr import StdrConfig, StdrParams, StdrRegressor, rolling_forecast
from .kriging import (Coord, KernelParams, SvgpState, SvgpConfig,
                      MultiResDataset, MultiResGPCorrector, fit_svgp,
                      predict_posterior, correct_predictions)
from .baselines import (VarParams, persistence_forecast, var_fit,
                        var_forecast, PersistenceForecaster, VarForecaster)
from .metrics import compute_mae, compute_coverage

__version__ = "0.1.0"
