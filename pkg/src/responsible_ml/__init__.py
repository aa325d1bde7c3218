"""Toy-scale implementations of data-centric responsible-AI techniques.

Modules: :mod:`dataset`, :mod:`metrics`, :mod:`model`, :mod:`fairbatch`,
:mod:`slicetuner`, :mod:`slicefinder`, :mod:`mlclean`, :mod:`frtrain` and
the :mod:`cli` front end.
"""

from .dataset import (DataError, Dataset, Example, FeatureSpec, Slice, SlicePredicate, apply_slice,
                      gen_synthetic, load_csv, make_fig2_fixture, make_poisoned_fig2_fixture,
                      make_table1_fixture, poison_label_flip, SyntheticParams, write_csv)
from .fairbatch import FairBatchConfig, make_fairbatch_sampler
from .frtrain import FRConfig, evaluate_tradeoff, train_frtrain
from .metrics import (demographic_parity, equalized_error_rate_gap, equalized_odds_disparity,
                      fairness_report, FairnessReport)
from .mlclean import CleanConfig, mlclean_pipeline, reweigh_for_dp, sanitize_and_clean
from .model import (LinearModel, TrainConfig, TrainingError, fit_threshold_fair,
                    fit_threshold_max_accuracy, predict, train_sgd)
from .plotdata import emit_plot_data
from .slicefinder import SearchConfig, decision_tree_search, find_problematic, lattice_search
from .slicetuner import (AcquisitionProblem, LearningCurve, PlannerConfig, fit_learning_curve,
                         optimize_allocation, plan_acquisition)

__version__ = "0.1.0"
