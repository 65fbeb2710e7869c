"""Random-forest regression, permutation importance and feature selection
for descriptor-based retention modelling."""

__version__ = "0.1.0"

from .boruta import BorutaParams, BorutaResult, add_shadows, boruta_run, important_set
from .data import (BagSample, Dataset, DatasetError, DegenerateDataError, SplitPair,
                   SyntheticSpec, bootstrap, generate_synthetic, load_csv, parse_csv,
                   split_2to1, write_csv)
from .forest import (Forest, ForestParams, ImportanceReport, ModelMismatchError, fit_forest,
                     oob_predict, oob_r2, permutation_importance, predict, r2_score, test_r2)
from .protocol import (ProtocolConfig, RepetitionRecord, StabilityTable, linear_baseline,
                       run_protocol, stability_table)
from .select import (ConsensusParams, SelectionOutcome, consensus, consensus_curve, top_n)
from .tree import RegressionTree, SplitCandidate, TreeParams, best_split, fit_tree, predict_tree

__all__ = [
    "BagSample", "BorutaParams", "BorutaResult", "ConsensusParams", "Dataset", "DatasetError",
    "DegenerateDataError", "Forest", "ForestParams", "ImportanceReport", "ModelMismatchError",
    "ProtocolConfig", "RegressionTree", "RepetitionRecord", "SelectionOutcome", "SplitCandidate",
    "SplitPair", "StabilityTable", "SyntheticSpec", "TreeParams", "add_shadows", "best_split",
    "boruta_run", "bootstrap", "consensus", "consensus_curve", "fit_forest", "fit_tree",
    "generate_synthetic", "important_set", "linear_baseline", "load_csv", "oob_predict", "oob_r2",
    "parse_csv", "permutation_importance", "predict", "predict_tree", "r2_score", "run_protocol",
    "split_2to1", "stability_table", "test_r2", "top_n", "write_csv",
]
