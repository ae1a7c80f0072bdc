"""
STL requirement mining over a semantic vector database of formulae.

This package provides:
- Formula, parse_formula, format_formula: the STL syntax tree and its grammar
- robustness, satisfies: quantitative and Boolean semantics
- build_reference_set, embed, kernel: the kernel embedding of formulae
- SemanticDb, build_db: the sharded formula index
- Miner, mine: GP-UCB mining over retrieved formulae
- StlMiningPipeline: facade used by the command-line entry point
"""

# Import main classes for easier access
from .formula import Formula, Interval
from .parser import FormulaSyntaxError, format_formula, parse_formula
from .semantics import EvaluationError, robustness, robustness_batch, satisfies
from .trajectories import LabeledDataset, Mu0Params, Trajectory, gen_linear_dataset
from .kernel import FDistParams, ReferenceSet, build_reference_set, embed, kernel
from .vector_db import QueryResult, SemanticDb, ShardKey, build_db
from .gp import GpConfig, gp_fit, gp_posterior
from .miner import BoConfig, Miner, MiningError, MiningResult, mine, objective_g
from .metrics import classify_metrics, cross_validate, retrieval_effectiveness
from .config import ConfigError, RunConfig, load_config
from .pipeline import StlMiningPipeline
