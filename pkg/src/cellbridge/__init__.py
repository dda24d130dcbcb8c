"""cellbridge: distribution-to-distribution transport for cell perturbation
prediction.

The package pairs control and perturbed cells with minibatch entropic optimal
transport, trains two pinned stochastic bridges on those pairs (a continuous
one over expression values and a per-gene jump process over activation
states), and recombines their samples into predicted perturbation outcomes.
Evaluation is distributional: energy distance, gene-wise earth mover's
distance, and activation-probability correlation.

Everything is numpy/float64 and deterministic under explicit seeds. See the
demos/ directory for narrative walkthroughs of each capability and the
`cellbridge` CLI for end-to-end runs.
"""

from .conditioning import ConditionKey, Vocabulary
from .continuous import (BridgeConfig, drift_from_endpoint, interpolate,
                         masked_endpoint_loss, sample_endpoint)
from .data import (ExpressionDataset, SyntheticSpec, load_matrix,
                   log1p_normalize, save_matrix, select_hvg, split,
                   synth_generate)
from .discrete import (ctmc_step, discrete_interpolate, discretize,
                       posterior_loss, sample_activation)
from .metrics import (MetricsReport, activation_pcc, de_genes, e_distance,
                      emd_per_gene)
from .nn import MLP, OptimizerConfig, ParameterSet, optimizer_step
from .pairing import (CouplingPlan, SinkhornConfig, cost_matrix, epoch_pairing,
                      extract_pairs, sinkhorn)
from .training import (TrainConfig, evaluate, generate, load_checkpoint,
                       save_checkpoint, train)

__version__ = "0.1.0"

__all__ = [
    "BridgeConfig", "ConditionKey", "CouplingPlan", "ExpressionDataset",
    "MLP", "MetricsReport", "OptimizerConfig", "ParameterSet",
    "SinkhornConfig", "SyntheticSpec", "TrainConfig", "Vocabulary",
    "activation_pcc", "cost_matrix", "ctmc_step", "de_genes",
    "discrete_interpolate", "discretize", "drift_from_endpoint", "e_distance",
    "emd_per_gene", "epoch_pairing", "evaluate", "extract_pairs", "generate",
    "interpolate", "load_checkpoint", "load_matrix", "log1p_normalize",
    "masked_endpoint_loss", "optimizer_step", "posterior_loss",
    "sample_activation", "sample_endpoint", "save_checkpoint", "save_matrix",
    "select_hvg", "sinkhorn", "split", "synth_generate", "train",
]
