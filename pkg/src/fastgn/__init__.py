"""Fast Gauss-Newton curvature for softmax cross-entropy.

The per-example softmax loss is rewritten through the true-vs-rest margin
``s = logsumexp(z[j != k]) - z[k]``; keeping only the curvature of that
scalar gives a rank-one-per-example Gauss-Newton matrix whose damped system
is solved in the ``b``-dimensional row space with margin JVPs and VJPs.
"""

from .margin import BatchMargins, MarginStats, batch_margins, logit_gradient, loss, margin_stats, softplus
from .oracle import (
    TraceTriple,
    decomposition_residual,
    fgn_dense,
    ggn_dense,
    trace_decomposition,
)
from .rowspace import (
    BatchSystem,
    CGDivergenceError,
    ResidualBoundError,
    RowOperator,
    SolveReport,
    adjoint_discrepancy,
    cg_solve,
    conjugate_gradient,
    residual_transfer,
)
from .affine import FeatureBatch, HeadParams, affine_row_operator, affine_system, head_loss
from .optim import OptimizerConfig, TrainingLog, adam_step, fgn_step, sgn_step, train
from .cache import CacheFormatError, make_features, read_feature_cache, write_feature_cache

__version__ = "0.1.0"
