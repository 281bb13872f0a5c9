"""Visual-token pruning on a toy decoder with FLOPS accounting and bias analysis."""
from .criteria import (Criterion, DensityScore, RetainedSet, ScoringContext, knn_scores,
                       score_attention, select, uniform_indices)
from .errors import (BudgetError, ConfigError, InputError, PruneError, StateError,
                     UndefinedValueError)
from .flops import FlopsReport, layer_cost, measured_multiply_accumulates, reduction_ratio
from .model import (ForwardTrace, ModelConfig, ModelWeights, TokenSequence, apply_rope,
                    forward, init_model, last_token_attention)
from .pruning import (PruneSchedule, PruneStage, apply_placement, make_preset, preset_fastv,
                      preset_feather, preset_pyramiddrop)

__version__ = "0.1.0"
