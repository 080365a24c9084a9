"""Desk-scale laboratory for anchored prompt tuning on task-imbalanced
continual streams: synthetic long-tail task generators, a frozen miniature
encoder with trainable prompts, two-phase anchored training, and the
stability/plasticity evaluation stack."""

from .backbone import (
    BackboneConfig,
    ClassifierHead,
    FrozenBackbone,
    forward_with_prompt,
    init_backbone,
    tokenize,
)
from .dap import (
    AnchorState,
    ContinualState,
    DapConfig,
    MODES,
    compute_lambda,
    run_continual,
    train_phase1,
    train_phase2,
    update_stabilizing_anchor,
)
from .metrics import (
    AccuracyMatrix,
    evaluate,
    linear_probe,
    plasticity_forgetting,
    summary_accuracies,
)
from .streams import (
    StreamSpec,
    TaskRecord,
    TaskStream,
    generate_synthetic,
    load_stream,
    longtail_counts,
    order_tasks,
    partition_and_balance,
    save_stream,
)

__version__ = "0.1.0"
