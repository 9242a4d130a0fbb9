"""Source-free domain adaptation of a frozen classifier via adaptive
prototype memory, similarity pseudo-labels, set-distance confidence
filtering, and a progressively weighted dual-loss loop."""

__version__ = "0.1.0"

from .apm import (
    ClassEntropySet,
    PrototypeMemory,
    adaptive_threshold,
    build_entropy_sets,
    build_prototypes,
    maybe_refresh,
    update_memory,
)
from .data import (
    PretrainConfig,
    ShiftSpec,
    VectorDataset,
    batches,
    blobs_rot35,
    generate_shifted_pair,
    pretrain_source,
    read_dataset,
    write_dataset,
)
from .network import (
    LrSchedule,
    NetworkParams,
    SourceModel,
    TargetModel,
    forward,
    init_network,
    init_target_from_source,
    load_model,
    lr_at,
    save_model,
    sgd_step,
)
from .pseudo_label import (
    PseudoLabelRecord,
    class_similarity,
    confidence,
    hausdorff_to_top1,
    label_batch,
    modified_hausdorff_to_top2,
    source_pseudo_label,
    target_pseudo_label,
)
from .trainer import AdaptConfig, AdaptResult, StepMetrics, adapt, alpha_at, evaluate, total_loss
