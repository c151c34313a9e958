"""Global + local token-graph networks for cross-domain short-text
classification, with a self-contained reverse-mode autodiff core."""

from .autodiff import (
    AdamState,
    Tape,
    Tensor,
    adam_step,
    backward,
    bce_with_logits,
    classification_loss,
    concat,
    segment_softmax,
    sigmoid,
    softmax_cross_entropy,
    spmm,
)
from .corpus import (
    DomainData,
    EmbeddingTable,
    Instance,
    LabelMap,
    SyntheticSpec,
    Vocabulary,
    build_vocab,
    encode_instances,
    generate_synthetic_pair,
    instances_from_records,
    load_dataset,
    load_embeddings,
    subsample_train,
    tokenize,
)
from .global_graph import (
    CooccurrenceCounts,
    GcnParams,
    TokenGraph,
    build_token_graph,
    count_cooccurrences,
    edge_weight,
    gcn_forward,
    load_token_graph,
    save_token_graph,
)
from .instance_graph import (
    GatLayerParams,
    GatParams,
    InstanceGraph,
    build_instance_graph,
    gat_forward,
    gat_layer,
)
from .metrics import f1_suite
from .model import (
    ModelConfig,
    combine,
    bilstm_classify,
    count_parameters,
    forward_loss,
    init_params,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from .sparse import SparseMatrix
from .training import (
    DivergenceError,
    EarlyStopper,
    TrainConfig,
    evaluate,
    grid_search,
    run_experiment,
    train,
)

__version__ = "0.1.0"
