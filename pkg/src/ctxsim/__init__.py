"""Context-sensitive similarity learning from fixed embeddings."""

from .analysis import RSM, ProjectionCoords, compute_rsm, pca_project
from .config import DEFAULTS, NumericConfig
from .dataset import (
    ContextTriplet,
    TrialRecord,
    expand_to_triplets,
    filter_class_collisions,
    parse_trials,
    parse_triplets,
    permute_triplets,
    stratified_split,
)
from .embedding_store import EmbeddingStore, l2_normalize, load_embeddings, write_embeddings
from .evaluation import (
    BootstrapResult,
    PredictionVector,
    UpperBoundResult,
    accuracy,
    evaluate_model,
    paired_bootstrap,
    upper_bound,
)
from .model import (
    ModelParams,
    TripletProbabilities,
    baseline_predict,
    cit_forward,
    context_matrix,
    init_params,
    load_checkpoint,
    predict_oddball,
    save_checkpoint,
    similarity,
    triplet_probs,
)
from .synthetic import SyntheticSpec, bayes_accuracy, gen_ground_truth, sample_dataset
from .training import (
    GradientSet,
    TrainConfig,
    TrainHistory,
    batch_gradients,
    batch_loss,
    grid_search,
    sgd_step,
    train,
)

__version__ = "0.1.0"
