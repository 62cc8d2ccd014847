"""Interactive object retrieval over pre-extracted image descriptors."""

from .classifier import (
    Calibration,
    LinearModel,
    TrainConfig,
    score,
    score_dataset,
    score_image,
    train,
)
from .errors import (
    ConfigError,
    FormatError,
    HitlorError,
    LoadError,
    OracleError,
    QueryError,
    SamplingError,
    SessionStateError,
    TrainingError,
    ValidationError,
)
from .evaluation import (
    CoverageConfig,
    CoverageEvaluator,
    RunReport,
    average_precision,
    coverage,
    kmeans,
    normalized_auc,
    size_profile,
)
from .loop import (
    Feedback,
    QuerySpec,
    Session,
    SessionConfig,
    al_score,
    init_session,
    run_iteration,
    select_batch,
    session_from_checkpoint,
    session_to_checkpoint,
    simulated_oracle,
)
from .representation import (
    LabeledImage,
    LabeledSample,
    PatchOverlap,
    Strategy,
    build_training_samples,
    compute_overlap,
    fuse,
    inference_views,
    pooled_prototype,
)
from .store import (
    AnnotationStore,
    Dataset,
    DescriptorSet,
    GridSpec,
    ImageManifest,
    Instance,
    cell_rectangle,
    load_dataset,
    read_descriptors,
    write_descriptors,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
