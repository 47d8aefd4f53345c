"""Desk-scale test bench for X-ray to synthetic-CT tuberculosis classification.

Pipeline stages: phantom corpus generation, volume synthesis from one or two
radiograph views, preprocessing, fusion classifiers, seeded training, and the
modality-ablation experiment matrix.
"""

__version__ = "0.1.0"

from .data_model import (
    CohortSplit,
    DiseaseLabel,
    ImagePlane2D,
    PatientRecord,
    Provenance,
    Split,
    Task,
    Volume3D,
    filter_cohort,
    load_manifest,
    save_manifest,
    select_views,
)
from .phantom import PhantomSpec, ProjectionAxis, build_phantom_corpus, drr_project, generate_phantom
from .preprocessing import SliceMode, central_slices, preprocess_ct, preprocess_xray_2d, preprocess_xray_fusion
from .classifiers import (
    ArchitectureKind,
    ClassifierModel,
    ModalityTag,
    ModelInput,
    bce_with_logits,
    build_classifier,
    fuse_inputs,
    predict,
)
from .ct_synthesis import (
    CTGenerator,
    DiskVolumeAdapter,
    GeneratorMode,
    GenTrainConfig,
    ToyCTGenerator,
    projection_consistency,
    synthesize_ct,
    train_toy_generator,
)
from .training import TrainConfig, TrainHistory, target_for_task, train
from .evaluation import (
    AccuracyMode,
    ExperimentConfig,
    ResultTable,
    accuracy,
    relative_improvement,
    render_report,
    run_experiment_matrix,
)
