//! Experiment orchestration: configuration, the mixed-batch training loop,
//! checkpoints, evaluation, the variant ablation and artifact emission.

mod checkpoint;
mod commands;
mod config;
mod data;
mod eval;
mod plot;
mod train;

pub use checkpoint::{checkpoint_name, Checkpoint, CheckpointHeader};
pub use config::{
    DistillGating, EvalConfig, ExperimentConfig, FacePoolSpec, Overrides, RunStamp, Seeds, TrainConfig, OUTPUT_ROOT_ENV,
};
pub use data::{embed_samples, face_pool, world_teacher, Dataset, Sample};
pub use eval::{evaluate_embeddings, EvalReport, ProtocolReport, RetrievalRow};
pub use train::{batch_hash, run_training, NanDump, StepRecord, TrainOptions, Trainer, LOSS_LOG};
pub use commands::{
    cmd_ablate, cmd_eval, cmd_pipeline, cmd_plot_roc, cmd_synth, cmd_train, write_eval, AblationRow, AblationTable,
    EvalArtifacts, PipelineReport, PipelineStage, SynthArtifacts, SynthReport, TrainArtifacts, TrainSummary,
    FRAMES_MANIFEST, MANIFEST, VIDEO_DIR, WORLD_DIR,
};
pub use plot::roc_svg;
