//! End-to-end enhancement workflow: data preparation, tuning, training,
//! persistence, enhancement and evaluation.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod model_file;
pub mod report;

pub use commands::{
    autotune_datasets, cmd_autotune, cmd_enhance, cmd_evaluate, cmd_mix, cmd_train,
    enhance_waveform, evaluate_masks, predict_split, train_datasets, train_report, AutotuneRun,
    EvalRun, TrainOutputs, TrainRun,
};
pub use config::{CorpusSource, FeatureParams, MaskKind, NoiseSetting, RunConfig, WindowName};
pub use dataset::{
    build_dataset, build_dataset_with, build_from_corpus, load_corpus, split_utterances, Dataset,
    Datasets, MixtureItem, Split,
};
pub use model_file::{model_id, ModelFile};
