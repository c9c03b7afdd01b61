//! Annotation ingestion, the online sampler, synthetic scenes and batching.

mod batch;
mod dataset;
pub mod image_io;
pub mod sampler;
pub mod synth;

pub(crate) use batch::mix64;
pub use batch::{substream, to_model_input, Batch, BatchIter, SamplingMode};
pub use dataset::{
    annotation_file, load_annotations, write_dataset, AnnotationRecord, Dataset, Entry,
    ResolutionMode,
};
pub use sampler::{
    draw_crop, online_sample, pick_scale, sample_for_crop, Crop, SamplerConfig, TrainSample,
};
pub use synth::{synth_dataset, synth_scene, write_synth_dataset, SceneParams, SynthDatasetParams};
