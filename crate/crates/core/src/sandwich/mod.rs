//! Sandwich training: a replaced block is refined together with low-rank
//! adapters on its nearest unpruned neighbours, against teacher outputs at
//! the end of the span. Also hosts the progressive pipeline and the
//! component transplant between pruning ratios.

mod lora;
mod pipeline;
mod plan;
mod train;

pub use lora::{
    attach_lora, attach_or_reuse_lora, trainable_keys, trainable_param_count, AttachReport,
    LoraConfig, LORA_INIT_STD,
};
pub use pipeline::{
    progressive_prune, progressive_sweep, resume_prune, selection_order, transplant_components,
    Ordering, PipelineConfig, ReplacementKind,
};
pub use plan::{plan_sandwich, plan_sandwich_width, SandwichPlan, WIDTHS};
pub use train::{
    collect_sandwich_data, train_sandwich, InputSource, SandwichDataset, SandwichTrainConfig,
    TrainOutcome,
};
