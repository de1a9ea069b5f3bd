//! Task-vector model merging with layer-wise pruning.
//!
//! Task vectors (fine-tuned minus pre-trained weights) are scored layer by
//! layer by how far each task deviates from the cross-task mean. Layers that
//! no task finds salient are reverted to the pre-trained weights before the
//! task vectors are merged with task arithmetic, Ties, AdaMerging or PCB
//! coefficients.

pub mod cli;
pub mod error;
pub mod merge;
pub mod rng;
pub mod saliency;
pub mod task_vector;
pub mod tensor_store;
pub mod theory;

pub use error::{Error, Result};
pub use merge::{LambdaSpec, LambdaTable, Mask, MergeMethod, MergeRecipe};
pub use saliency::{LayerMaskSet, ParameterMask, SaliencyMatrix, SharedMask};
pub use task_vector::TaskVector;
pub use tensor_store::{
    load_checkpoint, save_checkpoint, validate_compatibility, Checkpoint, Dtype, LayerCatalog,
    LayerInfo, Tensor,
};
