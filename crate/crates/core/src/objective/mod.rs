//! Masking, the shared k-means codebook and the masked-prediction loss.

pub mod codebook;
pub mod kmeans;
pub mod loss;
pub mod mask;

pub use codebook::{align_lengths, read_labels, write_labels, Codebook, LabelSequence};
pub use kmeans::{kmeans_fit, KMeansFit};
pub use loss::{masked_prediction_loss, LossOutput, ProjectionHead, DEFAULT_TEMPERATURE};
pub use mask::{apply_mask, make_mask, MaskConfig, MaskSpec};
