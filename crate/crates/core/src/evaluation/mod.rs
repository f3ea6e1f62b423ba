//! Measurement tools: position MIC, KNN segmentation with mIoU, k-means
//! cluster maps, similarity and norm maps, and the reconstruction variants
//! used for ablations.

mod kmeans;
mod maps;
mod mic;
mod segmentation;

pub use kmeans::{kmeans, KMeansResult};
pub use maps::{ablation_variants, norm_prominence, similarity_map, AblationVariants};
pub use mic::{feature_position_mic, mic_scalar, MicConfig, PositionMic};
pub use segmentation::{build_memory_bank, knn_segment, miou, Metric, MiouReport, SegMemoryBank};
