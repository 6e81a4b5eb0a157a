//! Virtual-identity prototype training, dataset property metrics and an
//! identity leakage audit for face-embedding corpora.
//!
//! ```
//! use vidproto_core::{generate_synthetic_clusters, train_stage1, TrainRunConfig};
//!
//! let data = generate_synthetic_clusters(5, 4, 8, 0.1, 1).unwrap();
//! let cfg = TrainRunConfig { virtual_ids: 3, batch_real: 8, iterations: 20, ..TrainRunConfig::default() };
//! let report = train_stage1(&data, &cfg).unwrap();
//! assert_eq!(report.bank.len(), 8);
//! ```

pub mod arcface;
pub mod config;
pub mod datagen;
pub mod embedding;
pub mod error;
pub mod io;
pub mod kernel;
pub mod leakage;
pub mod metrics;
pub mod surrogate;
pub mod trainer;

pub use arcface::gradcheck::{gradient_check, GradCheckInstance};
pub use arcface::{arcface_forward_backward, ArcFaceConfig, LossResult};
pub use config::RunConfig;
pub use datagen::{generate_synthetic_clusters, random_unit_vectors};
pub use embedding::{class_centers, cosine_block, normalize_rows, ClassCenterSet, EmbeddingVector, LabeledEmbeddingSet, Matrix};
pub use error::{Error, Result};
pub use io::Checkpoint;
pub use leakage::{leakage_audit, leakage_audit_with, leakage_verdict, AuditOptions, LeakageReport, Verdict};
pub use metrics::{
    class_consistency, class_diversity, class_separability, property_report, similarity_distributions, Histogram,
    PropertyReport, QualityScoreSet,
};
pub use surrogate::{sample_surrogate_dataset, Partition, Spread, SurrogateConfig};
pub use trainer::{
    ema_update, resume_stage1, stage1_step, train_stage1, virtual_batch_size, PrototypeBank, SigmaTracker, Stage1State,
    TrainRunConfig, TrainReport,
};
