//! Click-log ingestion, attribute screening and encoding, score distributions and synthetic data.

pub mod aggregate;
pub mod anova;
pub mod ava;
pub mod color;
pub mod distribution;
pub mod embedding;
pub mod encode;
pub mod io;
pub mod merge;
pub mod schema;
pub mod split;
pub mod synth;

pub use aggregate::{aggregate_logs, AggregatedInstance, Aggregator};
pub use anova::{anova_screen, AnovaResult};
pub use ava::{load_ava_style, AvaEntry, Split};
pub use color::{dominant_color, ColorPalette, PaletteColor};
pub use distribution::{lognormal_distribution, BucketEdges, ScoreDistribution};
pub use embedding::{CachedEmbedder, EmbeddingCache, EmbeddingProvider, StubEmbedder, TEXT_EMBEDDING_DIM};
pub use encode::{encode_auxiliary, encode_tags, AuxFields, AuxLayout, AuxiliaryVector};
pub use merge::{merge_rare_levels, MergeMaps};
pub use schema::{Attribute, AttributeTuple, ClickLogRecord};
pub use synth::{generate_synthetic_dataset, PlantedEffects, SyntheticConfig, SyntheticDataset};
