//! Dataset construction: records → pairings → flows → windows.

pub mod flows;
pub mod normalize;
pub mod records;
pub mod synthetic;
pub mod windows;

pub use flows::{aggregate_flows, load_flows, save_flows, FlowItem, FlowKind, FlowSeries, INTERVAL_SECS};
pub use normalize::{fit_normalizer, NormalizationStats};
pub use records::{load_records, pair_records, save_records, GctPairing, GctRecord, UserHash, PAIRING_WINDOW_SECS};
pub use synthetic::{generate_synthetic, CommuteKind, GeneratorConfig, GeneratorOutput, LevelOverride};
pub use windows::{make_windows, window_count, DatasetSplits, Split, SplitRatios, WindowedDataset, DEFAULT_T_IN, DEFAULT_T_OUT};
