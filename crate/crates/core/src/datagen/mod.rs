//! Benchmark construction: simulators, imbalance, splitting and CSV I/O.

mod csvio;
mod dataset;
pub mod news;
mod prep;
pub mod twins;

pub use csvio::{load_csv, read_csv, save_csv, write_csv, CsvSchema};
pub use dataset::{ObservationalDataset, Standardizer};
pub use news::{gen_news, NewsConfig};
pub use prep::{apply_imbalance, split, split_indices, ImbalanceSpec, SplitIndices};
pub use twins::{gen_twins_binary, gen_twins_four, TwinsBinConfig, TwinsFourConfig, TWINS_FOUR_LABELS};
