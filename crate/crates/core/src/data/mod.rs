//! Synthetic data generation, the dataset directory format, preprocessing and
//! fold planning.

pub mod dataset;
pub mod folds;
pub mod generate;
pub mod pgm;
pub mod preprocess;

pub use dataset::{load_dataset, read_manifest, write_dataset, Case, Dataset, Manifest};
pub use folds::{kfold_split, FoldPlan};
pub use generate::{generate, generate_cases, GeneratorSpec};
pub use pgm::GrayImage;
pub use preprocess::{preprocess_image, ImageNorm, TableStats};
