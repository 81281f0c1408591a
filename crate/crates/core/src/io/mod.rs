//! File formats: CIFAR-10 binary batches, model checkpoints, run
//! configuration files and CSV matrices.

pub mod checkpoint;
pub mod cifar;
pub mod config;
pub mod matrix;

pub use checkpoint::{load_checkpoint, load_checkpoint_as, save_checkpoint};
pub use cifar::{load_cifar10, load_cifar10_subset, load_cifar10_test, Dataset, Split};
pub use config::{load_config, parse_config, RunConfig};
pub use matrix::{read_matrix, write_matrix};
