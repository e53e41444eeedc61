//! Preprocessing, partition analysis and validation for list-based sparse
//! lattice Boltzmann domains.
//!
//! The pipeline runs in stages:
//!
//! 1. [`geometry`] builds or loads a dense voxel grid and tiles its bounding
//!    box into rank-owned boxes.
//! 2. [`numbering`] gives every cell a unique (possibly gapped) index.
//! 3. [`indexer`] turns that index into a gapless fluid index by detecting
//!    per-rank runs and reducing them up and down a rank octree.
//! 4. [`adjacency`] exchanges one-cell halos between ranks and emits the
//!    D3Q19 neighbor list of every fluid cell.
//! 5. [`sparse_io`] writes the sorted list to a fixed-record binary file and
//!    reads it back in equal chunks.
//! 6. [`partition`] scores chunkings or imported partition maps.
//! 7. [`solver`] runs a D3Q19 TRT stream-collide kernel over the chunks.
//!
//! Rank- and partition-level work is dispatched through [`exec`], which uses
//! rayon when the `parallel` feature is enabled and plain loops otherwise.

pub mod adjacency;
pub mod cli;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod indexer;
pub mod numbering;
pub mod partition;
pub mod pipeline;
pub mod solver;
pub mod sparse_io;

pub use error::{Error, Result};
pub use exec::Execution;
