//! End-to-end preprocessing: voxel grid to sorted sparse records.

use std::path::Path;

use crate::adjacency::{build_adjacency, halo_exchange, SparseRecord};
use crate::error::Result;
use crate::exec::Execution;
use crate::geometry::VoxelGrid;
use crate::indexer::contiguous_index;
use crate::numbering::NumberingScheme;
use crate::sparse_io::{write_sparse, SparseHeader};

/// Output of the preprocessor before it is written to disk.
#[derive(Clone, Debug)]
pub struct Preprocessed {
    pub header: SparseHeader,
    /// Records of all ranks, sorted by contiguous index.
    pub records: Vec<SparseRecord>,
}

/// Number the grid with `ranks` simulated ranks and build the adjacency list.
pub fn preprocess(
    grid: &VoxelGrid,
    scheme: &NumberingScheme,
    ranks: usize,
    periodic: [bool; 3],
    exec: Execution,
) -> Result<Preprocessed> {
    let index = contiguous_index(grid, scheme, ranks, exec)?;
    log::debug!(
        "indexed {} fluid cells on {} ranks, factors {:?}",
        index.fluid_count,
        ranks,
        index.decomposition.factors()
    );
    let views = halo_exchange(grid, &index.decomposition, &index.maps, periodic, exec)?;
    let mut records: Vec<SparseRecord> = exec
        .map(&views, build_adjacency)
        .into_iter()
        .flatten()
        .collect();
    exec.sort_by_key(&mut records, |r| r.ic);
    let header = SparseHeader {
        dims: grid.dims().map(|d| d as u64),
        fluid_cells: index.fluid_count,
        scheme: *scheme,
        periodic,
        partition_starts: None,
    };
    Ok(Preprocessed { header, records })
}

/// Preprocess and write the sparse file.
pub fn preprocess_to_file(
    grid: &VoxelGrid,
    scheme: &NumberingScheme,
    ranks: usize,
    periodic: [bool; 3],
    path: impl AsRef<Path>,
    exec: Execution,
) -> Result<SparseHeader> {
    let Preprocessed { header, records } = preprocess(grid, scheme, ranks, periodic, exec)?;
    write_sparse(path, &header, records, exec)?;
    Ok(header)
}
