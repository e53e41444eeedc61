use std::collections::BTreeMap;

use sparselbm::adjacency::SparseRecord;
use sparselbm::geometry::{make_packing, voxel_load, voxel_save, VoxelGrid};
use sparselbm::numbering::NumberingScheme;
use sparselbm::partition::{chunk_ranges, partition_stats};
use sparselbm::pipeline::{preprocess, preprocess_to_file};
use sparselbm::sparse_io::{read_all, read_chunk};
use sparselbm::Execution;

#[test]
fn chunks_of_a_preprocessed_file_concatenate() {
    let dir = tempfile::tempdir().unwrap();
    let vox = dir.path().join("p.voxl");
    let sprs = dir.path().join("p.sprs");
    voxel_save(&vox, &make_packing(12, 9).unwrap()).unwrap();
    let grid = voxel_load(&vox).unwrap();
    let header = preprocess_to_file(
        &grid,
        &NumberingScheme::Morton { group: 1 },
        7,
        [true, false, false],
        &sprs,
        Execution::Parallel,
    )
    .unwrap();
    let (read_header, all) = read_all(&sprs).unwrap();
    assert_eq!(read_header, header);
    for parts in [1, 2, 3, 7, 64] {
        let joined: Vec<SparseRecord> = (0..parts)
            .flat_map(|n| read_chunk(&sprs, n, parts).unwrap().1)
            .collect();
        assert_eq!(joined, all);
    }
}

#[test]
fn all_solid_grid_gives_header_only_file() {
    let dir = tempfile::tempdir().unwrap();
    let sprs = dir.path().join("solid.sprs");
    let grid = VoxelGrid::filled([6, 5, 4], false).unwrap();
    let header = preprocess_to_file(
        &grid,
        &NumberingScheme::LexBlocked { block: 2 },
        4,
        [false; 3],
        &sprs,
        Execution::Parallel,
    )
    .unwrap();
    assert_eq!(header.fluid_cells, 0);
    assert_eq!(
        std::fs::metadata(&sprs).unwrap().len(),
        header.encoded_len()
    );
    assert!(read_all(&sprs).unwrap().1.is_empty());
}

#[test]
fn remote_links_are_reciprocal() {
    let grid = make_packing(14, 2).unwrap();
    for scheme in [
        NumberingScheme::LexBlocked { block: 1 },
        NumberingScheme::Morton { group: 2 },
    ] {
        let pre = preprocess(&grid, &scheme, 3, [true, false, false], Execution::Parallel).unwrap();
        let chunks = chunk_ranges(pre.header.fluid_cells, 9).unwrap();
        let mut directed: BTreeMap<(usize, usize), u64> = BTreeMap::new();
        for r in &pre.records {
            let from = chunks.partition_of(r.ic);
            for &n in r.nbr.iter().filter(|&&n| n != 0) {
                let to = chunks.partition_of(n);
                if to != from {
                    *directed.entry((from, to)).or_default() += 1;
                }
            }
        }
        for (&(a, b), &count) in &directed {
            assert_eq!(directed.get(&(b, a)), Some(&count), "{scheme}: {a}->{b}");
        }
        let stats = partition_stats(&pre.records, &chunks, Execution::Sequential).unwrap();
        assert_eq!(stats.total_remote_links(), directed.values().sum::<u64>());
        for (p, s) in stats.parts.iter().enumerate() {
            let peers = directed.keys().filter(|(a, _)| *a == p).count() as u64;
            assert_eq!(s.neighbor_count, peers);
        }
    }
}
