//! Contiguous fluid index generation.
//!
//! Every rank scans the cells of its box in global index order and
//! describes each maximal run of consecutive cells it owns by an
//! [`IncellInfo`]. The run lists are gathered up a rank octree where each
//! sibling master sorts and merges chained runs; the root turns fluid
//! counts into start indices, and the starts travel back down the same
//! edges. Each rank then numbers its own fluid cells.
//!
//! Ranks are simulated in-process. Messages along tree edges are plain
//! owned vectors, and every sibling master sorts what it receives, so the
//! outcome does not depend on execution order.

use std::ops::Range;

use log::trace;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::geometry::{decompose_ranks, Coord, Decomposition, RankBox, VoxelGrid};
use crate::numbering::NumberingScheme;

/// Outcell of the globally last run; compares greater than any index.
pub const SENTINEL_END: u64 = u64::MAX;

/// Descriptor of one run of consecutively indexed cells on one rank.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IncellInfo {
    /// Index of the first cell of the run.
    pub incell: u64,
    /// Index of the next existing cell after the run, or [`SENTINEL_END`].
    pub outcell: u64,
    pub fluid_count: u64,
    pub owner_rank: usize,
    /// Contiguous index of the first fluid cell of the run, once known.
    pub start_ic: Option<u64>,
}

impl IncellInfo {
    pub fn new(incell: u64, outcell: u64, fluid_count: u64, owner_rank: usize) -> Self {
        IncellInfo {
            incell,
            outcell,
            fluid_count,
            owner_rank,
            start_ic: None,
        }
    }
}

/// Cells of a box as `(index, linear offset in the box, fluid)`, sorted by
/// index.
fn sorted_box_cells(
    grid: &VoxelGrid,
    scheme: &NumberingScheme,
    b: &RankBox,
) -> Vec<(u64, usize, bool)> {
    let dims = grid.dims();
    let mut cells: Vec<(u64, usize, bool)> = b
        .cells()
        .enumerate()
        .map(|(k, c)| (scheme.index_unchecked(c, dims), k, grid.is_fluid(c)))
        .collect();
    cells.sort_unstable_by_key(|c| c.0);
    cells
}

/// Runs of consecutively indexed cells owned by `rank`.
///
/// Two local cells adjacent in index order belong to the same run unless
/// some existing cell lies between them; that cell is necessarily foreign.
/// With gapped numberings "consecutive" means consecutive among existing
/// indices.
pub fn find_runs(
    grid: &VoxelGrid,
    scheme: &NumberingScheme,
    decomposition: &Decomposition,
    rank: usize,
) -> Result<Vec<IncellInfo>> {
    if decomposition.dims() != grid.dims() || rank >= decomposition.ranks() {
        return Err(Error::Protocol(format!(
            "rank {rank} is not part of the decomposition of {:?}",
            grid.dims()
        )));
    }
    let dims = grid.dims();
    let cells = sorted_box_cells(grid, scheme, decomposition.rank_box(rank));
    let successor = |i: u64| scheme.next_existing(i + 1, dims).unwrap_or(SENTINEL_END);

    let mut runs = Vec::new();
    let Some(&(first, _, first_fluid)) = cells.first() else {
        return Ok(runs);
    };
    let mut current = IncellInfo::new(first, SENTINEL_END, u64::from(first_fluid), rank);
    let mut prev = first;
    for &(index, _, fluid) in &cells[1..] {
        let next = successor(prev);
        if next != index {
            current.outcell = next;
            runs.push(current);
            current = IncellInfo::new(index, SENTINEL_END, 0, rank);
        }
        current.fluid_count += u64::from(fluid);
        prev = index;
    }
    current.outcell = successor(prev);
    runs.push(current);
    Ok(runs)
}

/// Runs sent by one tree node to its master.
type RunMessage = (usize, Vec<IncellInfo>);

/// One sibling group: `members` in rank order, `master` is the smallest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SiblingGroup {
    pub master: usize,
    pub members: Vec<usize>,
}

/// Reduction tree over ranks. `levels[l]` holds the groups formed at tree
/// level `l + 1`; their masters are the nodes of that level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankTree {
    ranks: usize,
    levels: Vec<Vec<SiblingGroup>>,
}

pub const MAX_SIBLINGS: usize = 8;

pub fn build_rank_tree(ranks: usize) -> RankTree {
    let mut levels = Vec::new();
    let mut nodes: Vec<usize> = (0..ranks.max(1)).collect();
    while nodes.len() > 1 {
        let groups: Vec<SiblingGroup> = nodes
            .chunks(MAX_SIBLINGS)
            .map(|c| SiblingGroup {
                master: c[0],
                members: c.to_vec(),
            })
            .collect();
        nodes = groups.iter().map(|g| g.master).collect();
        levels.push(groups);
    }
    RankTree {
        ranks: ranks.max(1),
        levels,
    }
}

impl RankTree {
    pub fn ranks(&self) -> usize {
        self.ranks
    }

    pub fn height(&self) -> usize {
        self.levels.len()
    }

    pub fn root(&self) -> usize {
        self.levels.last().map_or(0, |top| top[0].master)
    }

    /// Groups formed at `level` (1-based).
    pub fn groups(&self, level: usize) -> &[SiblingGroup] {
        &self.levels[level - 1]
    }
}

/// State a sibling master keeps between the upward and downward pass.
#[derive(Clone, Debug)]
struct MasterLevel {
    master: usize,
    members: Vec<usize>,
    /// Received entries, concatenated in member order (A).
    gathered: Vec<IncellInfo>,
    /// Indices into `gathered`, sorted by incell.
    order: Vec<usize>,
    /// Per merged entry, its span of `order`.
    spans: Vec<Range<usize>>,
    /// Sorted and merged entries owned by the master (B).
    merged: Vec<IncellInfo>,
}

fn gather_and_merge(
    group: &SiblingGroup,
    messages: Vec<(usize, Vec<IncellInfo>)>,
) -> Result<MasterLevel> {
    let mut gathered = Vec::new();
    for (from, list) in messages {
        if let Some(bad) = list.iter().find(|e| e.owner_rank != from) {
            return Err(Error::Protocol(format!(
                "rank {from} sent an entry owned by rank {}",
                bad.owner_rank
            )));
        }
        trace!("up: {} -> {} ({} icis)", from, group.master, list.len());
        gathered.extend(list);
    }

    let mut order: Vec<usize> = (0..gathered.len()).collect();
    order.sort_by_key(|&i| gathered[i].incell);

    let mut merged: Vec<IncellInfo> = Vec::new();
    let mut spans: Vec<Range<usize>> = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        let e = gathered[i];
        if e.incell >= e.outcell {
            return Err(Error::Protocol(format!(
                "empty run [{}, {}) from rank {}",
                e.incell, e.outcell, e.owner_rank
            )));
        }
        match merged.last_mut() {
            Some(last) if last.outcell == e.incell => {
                last.outcell = e.outcell;
                last.fluid_count += e.fluid_count;
                spans.last_mut().unwrap().end = pos + 1;
            }
            Some(last) if last.outcell > e.incell => {
                return Err(Error::Protocol(format!(
                    "runs overlap: [{}, {}) and [{}, {})",
                    last.incell, last.outcell, e.incell, e.outcell
                )));
            }
            _ => {
                merged.push(IncellInfo {
                    owner_rank: group.master,
                    start_ic: None,
                    ..e
                });
                spans.push(pos..pos + 1);
            }
        }
    }
    Ok(MasterLevel {
        master: group.master,
        members: group.members.clone(),
        gathered,
        order,
        spans,
        merged,
    })
}

impl MasterLevel {
    /// Push start indices of the merged entries back onto the gathered
    /// entries and split them into one message per member.
    fn map_back(&self, merged_starts: &[IncellInfo]) -> Result<Vec<(usize, Vec<IncellInfo>)>> {
        check_same_runs(&self.merged, merged_starts, self.master)?;
        let mut gathered = self.gathered.clone();
        for (k, span) in self.spans.iter().enumerate() {
            let mut next = merged_starts[k].start_ic.ok_or_else(|| {
                Error::Protocol(format!("rank {} received a run without start", self.master))
            })?;
            for &i in &self.order[span.clone()] {
                gathered[i].start_ic = Some(next);
                next += gathered[i].fluid_count;
            }
        }
        // Stable by owner, so each member gets its entries back in the
        // order it sent them.
        gathered.sort_by_key(|e| e.owner_rank);
        let mut out = Vec::with_capacity(self.members.len());
        let mut rest = &gathered[..];
        for &m in &self.members {
            let n = rest.iter().take_while(|e| e.owner_rank == m).count();
            out.push((m, rest[..n].to_vec()));
            rest = &rest[n..];
        }
        debug_assert!(rest.is_empty());
        Ok(out)
    }
}

fn check_same_runs(held: &[IncellInfo], received: &[IncellInfo], rank: usize) -> Result<()> {
    let same = held.len() == received.len()
        && held.iter().zip(received).all(|(a, b)| {
            a.incell == b.incell && a.outcell == b.outcell && a.fluid_count == b.fluid_count
        });
    if same {
        Ok(())
    } else {
        Err(Error::Protocol(format!(
            "rank {rank} received runs that do not match the ones it sent"
        )))
    }
}

/// Assign start indices in list order: the first entry starts at 1 and
/// each next one after the fluid cells of the previous.
pub fn assign_root_starts(list: &mut [IncellInfo]) {
    let mut next = 1;
    for e in list {
        e.start_ic = Some(next);
        next += e.fluid_count;
    }
}

/// Completed upward pass, ready to send start indices down.
#[derive(Clone, Debug)]
pub struct Reduction {
    leaves: Vec<Vec<IncellInfo>>,
    /// Per level, the masters' states, in group order.
    levels: Vec<Vec<MasterLevel>>,
    root_list: Vec<IncellInfo>,
}

impl Reduction {
    /// Run the upward pass and assign start indices at the root.
    pub fn upward(leaves: Vec<Vec<IncellInfo>>, tree: &RankTree, exec: Execution) -> Result<Self> {
        if leaves.len() != tree.ranks() {
            return Err(Error::Protocol(format!(
                "{} run lists for a tree of {} ranks",
                leaves.len(),
                tree.ranks()
            )));
        }
        // Node list of the current level; leaves carry their own runs.
        let mut current: Vec<Vec<IncellInfo>> = leaves.clone();
        let mut node_ids: Vec<usize> = (0..tree.ranks()).collect();
        let mut levels = Vec::with_capacity(tree.height());

        if tree.height() == 0 {
            // A single rank is its own root; it still sorts and merges.
            let group = SiblingGroup {
                master: 0,
                members: vec![0],
            };
            let state = gather_and_merge(&group, vec![(0, std::mem::take(&mut current[0]))])?;
            current = vec![state.merged.clone()];
            levels.push(vec![state]);
        }

        for level in 1..=tree.height() {
            let groups = tree.groups(level);
            let mut inbox: Vec<(SiblingGroup, Vec<RunMessage>)> = Vec::new();
            let mut it = node_ids.iter().copied().zip(std::mem::take(&mut current));
            for g in groups {
                let msgs = it.by_ref().take(g.members.len()).collect();
                inbox.push((g.clone(), msgs));
            }
            let states: Vec<MasterLevel> = exec
                .map(&inbox, |(g, msgs)| gather_and_merge(g, msgs.clone()))
                .into_iter()
                .collect::<Result<_>>()?;
            node_ids = states.iter().map(|s| s.master).collect();
            current = states.iter().map(|s| s.merged.clone()).collect();
            levels.push(states);
        }

        let mut root_list = current.pop().unwrap_or_default();
        assign_root_starts(&mut root_list);
        Ok(Reduction {
            leaves,
            levels,
            root_list,
        })
    }

    /// Merged runs at the root, with start indices.
    pub fn root_list(&self) -> &[IncellInfo] {
        &self.root_list
    }

    /// Send start indices from the root down to every leaf. Pure in
    /// `self`, so repeating it gives the same result.
    pub fn downward(&self, exec: Execution) -> Result<Vec<Vec<IncellInfo>>> {
        // Lists held by the nodes of the current level, keyed by node id.
        let mut held: Vec<(usize, Vec<IncellInfo>)> = vec![(
            self.levels.last().map_or(0, |l| l[0].master),
            self.root_list.clone(),
        )];
        for states in self.levels.iter().rev() {
            let work: Vec<(&MasterLevel, Vec<IncellInfo>)> = states
                .iter()
                .map(|s| {
                    let list = held
                        .iter()
                        .find(|(id, _)| *id == s.master)
                        .map(|(_, l)| l.clone())
                        .ok_or_else(|| {
                            Error::Protocol(format!("no data for master {}", s.master))
                        })?;
                    Ok((s, list))
                })
                .collect::<Result<_>>()?;
            let sent: Vec<Vec<(usize, Vec<IncellInfo>)>> = exec
                .map(&work, |(s, list)| s.map_back(list))
                .into_iter()
                .collect::<Result<_>>()?;
            held = sent.into_iter().flatten().collect();
            for (to, list) in &held {
                trace!("down: {} icis -> {}", list.len(), to);
            }
        }

        // Leaves overwrite their run lists with what they received.
        let mut out: Vec<Option<Vec<IncellInfo>>> = vec![None; self.leaves.len()];
        for (rank, list) in held {
            check_same_runs(&self.leaves[rank], &list, rank)?;
            out[rank] = Some(list);
        }
        out.into_iter()
            .enumerate()
            .map(|(r, l)| l.ok_or_else(|| Error::Protocol(format!("rank {r} received no starts"))))
            .collect()
    }
}

/// Full reduction: upward merge, root prefix sum and downward mapping.
pub fn octree_reduce(
    leaves: Vec<Vec<IncellInfo>>,
    tree: &RankTree,
    exec: Execution,
) -> Result<Vec<Vec<IncellInfo>>> {
    Reduction::upward(leaves, tree, exec)?.downward(exec)
}

/// Contiguous indices of one rank box, stored box-local x-fastest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LocalIndexMap {
    rank_box: RankBox,
    ic: Vec<u64>,
}

impl LocalIndexMap {
    pub fn rank_box(&self) -> &RankBox {
        &self.rank_box
    }

    /// Contiguous index of a cell inside the box (0 for solids).
    pub fn get(&self, c: Coord) -> u64 {
        let [ex, ey, _] = self.rank_box.extent();
        let [lx, ly, lz] = [0, 1, 2].map(|a| c[a] - self.rank_box.lo[a]);
        self.ic[lx + ex * (ly + ey * lz)]
    }

    pub fn values(&self) -> &[u64] {
        &self.ic
    }
}

/// Number the fluid cells of a box from the start indices of its runs.
pub fn assign_contiguous(
    grid: &VoxelGrid,
    scheme: &NumberingScheme,
    rank_box: &RankBox,
    runs: &[IncellInfo],
) -> Result<LocalIndexMap> {
    let cells = sorted_box_cells(grid, scheme, rank_box);
    let mut ic = vec![0u64; rank_box.volume()];
    let mut pos = 0;
    for run in runs {
        let mut next = run.start_ic.ok_or_else(|| {
            Error::Protocol(format!("run at index {} has no start index", run.incell))
        })?;
        if pos < cells.len() && cells[pos].0 < run.incell {
            return Err(Error::Protocol(format!(
                "cell with index {} is not covered by any run",
                cells[pos].0
            )));
        }
        let mut fluid = 0;
        while pos < cells.len() && cells[pos].0 < run.outcell {
            let (_, offset, is_fluid) = cells[pos];
            if is_fluid {
                ic[offset] = next;
                next += 1;
                fluid += 1;
            }
            pos += 1;
        }
        if fluid != run.fluid_count {
            return Err(Error::Protocol(format!(
                "run at index {} holds {fluid} fluid cells, descriptor says {}",
                run.incell, run.fluid_count
            )));
        }
    }
    if pos != cells.len() {
        return Err(Error::Protocol(format!(
            "{} cells of rank {} lie beyond its last run",
            cells.len() - pos,
            rank_box.rank
        )));
    }
    Ok(LocalIndexMap {
        rank_box: *rank_box,
        ic,
    })
}

/// Reference numbering: all cells sorted by index, fluid cells counted
/// from 1. Returned in grid (x-fastest) order.
pub fn serial_oracle(grid: &VoxelGrid, scheme: &NumberingScheme) -> Vec<u64> {
    let dims = grid.dims();
    let mut order: Vec<(u64, usize)> = (0..grid.cell_count())
        .map(|i| (scheme.index_unchecked(grid.coord_of(i), dims), i))
        .collect();
    order.sort_unstable();
    let mut ic = vec![0u64; grid.cell_count()];
    let mut next = 1;
    for (_, i) in order {
        if grid.flags()[i] {
            ic[i] = next;
            next += 1;
        }
    }
    ic
}

/// Result of the distributed index generation.
#[derive(Clone, Debug)]
pub struct DistributedIndex {
    pub decomposition: Decomposition,
    pub maps: Vec<LocalIndexMap>,
    pub fluid_count: u64,
}

impl DistributedIndex {
    /// Gather all rank maps into one array in grid order.
    pub fn to_dense(&self) -> Vec<u64> {
        let [nx, ny, _] = self.decomposition.dims();
        let mut out = vec![0u64; self.decomposition.dims().iter().product()];
        for m in &self.maps {
            for (c, &v) in m.rank_box().cells().zip(m.values()) {
                out[c[0] + nx * (c[1] + ny * c[2])] = v;
            }
        }
        out
    }
}

/// Run the whole rank program: decompose, find runs, reduce, number.
pub fn contiguous_index(
    grid: &VoxelGrid,
    scheme: &NumberingScheme,
    ranks: usize,
    exec: Execution,
) -> Result<DistributedIndex> {
    scheme.check_dims(grid.dims())?;
    let decomposition = decompose_ranks(grid.dims(), ranks)?;
    let runs: Vec<Vec<IncellInfo>> = exec
        .map_range(0..ranks, |r| find_runs(grid, scheme, &decomposition, r))
        .into_iter()
        .collect::<Result<_>>()?;
    let tree = build_rank_tree(ranks);
    let reduction = Reduction::upward(runs, &tree, exec)?;
    let fluid_count = reduction.root_list().iter().map(|e| e.fluid_count).sum();
    let with_starts = reduction.downward(exec)?;
    let maps: Vec<LocalIndexMap> = exec
        .map_range(0..ranks, |r| {
            assign_contiguous(grid, scheme, decomposition.rank_box(r), &with_starts[r])
        })
        .into_iter()
        .collect::<Result<_>>()?;
    Ok(DistributedIndex {
        decomposition,
        maps,
        fluid_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_channel, SplitMix64};

    const LEX1: NumberingScheme = NumberingScheme::LexBlocked { block: 1 };

    fn line(fluid: [bool; 4]) -> VoxelGrid {
        VoxelGrid::from_fn([4, 1, 1], |[x, _, _]| fluid[x]).unwrap()
    }

    #[test]
    fn runs_on_split_line() {
        let g = line([true; 4]);
        let d = decompose_ranks([4, 1, 1], 2).unwrap();
        assert_eq!(
            find_runs(&g, &LEX1, &d, 0).unwrap(),
            vec![IncellInfo::new(0, 2, 2, 0)]
        );
        assert_eq!(
            find_runs(&g, &LEX1, &d, 1).unwrap(),
            vec![IncellInfo::new(2, SENTINEL_END, 2, 1)]
        );
        let g = line([true, false, true, true]);
        assert_eq!(
            find_runs(&g, &LEX1, &d, 0).unwrap(),
            vec![IncellInfo::new(0, 2, 1, 0)]
        );
    }

    #[test]
    fn single_rank_has_one_run() {
        let g = make_channel(4).unwrap();
        let d = decompose_ranks(g.dims(), 1).unwrap();
        for s in [LEX1, NumberingScheme::Morton { group: 1 }] {
            let runs = find_runs(&g, &s, &d, 0).unwrap();
            assert_eq!(runs, vec![IncellInfo::new(0, SENTINEL_END, 80, 0)]);
        }
    }

    #[test]
    fn interleaved_runs() {
        // lex b=1 on 4x2x1 split along x: each rank owns two runs.
        let g = VoxelGrid::filled([4, 2, 1], true).unwrap();
        let d = decompose_ranks([4, 2, 1], 2).unwrap();
        assert_eq!(d.factors(), [2, 1, 1]);
        let r0 = find_runs(&g, &LEX1, &d, 0).unwrap();
        let r1 = find_runs(&g, &LEX1, &d, 1).unwrap();
        assert_eq!(
            r0,
            vec![IncellInfo::new(0, 2, 2, 0), IncellInfo::new(4, 6, 2, 0)]
        );
        assert_eq!(
            r1,
            vec![
                IncellInfo::new(2, 4, 2, 1),
                IncellInfo::new(6, SENTINEL_END, 2, 1)
            ]
        );
    }

    #[test]
    fn tree_shapes() {
        let t = build_rank_tree(1);
        assert_eq!((t.height(), t.root()), (0, 0));

        let t = build_rank_tree(8);
        assert_eq!(t.height(), 1);
        assert_eq!(
            t.groups(1),
            &[SiblingGroup {
                master: 0,
                members: (0..8).collect()
            }]
        );

        let t = build_rank_tree(13);
        assert_eq!(t.height(), 2);
        assert_eq!(
            t.groups(1),
            &[
                SiblingGroup {
                    master: 0,
                    members: (0..8).collect()
                },
                SiblingGroup {
                    master: 8,
                    members: (8..13).collect()
                },
            ]
        );
        assert_eq!(
            t.groups(2),
            &[SiblingGroup {
                master: 0,
                members: vec![0, 8]
            }]
        );

        for p in 1..200 {
            let t = build_rank_tree(p);
            let mut leaves: Vec<usize> = if t.height() == 0 {
                vec![0]
            } else {
                t.groups(1).iter().flat_map(|g| g.members.clone()).collect()
            };
            leaves.sort_unstable();
            assert_eq!(leaves, (0..p).collect::<Vec<_>>());
            for l in 1..=t.height() {
                assert!(t.groups(l).iter().all(|g| g.members.len() <= MAX_SIBLINGS));
            }
        }
    }

    #[test]
    fn two_rank_merge() {
        let leaves = vec![
            vec![IncellInfo::new(0, 2, 2, 0)],
            vec![IncellInfo::new(2, SENTINEL_END, 2, 1)],
        ];
        let red = Reduction::upward(leaves, &build_rank_tree(2), Execution::Sequential).unwrap();
        let root = red.root_list();
        assert_eq!(root.len(), 1);
        assert_eq!(
            (root[0].incell, root[0].outcell, root[0].fluid_count),
            (0, SENTINEL_END, 4)
        );
        assert_eq!(root[0].start_ic, Some(1));
        let out = red.downward(Execution::Sequential).unwrap();
        assert_eq!(out[0][0].start_ic, Some(1));
        assert_eq!(out[1][0].start_ic, Some(3));
        assert_eq!(out[1][0].owner_rank, 1);
    }

    #[test]
    fn root_prefix_sum_skips_empty_runs() {
        let mut list = vec![
            IncellInfo::new(0, 3, 5, 0),
            IncellInfo::new(10, 12, 0, 0),
            IncellInfo::new(20, 25, 3, 0),
        ];
        assign_root_starts(&mut list);
        let starts: Vec<_> = list.iter().map(|e| e.start_ic.unwrap()).collect();
        assert_eq!(starts, vec![1, 6, 6]);

        let single = octree_reduce(
            vec![vec![IncellInfo::new(0, SENTINEL_END, 7, 0)]],
            &build_rank_tree(1),
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(single[0][0].start_ic, Some(1));
    }

    #[test]
    fn overlapping_runs_are_rejected() {
        let leaves = vec![
            vec![IncellInfo::new(0, 5, 2, 0)],
            vec![IncellInfo::new(3, 8, 2, 1)],
        ];
        let err = octree_reduce(leaves, &build_rank_tree(2), Execution::Sequential).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
        let bad_owner = vec![vec![IncellInfo::new(0, 5, 2, 1)], vec![]];
        assert!(octree_reduce(bad_owner, &build_rank_tree(2), Execution::Sequential).is_err());
    }

    #[test]
    fn downward_is_idempotent() {
        let g = make_channel(5).unwrap();
        let s = NumberingScheme::LexBlocked { block: 2 };
        let d = decompose_ranks(g.dims(), 13).unwrap();
        let runs: Vec<_> = (0..13).map(|r| find_runs(&g, &s, &d, r).unwrap()).collect();
        let red = Reduction::upward(runs, &build_rank_tree(13), Execution::Parallel).unwrap();
        let total: u64 = red.root_list().iter().map(|e| e.fluid_count).sum();
        assert_eq!(total, g.fluid_count() as u64);
        let a = red.downward(Execution::Parallel).unwrap();
        let b = red.downward(Execution::Sequential).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn assign_on_small_lines() {
        for p in 1..=4 {
            let d = contiguous_index(&line([true; 4]), &LEX1, p, Execution::Sequential).unwrap();
            assert_eq!(d.to_dense(), vec![1, 2, 3, 4]);
            let d = contiguous_index(
                &line([true, false, true, true]),
                &LEX1,
                p,
                Execution::Sequential,
            )
            .unwrap();
            assert_eq!(d.to_dense(), vec![1, 0, 2, 3]);
        }
    }

    #[test]
    fn assign_requires_starts() {
        let g = line([true; 4]);
        let d = decompose_ranks([4, 1, 1], 1).unwrap();
        let runs = find_runs(&g, &LEX1, &d, 0).unwrap();
        assert!(matches!(
            assign_contiguous(&g, &LEX1, d.rank_box(0), &runs),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn oracle_edge_cases() {
        let solid = VoxelGrid::filled([3, 4, 5], false).unwrap();
        assert!(serial_oracle(&solid, &LEX1).iter().all(|&v| v == 0));

        let cube = VoxelGrid::filled([8, 8, 8], true).unwrap();
        let m = NumberingScheme::Morton { group: 1 };
        let ic = serial_oracle(&cube, &m);
        for (i, &v) in ic.iter().enumerate() {
            assert_eq!(v, m.index_unchecked(cube.coord_of(i), [8, 8, 8]) + 1);
        }
    }

    #[test]
    fn distributed_matches_oracle_on_channel() {
        let g = make_channel(4).unwrap();
        for s in [LEX1, NumberingScheme::LexBlocked { block: 4 }] {
            let expect = serial_oracle(&g, &s);
            for p in [1, 2, 3, 8] {
                for exec in [Execution::Sequential, Execution::Parallel] {
                    let d = contiguous_index(&g, &s, p, exec).unwrap();
                    assert_eq!(d.to_dense(), expect, "{s} P={p}");
                    assert_eq!(d.fluid_count, 80);
                }
            }
        }
    }

    #[test]
    fn order_preserving_on_random_grid() {
        let mut rng = SplitMix64::new(7);
        let g = VoxelGrid::from_fn([9, 7, 5], |_| rng.below(3) > 0).unwrap();
        for s in [
            NumberingScheme::Morton { group: 2 },
            NumberingScheme::LexBlocked { block: 3 },
        ] {
            let d = contiguous_index(&g, &s, 7, Execution::Parallel).unwrap();
            let ic = d.to_dense();
            let mut fluid: Vec<(u64, u64)> = (0..g.cell_count())
                .filter(|&i| g.flags()[i])
                .map(|i| (s.index_unchecked(g.coord_of(i), g.dims()), ic[i]))
                .collect();
            fluid.sort_unstable();
            assert!(fluid
                .iter()
                .enumerate()
                .all(|(k, &(_, c))| c == k as u64 + 1));
        }
    }
}
