//! Partitions of the 1-D fluid cell list and their quality statistics.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use crate::adjacency::SparseRecord;
use crate::error::{Error, Result};
use crate::exec::Execution;

/// Contiguous-index ranges of `N` partitions: partition `p` holds
/// `boundaries[p] .. boundaries[p + 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionAssignment {
    boundaries: Vec<u64>,
}

impl PartitionAssignment {
    /// Build from partition start indices (first must be 1) and `N_f`.
    pub fn from_starts(starts: &[u64], fluid_cells: u64) -> Result<Self> {
        if starts.first() != Some(&1) {
            return Err(Error::Data("partition starts must begin at 1".into()));
        }
        if let Some(w) = starts.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::Data(format!(
                "partition starts not strictly increasing: {} then {}",
                w[0], w[1]
            )));
        }
        if *starts.last().unwrap() > fluid_cells {
            return Err(Error::TooManyProcesses {
                parts: starts.len() as u64,
                fluid_cells,
            });
        }
        let mut boundaries = starts.to_vec();
        boundaries.push(fluid_cells + 1);
        Ok(PartitionAssignment { boundaries })
    }

    pub fn parts(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn fluid_cells(&self) -> u64 {
        self.boundaries[self.parts()] - 1
    }

    pub fn boundaries(&self) -> &[u64] {
        &self.boundaries
    }

    /// Start index of every partition.
    pub fn starts(&self) -> &[u64] {
        &self.boundaries[..self.parts()]
    }

    pub fn range(&self, p: usize) -> Range<u64> {
        self.boundaries[p]..self.boundaries[p + 1]
    }

    pub fn sizes(&self) -> Vec<u64> {
        self.boundaries.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Partition holding contiguous index `ic` (1-based).
    #[inline]
    pub fn partition_of(&self, ic: u64) -> usize {
        self.boundaries.partition_point(|&b| b <= ic) - 1
    }
}

/// Cut `N_f` cells into `n` chunks; the first `N_f % n` are one cell larger.
pub fn chunk_ranges(fluid_cells: u64, n: u64) -> Result<PartitionAssignment> {
    if n == 0 {
        return Err(Error::Parameter("partition count must be >= 1".into()));
    }
    if n > fluid_cells {
        return Err(Error::TooManyProcesses {
            parts: n,
            fluid_cells,
        });
    }
    let base = fluid_cells / n;
    let extra = fluid_cells % n;
    let mut boundaries = Vec::with_capacity(n as usize + 1);
    let mut at = 1;
    boundaries.push(at);
    for p in 0..n {
        at += base + u64::from(p < extra);
        boundaries.push(at);
    }
    Ok(PartitionAssignment { boundaries })
}

/// Parse a partition map: one start index per line, strictly increasing,
/// beginning at 1. Blank lines are ignored.
pub fn parse_partition_map(text: &str, fluid_cells: u64) -> Result<PartitionAssignment> {
    let mut starts: Vec<u64> = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line_no = k + 1;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let fail = |msg: String| Error::FormatLine { line: line_no, msg };
        let v: u64 = t
            .parse()
            .map_err(|_| fail(format!("`{t}` is not an index")))?;
        match starts.last() {
            None if v != 1 => return Err(fail(format!("first start is {v}, must be 1"))),
            Some(&prev) if v <= prev => {
                return Err(fail(format!("start {v} does not exceed previous {prev}")))
            }
            _ => {}
        }
        if v > fluid_cells {
            return Err(fail(format!(
                "start {v} beyond the {fluid_cells} fluid cells"
            )));
        }
        starts.push(v);
    }
    if starts.is_empty() {
        return Err(Error::FormatLine {
            line: 1,
            msg: "empty partition map".into(),
        });
    }
    PartitionAssignment::from_starts(&starts, fluid_cells)
}

pub fn import_partition_map(
    path: impl AsRef<Path>,
    fluid_cells: u64,
) -> Result<PartitionAssignment> {
    parse_partition_map(&fs::read_to_string(path)?, fluid_cells)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PartitionStat {
    /// Distinct other partitions reached by at least one link.
    pub neighbor_count: u64,
    /// Directed links from this partition's cells into other partitions.
    pub remote_links: u64,
    pub fluid_cells: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PartitionStats {
    pub parts: Vec<PartitionStat>,
}

impl PartitionStats {
    pub fn total_remote_links(&self) -> u64 {
        self.parts.iter().map(|p| p.remote_links).sum()
    }

    pub fn max_neighbor_count(&self) -> u64 {
        self.parts
            .iter()
            .map(|p| p.neighbor_count)
            .max()
            .unwrap_or(0)
    }

    pub fn max_remote_links(&self) -> u64 {
        self.parts.iter().map(|p| p.remote_links).max().unwrap_or(0)
    }
}

/// Count neighbor partitions and directed remote links per partition.
/// `records` may come in any order but must cover `1..=N_f` exactly.
pub fn partition_stats(
    records: &[SparseRecord],
    assignment: &PartitionAssignment,
    exec: Execution,
) -> Result<PartitionStats> {
    let nf = assignment.fluid_cells();
    if records.len() as u64 != nf {
        return Err(Error::Data(format!(
            "{} records for {nf} fluid cells",
            records.len()
        )));
    }
    let mut by_ic: Vec<Option<&SparseRecord>> = vec![None; records.len()];
    for r in records {
        let slot =
            r.ic.checked_sub(1)
                .and_then(|i| by_ic.get_mut(i as usize))
                .ok_or_else(|| Error::Data(format!("contiguous index {} out of range", r.ic)))?;
        if slot.replace(r).is_some() {
            return Err(Error::Data(format!(
                "contiguous index {} appears twice",
                r.ic
            )));
        }
    }

    let parts = exec.map_range(0..assignment.parts(), |p| {
        let mut neighbors = BTreeSet::new();
        let mut remote_links = 0;
        let range = assignment.range(p);
        for ic in range.clone() {
            let rec = by_ic[(ic - 1) as usize].expect("coverage checked above");
            for &n in &rec.nbr {
                if n == 0 {
                    continue;
                }
                if n > nf {
                    return Err(Error::Data(format!(
                        "cell {ic} links to {n}, beyond {nf} fluid cells"
                    )));
                }
                let q = assignment.partition_of(n);
                if q != p {
                    remote_links += 1;
                    neighbors.insert(q);
                }
            }
        }
        Ok(PartitionStat {
            neighbor_count: neighbors.len() as u64,
            remote_links,
            fluid_cells: range.end - range.start,
        })
    });
    Ok(PartitionStats {
        parts: parts.into_iter().collect::<Result<_>>()?,
    })
}

pub const REMOTE_LINK_BINS: u64 = 64;

/// `(neighbor count, partitions)` for every count that occurs.
pub fn neighbor_histogram(stats: &PartitionStats) -> Vec<(u64, u64)> {
    let mut counts = std::collections::BTreeMap::new();
    for p in &stats.parts {
        *counts.entry(p.neighbor_count).or_insert(0u64) += 1;
    }
    counts.into_iter().collect()
}

/// 64 equal-width integer bins starting at 0 and covering the largest
/// remote link count; returns `(lower edge, partitions)` for every bin.
pub fn remote_link_histogram(stats: &PartitionStats) -> Vec<(u64, u64)> {
    let width = (stats.max_remote_links() + 1)
        .div_ceil(REMOTE_LINK_BINS)
        .max(1);
    let mut bins = vec![0u64; REMOTE_LINK_BINS as usize];
    for p in &stats.parts {
        bins[(p.remote_links / width) as usize] += 1;
    }
    bins.into_iter()
        .enumerate()
        .map(|(k, c)| (k as u64 * width, c))
        .collect()
}

fn write_histogram(path: &Path, rows: &[(u64, u64)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "bin,count")?;
    for (bin, count) in rows {
        writeln!(w, "{bin},{count}")?;
    }
    w.flush()?;
    Ok(())
}

/// `<prefix>_neighbors.csv` and `<prefix>_remote_links.csv`.
pub fn histogram_paths(prefix: impl AsRef<Path>) -> [PathBuf; 2] {
    let prefix = prefix.as_ref().as_os_str();
    ["_neighbors.csv", "_remote_links.csv"].map(|suffix| {
        let mut p = prefix.to_owned();
        p.push(suffix);
        PathBuf::from(p)
    })
}

/// Write both histograms next to `prefix`, see [`histogram_paths`].
pub fn emit_histograms(stats: &PartitionStats, prefix: impl AsRef<Path>) -> Result<[PathBuf; 2]> {
    let [neighbors, remote] = histogram_paths(prefix);
    write_histogram(&neighbors, &neighbor_histogram(stats))?;
    write_histogram(&remote, &remote_link_histogram(stats))?;
    Ok([neighbors, remote])
}
