//! Sparse representation file.
//!
//! Layout, little-endian:
//!
//! ```text
//! "SPRS" | version u32 = 1 | X Y Z u64 | N_f u64 | periodic u32 (bit 0..2 = x,y,z)
//! | scheme length u16 | scheme ASCII | table flag u32
//! | [count u64 | count x start u64]          (if table flag = 1)
//! | N_f records ascending by I_c, 156 bytes each:
//!     x y z u32 | nbr[18] u64
//! ```
//!
//! Record `i` holds `I_c = i + 1`, so any chunk can be read with one seek.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::ops::Range;
use std::path::Path;

use crate::adjacency::{SparseRecord, DIRECTIONS};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::numbering::NumberingScheme;
use crate::partition::{chunk_ranges, PartitionAssignment};

pub const MAGIC: &[u8; 4] = b"SPRS";
pub const VERSION: u32 = 1;
pub const RECORD_LEN: usize = 3 * 4 + DIRECTIONS * 8;

/// Records encoded per parallel work item when writing.
const ENCODE_CHUNK: usize = 1 << 14;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparseHeader {
    pub dims: [u64; 3],
    pub fluid_cells: u64,
    pub scheme: NumberingScheme,
    pub periodic: [bool; 3],
    /// Start index of each partition of an imported partitioning.
    pub partition_starts: Option<Vec<u64>>,
}

impl SparseHeader {
    /// Encoded size of the header in bytes.
    pub fn encoded_len(&self) -> u64 {
        let scheme = self.scheme.to_string().len() as u64;
        let table = self
            .partition_starts
            .as_ref()
            .map_or(0, |t| 8 + 8 * t.len() as u64);
        4 + 4 + 24 + 8 + 4 + 2 + scheme + 4 + table
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(self.encoded_len() as usize);
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        for d in self.dims {
            b.extend_from_slice(&d.to_le_bytes());
        }
        b.extend_from_slice(&self.fluid_cells.to_le_bytes());
        let flags = (0..3).fold(0u32, |acc, a| acc | (u32::from(self.periodic[a]) << a));
        b.extend_from_slice(&flags.to_le_bytes());
        let scheme = self.scheme.to_string();
        b.extend_from_slice(&(scheme.len() as u16).to_le_bytes());
        b.extend_from_slice(scheme.as_bytes());
        match &self.partition_starts {
            None => b.extend_from_slice(&0u32.to_le_bytes()),
            Some(starts) => {
                b.extend_from_slice(&1u32.to_le_bytes());
                b.extend_from_slice(&(starts.len() as u64).to_le_bytes());
                for s in starts {
                    b.extend_from_slice(&s.to_le_bytes());
                }
            }
        }
        b
    }

    /// Partitioning stored in the header, if any.
    pub fn partition_table(&self) -> Option<Result<PartitionAssignment>> {
        self.partition_starts
            .as_ref()
            .map(|s| PartitionAssignment::from_starts(s, self.fluid_cells))
    }

    fn validate_table(&self) -> std::result::Result<(), String> {
        let Some(starts) = &self.partition_starts else {
            return Ok(());
        };
        if starts.first() != Some(&1) {
            return Err("partition table must begin at 1".into());
        }
        if starts.windows(2).any(|w| w[0] >= w[1]) {
            return Err("partition table is not strictly increasing".into());
        }
        if *starts.last().unwrap() > self.fluid_cells {
            return Err("partition table runs past the last fluid cell".into());
        }
        Ok(())
    }
}

fn encode_record(r: &SparseRecord, out: &mut Vec<u8>) {
    for c in r.coord {
        out.extend_from_slice(&c.to_le_bytes());
    }
    for n in r.nbr {
        out.extend_from_slice(&n.to_le_bytes());
    }
}

/// Sort records by contiguous index and check they are exactly `1..=N_f`.
fn sorted_checked(
    mut records: Vec<SparseRecord>,
    header: &SparseHeader,
    exec: Execution,
) -> Result<Vec<SparseRecord>> {
    if records.len() as u64 != header.fluid_cells {
        return Err(Error::Consistency(format!(
            "{} records for a header declaring {} fluid cells",
            records.len(),
            header.fluid_cells
        )));
    }
    exec.sort_by_key(&mut records, |r| r.ic);
    if let Some((i, r)) = records
        .iter()
        .enumerate()
        .find(|(i, r)| r.ic != *i as u64 + 1)
    {
        return Err(Error::Consistency(format!(
            "expected contiguous index {} at position {i}, found {} (duplicate or missing index)",
            i + 1,
            r.ic
        )));
    }
    header.validate_table().map_err(Error::Consistency)?;
    Ok(records)
}

/// Write header and records. Records may arrive in any order; they are
/// sorted and checked before any byte is written. Encoding runs in
/// parallel chunks, the bytes are identical to a serial write.
pub fn write_sparse_to<W: Write>(
    mut w: W,
    header: &SparseHeader,
    records: Vec<SparseRecord>,
    exec: Execution,
) -> Result<()> {
    let records = sorted_checked(records, header, exec)?;
    let chunks: Vec<&[SparseRecord]> = records.chunks(ENCODE_CHUNK).collect();
    let encoded: Vec<Vec<u8>> = exec.map(&chunks, |chunk| {
        let mut buf = Vec::with_capacity(chunk.len() * RECORD_LEN);
        for r in *chunk {
            encode_record(r, &mut buf);
        }
        buf
    });
    w.write_all(&header.encode())?;
    for buf in encoded {
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sparse(
    path: impl AsRef<Path>,
    header: &SparseHeader,
    records: Vec<SparseRecord>,
    exec: Execution,
) -> Result<()> {
    // Validate first so a bad record set leaves no file behind.
    let records = sorted_checked(records, header, exec)?;
    let file = File::create(path)?;
    write_sparse_to(BufWriter::new(file), header, records, exec)
}

/// Reader tracking the byte offset for error reports.
struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.fill(&mut buf)?;
        Ok(buf)
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => Error::Format {
                offset: self.offset,
                msg: format!("truncated: needed {} bytes", buf.len()),
            },
            _ => e.into(),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn fail<T>(&self, at: u64, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: at,
            msg: msg.into(),
        })
    }
}

pub fn read_header<R: Read>(r: R) -> Result<SparseHeader> {
    let mut c = Cursor {
        inner: r,
        offset: 0,
    };
    let magic: [u8; 4] = c.bytes()?;
    if &magic != MAGIC {
        return c.fail(0, format!("bad magic {magic:?}, expected \"SPRS\""));
    }
    let version = c.u32()?;
    if version != VERSION {
        return c.fail(4, format!("unsupported version {version}"));
    }
    let dims = [c.u64()?, c.u64()?, c.u64()?];
    let fluid_cells = c.u64()?;
    let cells = dims.iter().try_fold(1u64, |a, &d| a.checked_mul(d));
    if dims.contains(&0) || cells.is_none_or(|n| n < fluid_cells) {
        return c.fail(
            8,
            format!("dims {dims:?} cannot hold {fluid_cells} fluid cells"),
        );
    }
    let at = c.offset;
    let flags = c.u32()?;
    if flags > 0b111 {
        return c.fail(at, format!("unknown periodic flags {flags:#x}"));
    }
    let periodic = [0, 1, 2].map(|a| flags >> a & 1 == 1);
    let len = c.u16()? as usize;
    let at = c.offset;
    let mut text = vec![0u8; len];
    c.fill(&mut text)?;
    let scheme = std::str::from_utf8(&text)
        .ok()
        .and_then(|s| s.parse::<NumberingScheme>().ok());
    let Some(scheme) = scheme else {
        return c.fail(
            at,
            format!("invalid scheme string {:?}", String::from_utf8_lossy(&text)),
        );
    };
    let at = c.offset;
    let partition_starts = match c.u32()? {
        0 => None,
        1 => {
            let count = c.u64()?;
            if count == 0 || count > fluid_cells {
                return c.fail(at + 4, format!("partition table of {count} entries"));
            }
            let mut starts = Vec::with_capacity(count as usize);
            for _ in 0..count {
                starts.push(c.u64()?);
            }
            Some(starts)
        }
        other => return c.fail(at, format!("bad table flag {other}")),
    };
    let header = SparseHeader {
        dims,
        fluid_cells,
        scheme,
        periodic,
        partition_starts,
    };
    if let Err(msg) = header.validate_table() {
        return c.fail(at, msg);
    }
    Ok(header)
}

fn decode_records(
    header: &SparseHeader,
    first_ic: u64,
    bytes: &[u8],
    base_offset: u64,
) -> Result<Vec<SparseRecord>> {
    let mut out = Vec::with_capacity(bytes.len() / RECORD_LEN);
    for (k, raw) in bytes.chunks_exact(RECORD_LEN).enumerate() {
        let ic = first_ic + k as u64;
        let u32_at = |i: usize| u32::from_le_bytes(raw[4 * i..4 * i + 4].try_into().unwrap());
        let coord = [u32_at(0), u32_at(1), u32_at(2)];
        let mut nbr = [0u64; DIRECTIONS];
        for (d, n) in nbr.iter_mut().enumerate() {
            let s = 12 + 8 * d;
            *n = u64::from_le_bytes(raw[s..s + 8].try_into().unwrap());
        }
        let bad_coord = (0..3).any(|a| coord[a] as u64 >= header.dims[a]);
        let bad_nbr = nbr.iter().any(|&n| n > header.fluid_cells);
        if bad_coord || bad_nbr {
            return Err(Error::Format {
                offset: base_offset + (k * RECORD_LEN) as u64,
                msg: format!(
                    "corrupt record for I_c = {ic}: {}",
                    if bad_coord {
                        "coordinate outside domain"
                    } else {
                        "neighbor index out of range"
                    }
                ),
            });
        }
        out.push(SparseRecord { coord, ic, nbr });
    }
    Ok(out)
}

/// Open a sparse file and read its header.
pub fn open_sparse(path: impl AsRef<Path>) -> Result<(SparseHeader, BufReader<File>)> {
    let mut reader = BufReader::new(File::open(path)?);
    let header = read_header(&mut reader)?;
    Ok((header, reader))
}

/// Records with contiguous indices in `ics` (1-based, end exclusive).
pub fn read_ic_range(
    path: impl AsRef<Path>,
    ics: Range<u64>,
) -> Result<(SparseHeader, Vec<SparseRecord>)> {
    let (header, mut reader) = open_sparse(path)?;
    if ics.start == 0 || ics.end > header.fluid_cells + 1 || ics.start > ics.end {
        return Err(Error::Parameter(format!(
            "index range {ics:?} outside 1..={}",
            header.fluid_cells
        )));
    }
    let offset = header.encoded_len() + (ics.start - 1) * RECORD_LEN as u64;
    reader.seek(SeekFrom::Start(offset))?;
    let mut bytes = vec![0u8; ((ics.end - ics.start) as usize) * RECORD_LEN];
    let mut c = Cursor {
        inner: &mut reader,
        offset,
    };
    c.fill(&mut bytes)?;
    let records = decode_records(&header, ics.start, &bytes, offset)?;
    Ok((header, records))
}

pub fn read_all(path: impl AsRef<Path>) -> Result<(SparseHeader, Vec<SparseRecord>)> {
    let path = path.as_ref();
    let (header, _) = open_sparse(path)?;
    read_ic_range(path, 1..header.fluid_cells + 1)
}

/// Records of chunk `n` out of `parts` equal chunks.
pub fn read_chunk(
    path: impl AsRef<Path>,
    n: u64,
    parts: u64,
) -> Result<(SparseHeader, Vec<SparseRecord>)> {
    let path = path.as_ref();
    let (header, _) = open_sparse(path)?;
    let chunks = chunk_ranges(header.fluid_cells, parts)?;
    if n >= parts {
        return Err(Error::Parameter(format!("chunk {n} of {parts}")));
    }
    read_ic_range(path, chunks.range(n as usize))
}
