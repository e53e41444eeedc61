//! Dense voxel geometries and their decomposition into rank-owned boxes.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub type Coord = [usize; 3];

/// Dense full representation of a domain: one fluid/solid flag per cell,
/// stored x-fastest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoxelGrid {
    dims: [usize; 3],
    flags: Vec<bool>,
}

impl VoxelGrid {
    /// A grid with every cell set to `fluid`.
    pub fn filled(dims: [usize; 3], fluid: bool) -> Result<Self> {
        let len = cell_count(dims)?;
        Ok(VoxelGrid {
            dims,
            flags: vec![fluid; len],
        })
    }

    pub fn from_fn(dims: [usize; 3], mut is_fluid: impl FnMut(Coord) -> bool) -> Result<Self> {
        let mut grid = Self::filled(dims, false)?;
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let i = grid.linear([x, y, z]);
                    grid.flags[i] = is_fluid([x, y, z]);
                }
            }
        }
        Ok(grid)
    }

    pub fn from_flags(dims: [usize; 3], flags: Vec<bool>) -> Result<Self> {
        let len = cell_count(dims)?;
        if flags.len() != len {
            return Err(Error::InvalidGeometry(format!(
                "{} flags for {} cells",
                flags.len(),
                len
            )));
        }
        Ok(VoxelGrid { dims, flags })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn cell_count(&self) -> usize {
        self.flags.len()
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    #[inline]
    pub fn linear(&self, [x, y, z]: Coord) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coord_of(&self, linear: usize) -> Coord {
        let x = linear % self.dims[0];
        let rest = linear / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }

    #[inline]
    pub fn is_fluid(&self, c: Coord) -> bool {
        self.flags[self.linear(c)]
    }

    pub fn set(&mut self, c: Coord, fluid: bool) {
        let i = self.linear(c);
        self.flags[i] = fluid;
    }

    pub fn fluid_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn fluid_fraction(&self) -> f64 {
        self.fluid_count() as f64 / self.cell_count() as f64
    }

    pub fn contains(&self, c: Coord) -> bool {
        c.iter().zip(self.dims).all(|(&v, d)| v < d)
    }
}

fn cell_count(dims: [usize; 3]) -> Result<usize> {
    if dims.contains(&0) {
        return Err(Error::InvalidGeometry(format!("zero extent in {dims:?}")));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::InvalidGeometry(format!("cell count of {dims:?} overflows")))
}

/// Empty channel of `(5d, d, d)` cells with a one-cell solid wall on the
/// four faces normal to y and z.
pub fn make_channel(d: usize) -> Result<VoxelGrid> {
    if d < 3 {
        return Err(Error::InvalidGeometry(format!(
            "channel diameter {d} leaves no interior (need d >= 3)"
        )));
    }
    VoxelGrid::from_fn([5 * d, d, d], |[_, y, z]| {
        y != 0 && y != d - 1 && z != 0 && z != d - 1
    })
}

/// Plate channel: solid rows at `y = 0` and `y = ny - 1`, fluid elsewhere.
/// Used for Poiseuille validation with periodic x and z.
pub fn make_plate_channel(nx: usize, ny: usize, nz: usize) -> Result<VoxelGrid> {
    if ny < 3 {
        return Err(Error::InvalidGeometry(format!(
            "plate channel height {ny} leaves no fluid row"
        )));
    }
    VoxelGrid::from_fn([nx, ny, nz], |[_, y, _]| y != 0 && y != ny - 1)
}

/// splitmix64 generator; the sphere packing is defined in terms of its
/// output stream, so it is kept local rather than borrowed from `rand`.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[0, n)`; `n` must be non-zero.
    pub fn below(&mut self, n: u64) -> u64 {
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }
}

/// Consecutive rejections after which sphere insertion stops.
pub const PACKING_MAX_REJECTIONS: u32 = 2000;

/// Tube of diameter `d` along x filled with equal spheres of radius `d/6`
/// placed by sequential random insertion.
///
/// Candidate centers are drawn with `x` uniform in `[0, 5d)` and `(y, z)`
/// uniform over the part of the cross-section where the sphere stays inside
/// the tube. A candidate overlapping an accepted sphere is rejected;
/// insertion stops after [`PACKING_MAX_REJECTIONS`] consecutive rejections.
/// A cell is solid if its center lies outside the tube or inside a sphere.
pub fn make_packing(d: usize, seed: u64) -> Result<VoxelGrid> {
    if d < 12 {
        return Err(Error::InvalidGeometry(format!(
            "packing diameter {d} too small for spheres (need d >= 12)"
        )));
    }
    let spheres = place_spheres(d, seed);
    let tube_r = d as f64 / 2.0;
    let sphere_r = d as f64 / 6.0;
    let center = d as f64 / 2.0;

    // Bucket spheres by x so each cell only tests nearby candidates.
    let nx = 5 * d;
    let mut by_x: Vec<Vec<usize>> = vec![Vec::new(); nx];
    for (k, s) in spheres.iter().enumerate() {
        let lo = (s[0] - sphere_r).floor().max(0.0) as usize;
        let hi = ((s[0] + sphere_r).ceil() as usize).min(nx - 1);
        for bucket in &mut by_x[lo..=hi] {
            bucket.push(k);
        }
    }

    VoxelGrid::from_fn([nx, d, d], |[x, y, z]| {
        let p = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
        let (dy, dz) = (p[1] - center, p[2] - center);
        if dy * dy + dz * dz > tube_r * tube_r {
            return false;
        }
        !by_x[x].iter().any(|&k| {
            let s = spheres[k];
            let (a, b, c) = (p[0] - s[0], p[1] - s[1], p[2] - s[2]);
            a * a + b * b + c * c < sphere_r * sphere_r
        })
    })
}

fn place_spheres(d: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = SplitMix64::new(seed);
    let length = 5.0 * d as f64;
    let tube_r = d as f64 / 2.0;
    let r = d as f64 / 6.0;
    let center = d as f64 / 2.0;
    let min_sep2 = (2.0 * r) * (2.0 * r);

    let mut accepted: Vec<[f64; 3]> = Vec::new();
    let mut rejections = 0;
    while rejections < PACKING_MAX_REJECTIONS {
        let x = rng.next_f64() * length;
        // Cross-section position uniform in the disk where a sphere fits;
        // square draws outside it are resampled, not counted as rejections.
        let reach = tube_r - r;
        let (dy, dz) = loop {
            let dy = (2.0 * rng.next_f64() - 1.0) * reach;
            let dz = (2.0 * rng.next_f64() - 1.0) * reach;
            if dy * dy + dz * dz <= reach * reach {
                break (dy, dz);
            }
        };
        let c = [x, center + dy, center + dz];
        let inside = (dy * dy + dz * dz).sqrt() + r <= tube_r;
        let free = inside
            && accepted.iter().all(|s| {
                let (a, b, e) = (c[0] - s[0], c[1] - s[1], c[2] - s[2]);
                a * a + b * b + e * e >= min_sep2
            });
        if free {
            accepted.push(c);
            rejections = 0;
        } else {
            rejections += 1;
        }
    }
    accepted
}

/// Box owned by one preprocessor rank: `lo` inclusive, `hi` exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RankBox {
    pub rank: usize,
    pub lo: Coord,
    pub hi: Coord,
}

impl RankBox {
    pub fn extent(&self) -> [usize; 3] {
        [
            self.hi[0] - self.lo[0],
            self.hi[1] - self.lo[1],
            self.hi[2] - self.lo[2],
        ]
    }

    pub fn volume(&self) -> usize {
        self.extent().iter().product()
    }

    pub fn contains(&self, c: Coord) -> bool {
        (0..3).all(|a| self.lo[a] <= c[a] && c[a] < self.hi[a])
    }

    /// Cells of the box in x-fastest order.
    pub fn cells(&self) -> impl Iterator<Item = Coord> + '_ {
        let [lx, ly, lz] = self.lo;
        let [hx, hy, hz] = self.hi;
        (lz..hz).flat_map(move |z| (ly..hy).flat_map(move |y| (lx..hx).map(move |x| [x, y, z])))
    }
}

/// Cartesian tiling of the bounding box into `P` rank boxes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decomposition {
    dims: [usize; 3],
    factors: [usize; 3],
    /// Slab start offsets per axis, with the axis extent appended.
    cuts: [Vec<usize>; 3],
    boxes: Vec<RankBox>,
}

impl Decomposition {
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn factors(&self) -> [usize; 3] {
        self.factors
    }

    pub fn boxes(&self) -> &[RankBox] {
        &self.boxes
    }

    pub fn ranks(&self) -> usize {
        self.boxes.len()
    }

    pub fn rank_box(&self, rank: usize) -> &RankBox {
        &self.boxes[rank]
    }

    /// Per-axis block coordinate of a rank.
    pub fn block_of_rank(&self, rank: usize) -> [usize; 3] {
        let [px, py, _] = self.factors;
        [rank % px, (rank / px) % py, rank / (px * py)]
    }

    pub fn rank_of_block(&self, [bx, by, bz]: [usize; 3]) -> usize {
        bx + self.factors[0] * (by + self.factors[1] * bz)
    }

    pub fn owner_of(&self, c: Coord) -> usize {
        let mut block = [0; 3];
        for a in 0..3 {
            // cuts[a] starts with 0 and ends with the extent.
            block[a] = self.cuts[a].partition_point(|&s| s <= c[a]) - 1;
        }
        self.rank_of_block(block)
    }
}

/// Tile `dims` into `ranks` boxes.
///
/// The factorization `(px, py, pz)` minimizes the total area of internal
/// cut planes. Ties prefer the larger factor on the longer axis, then the
/// lexicographically smallest `(px, py, pz)`. Each axis is cut into
/// near-equal slabs with the first `extent % p` slabs one cell wider; rank
/// ids run x-block fastest.
pub fn decompose_ranks(dims: [usize; 3], ranks: usize) -> Result<Decomposition> {
    let cells = cell_count(dims).map_err(|e| Error::InvalidDecomposition(e.to_string()))?;
    if ranks == 0 {
        return Err(Error::InvalidDecomposition(
            "rank count must be >= 1".into(),
        ));
    }
    if ranks > cells {
        return Err(Error::InvalidDecomposition(format!(
            "{ranks} ranks exceed {cells} cells"
        )));
    }

    // Axes ordered by length, longest first (stable on axis id).
    let mut by_length = [0usize, 1, 2];
    by_length.sort_by_key(|&a| std::cmp::Reverse(dims[a]));

    let mut best: Option<(usize, [std::cmp::Reverse<usize>; 3], [usize; 3])> = None;
    for px in divisors(ranks) {
        for py in divisors(ranks / px) {
            let pz = ranks / px / py;
            let f = [px, py, pz];
            if (0..3).any(|a| f[a] > dims[a]) {
                continue;
            }
            let cost = (px - 1) * dims[1] * dims[2]
                + (py - 1) * dims[0] * dims[2]
                + (pz - 1) * dims[0] * dims[1];
            let pref = by_length.map(|a| std::cmp::Reverse(f[a]));
            let key = (cost, pref, f);
            if best.as_ref().is_none_or(|b| key < *b) {
                best = Some(key);
            }
        }
    }
    let factors = best.map(|(_, _, f)| f).ok_or_else(|| {
        Error::InvalidDecomposition(format!(
            "{ranks} ranks admit no factorization into non-empty boxes of {dims:?}"
        ))
    })?;

    let cuts = [0, 1, 2].map(|a| slab_cuts(dims[a], factors[a]));
    let mut boxes = Vec::with_capacity(ranks);
    for bz in 0..factors[2] {
        for by in 0..factors[1] {
            for bx in 0..factors[0] {
                let b = [bx, by, bz];
                boxes.push(RankBox {
                    rank: boxes.len(),
                    lo: [0, 1, 2].map(|a| cuts[a][b[a]]),
                    hi: [0, 1, 2].map(|a| cuts[a][b[a] + 1]),
                });
            }
        }
    }
    Ok(Decomposition {
        dims,
        factors,
        cuts,
        boxes,
    })
}

fn divisors(n: usize) -> impl Iterator<Item = usize> {
    (1..=n).filter(move |d| n.is_multiple_of(*d))
}

fn slab_cuts(extent: usize, parts: usize) -> Vec<usize> {
    let base = extent / parts;
    let extra = extent % parts;
    let mut cuts = Vec::with_capacity(parts + 1);
    let mut at = 0;
    cuts.push(0);
    for i in 0..parts {
        at += base + usize::from(i < extra);
        cuts.push(at);
    }
    cuts
}

const VOXEL_MAGIC: &[u8; 4] = b"VOXL";
const VOXEL_VERSION: u32 = 1;
const VOXEL_HEADER_LEN: u64 = 4 + 4 + 3 * 8;

pub fn write_voxels<W: Write>(mut w: W, grid: &VoxelGrid) -> io::Result<()> {
    w.write_all(VOXEL_MAGIC)?;
    w.write_all(&VOXEL_VERSION.to_le_bytes())?;
    for d in grid.dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut bytes = vec![0u8; grid.flags.len().div_ceil(8)];
    for (i, _) in grid.flags.iter().enumerate().filter(|(_, &f)| f) {
        bytes[i / 8] |= 1 << (i % 8);
    }
    w.write_all(&bytes)?;
    w.flush()
}

pub fn read_voxels<R: Read>(mut r: R) -> Result<VoxelGrid> {
    let mut offset = 0u64;
    let mut magic = [0u8; 4];
    read_exact_at(&mut r, &mut magic, &mut offset)?;
    if &magic != VOXEL_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected \"VOXL\""),
        });
    }
    let mut word = [0u8; 4];
    read_exact_at(&mut r, &mut word, &mut offset)?;
    let version = u32::from_le_bytes(word);
    if version != VOXEL_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        let at = offset;
        let mut b = [0u8; 8];
        read_exact_at(&mut r, &mut b, &mut offset)?;
        *d = usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Format {
            offset: at,
            msg: "dimension does not fit in memory".into(),
        })?;
    }
    let cells = cell_count(dims).map_err(|e| Error::Format {
        offset: 8,
        msg: e.to_string(),
    })?;
    let mut bytes = vec![0u8; cells.div_ceil(8)];
    read_exact_at(&mut r, &mut bytes, &mut offset)?;
    let flags = (0..cells)
        .map(|i| bytes[i / 8] >> (i % 8) & 1 == 1)
        .collect();
    Ok(VoxelGrid { dims, flags })
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: &mut u64) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(Error::Format {
                    offset: *offset + filled as u64,
                    msg: format!("truncated: needed {} more bytes", buf.len() - filled),
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    *offset += buf.len() as u64;
    Ok(())
}

pub fn voxel_save(path: impl AsRef<Path>, grid: &VoxelGrid) -> Result<()> {
    let file = File::create(path)?;
    write_voxels(BufWriter::new(file), grid)?;
    Ok(())
}

pub fn voxel_load(path: impl AsRef<Path>) -> Result<VoxelGrid> {
    let file = File::open(path)?;
    read_voxels(BufReader::new(file))
}

/// Size of a voxel file for the given dims.
pub fn voxel_file_len(dims: [usize; 3]) -> u64 {
    VOXEL_HEADER_LEN + (dims.iter().product::<usize>().div_ceil(8)) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn channel_counts() {
        let g = make_channel(4).unwrap();
        assert_eq!(g.dims(), [20, 4, 4]);
        assert_eq!(g.fluid_count(), 80);
        assert_eq!(make_channel(3).unwrap().fluid_count(), 15);
        let big = make_channel(100).unwrap();
        assert!((big.fluid_fraction() - 0.9604).abs() < 1e-12);
        assert!(matches!(make_channel(2), Err(Error::InvalidGeometry(_))));
    }

    #[test]
    fn packing_is_deterministic_and_porous() {
        let a = make_packing(24, 1).unwrap();
        let b = make_packing(24, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dims(), [120, 24, 24]);
        let phi = a.fluid_fraction();
        assert!(phi > 0.15 && phi < 0.60, "fluid fraction {phi}");
        assert!(!a.is_fluid([0, 0, 0]));
        assert_ne!(a, make_packing(24, 2).unwrap());
        assert!(matches!(
            make_packing(11, 1),
            Err(Error::InvalidGeometry(_))
        ));
    }

    #[test]
    fn splitmix_reference_stream() {
        // First outputs for seed 0 from the reference implementation.
        let mut r = SplitMix64::new(0);
        assert_eq!(r.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(r.next_u64(), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn decompose_examples() {
        let d = decompose_ranks([8, 8, 8], 8).unwrap();
        assert_eq!(d.factors(), [2, 2, 2]);
        assert!(d.boxes().iter().all(|b| b.extent() == [4, 4, 4]));

        let d = decompose_ranks([10, 4, 4], 3).unwrap();
        assert_eq!(d.factors(), [3, 1, 1]);
        let widths: Vec<_> = d.boxes().iter().map(|b| b.extent()[0]).collect();
        assert_eq!(widths, vec![4, 3, 3]);

        let d = decompose_ranks([5, 1, 1], 1).unwrap();
        assert_eq!(d.boxes()[0].lo, [0, 0, 0]);
        assert_eq!(d.boxes()[0].hi, [5, 1, 1]);
    }

    #[test]
    fn decompose_rank_order_is_x_fastest() {
        let d = decompose_ranks([4, 4, 4], 8).unwrap();
        assert_eq!(d.boxes()[1].lo, [2, 0, 0]);
        assert_eq!(d.boxes()[2].lo, [0, 2, 0]);
        assert_eq!(d.boxes()[4].lo, [0, 0, 2]);
    }

    #[test]
    fn decompose_tie_prefers_longer_axis() {
        // (1,1,4), (2,1,2) and (1,2,2) all cut 48 faces; z is longest.
        let d = decompose_ranks([4, 4, 8], 4).unwrap();
        assert_eq!(d.factors(), [1, 1, 4]);
        // Equal lengths fall back to axis order.
        let d = decompose_ranks([4, 4, 4], 2).unwrap();
        assert_eq!(d.factors(), [2, 1, 1]);
    }

    #[test]
    fn decompose_errors() {
        assert!(matches!(
            decompose_ranks([2, 2, 1], 5),
            Err(Error::InvalidDecomposition(_))
        ));
        assert!(matches!(
            decompose_ranks([2, 2, 2], 0),
            Err(Error::InvalidDecomposition(_))
        ));
        // 7 is prime and larger than every axis.
        assert!(decompose_ranks([4, 4, 4], 7).is_err());
    }

    #[test]
    fn decompose_tiles_exactly() {
        for dims in [[5, 3, 4], [7, 7, 2], [9, 1, 6]] {
            let cells = dims.iter().product::<usize>();
            for p in 1..=64.min(cells) {
                let Ok(d) = decompose_ranks(dims, p) else {
                    continue;
                };
                let mut owner = vec![usize::MAX; cells];
                let grid = VoxelGrid::filled(dims, true).unwrap();
                for b in d.boxes() {
                    assert!(b.volume() > 0);
                    for c in b.cells() {
                        let i = grid.linear(c);
                        assert_eq!(owner[i], usize::MAX, "overlap at {c:?}");
                        owner[i] = b.rank;
                        assert_eq!(d.owner_of(c), b.rank);
                    }
                }
                assert!(owner.iter().all(|&o| o != usize::MAX));
            }
        }
    }

    #[test]
    fn voxel_roundtrip_and_errors() {
        let g = make_channel(4).unwrap();
        let mut buf = Vec::new();
        write_voxels(&mut buf, &g).unwrap();
        assert_eq!(buf.len() as u64, voxel_file_len(g.dims()));
        assert_eq!(read_voxels(&buf[..]).unwrap(), g);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_voxels(&bad[..]),
            Err(Error::Format { offset: 0, .. })
        ));

        let short = &buf[..buf.len() - 1];
        match read_voxels(short) {
            Err(Error::Format { offset, msg }) => {
                assert_eq!(offset, short.len() as u64);
                assert!(msg.contains("truncated"));
            }
            other => panic!("expected truncation error, got {other:?}"),
        }

        let mut huge = buf[..8].to_vec();
        for _ in 0..3 {
            huge.extend_from_slice(&u64::MAX.to_le_bytes());
        }
        assert!(matches!(read_voxels(&huge[..]), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn voxel_file_is_identity(
            dims in (1usize..9, 1usize..9, 1usize..9),
            seed in any::<u64>(),
        ) {
            let mut rng = SplitMix64::new(seed);
            let g = VoxelGrid::from_fn([dims.0, dims.1, dims.2], |_| rng.next_u64() & 1 == 1).unwrap();
            let mut buf = Vec::new();
            write_voxels(&mut buf, &g).unwrap();
            prop_assert_eq!(read_voxels(&buf[..]).unwrap(), g);
        }
    }
}
