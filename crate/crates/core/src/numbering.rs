//! Injective cell index functions over the whole bounding box.
//!
//! Both fluid and solid cells are numbered. Blocked lexicographic order is
//! gapless on `[0, X*Y*Z)`; Morton codes skip the codes of padding cells
//! when the extents are not powers of two.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::Coord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NumberingScheme {
    /// Lexicographic order over cubic blocks of side `block`, x fastest
    /// both between and inside blocks.
    LexBlocked { block: u64 },
    /// Z-curve interleaving `group`-bit groups of x, y, z (x least
    /// significant).
    Morton { group: u8 },
}

impl NumberingScheme {
    pub fn lex(block: u64) -> Result<Self> {
        if block == 0 {
            return Err(Error::SchemeParse { token: "0".into() });
        }
        Ok(NumberingScheme::LexBlocked { block })
    }

    pub fn morton(group: u8) -> Result<Self> {
        if !(1..=2).contains(&group) {
            return Err(Error::SchemeParse {
                token: group.to_string(),
            });
        }
        Ok(NumberingScheme::Morton { group })
    }

    /// Largest axis extent this scheme can number without overflowing u64.
    pub fn max_extent(&self) -> u64 {
        match *self {
            NumberingScheme::LexBlocked { .. } => u64::MAX,
            NumberingScheme::Morton { group } => 1 << morton_axis_bits(group),
        }
    }

    pub fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        let limit = self.max_extent();
        if dims.iter().any(|&d| d as u64 > limit) {
            return Err(Error::InvalidGeometry(format!(
                "dims {dims:?} exceed the {limit}-cell axis limit of scheme {self}"
            )));
        }
        if let NumberingScheme::LexBlocked { .. } = self {
            dims.iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| Error::InvalidGeometry(format!("{dims:?} overflows u64")))?;
        }
        Ok(())
    }

    /// Index of `coord`, or an error if it lies outside `dims`.
    pub fn index_of(&self, coord: Coord, dims: [usize; 3]) -> Result<u64> {
        if (0..3).any(|a| coord[a] >= dims[a]) {
            return Err(Error::OutOfDomain {
                x: coord[0] as u64,
                y: coord[1] as u64,
                z: coord[2] as u64,
                dims,
            });
        }
        Ok(self.index_unchecked(coord, dims))
    }

    /// Index of an in-bounds coordinate.
    #[inline]
    pub fn index_unchecked(&self, coord: Coord, dims: [usize; 3]) -> u64 {
        match *self {
            NumberingScheme::LexBlocked { block } => lex_index(block, coord, dims),
            NumberingScheme::Morton { group } => morton_encode(group, coord.map(|v| v as u64)),
        }
    }

    /// Cell carrying `index`, if that index belongs to a cell of `dims`.
    pub fn decode(&self, index: u64, dims: [usize; 3]) -> Option<Coord> {
        match *self {
            NumberingScheme::LexBlocked { block } => lex_decode(block, index, dims),
            NumberingScheme::Morton { group } => {
                if index >> morton_code_bits(group) != 0 {
                    return None;
                }
                let c = morton_decode(group, index);
                (0..3)
                    .all(|a| c[a] < dims[a] as u64)
                    .then(|| c.map(|v| v as usize))
            }
        }
    }

    /// Smallest index `>= from` that belongs to a cell of `dims`.
    pub fn next_existing(&self, from: u64, dims: [usize; 3]) -> Option<u64> {
        match *self {
            NumberingScheme::LexBlocked { .. } => {
                let total = dims.iter().map(|&d| d as u64).product::<u64>();
                (from < total).then_some(from)
            }
            NumberingScheme::Morton { group } => morton_next_in_box(group, from, dims),
        }
    }
}

impl fmt::Display for NumberingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NumberingScheme::LexBlocked { block } => write!(f, "lex:b={block}"),
            NumberingScheme::Morton { group } => write!(f, "morton:g={group}"),
        }
    }
}

impl FromStr for NumberingScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let err = |token: &str| Error::SchemeParse {
            token: token.to_string(),
        };
        let (kind, param) = s.split_once(':').ok_or_else(|| err(s))?;
        let (key, value) = param.split_once('=').ok_or_else(|| err(param))?;
        match (kind, key) {
            ("lex", "b") => {
                let block: u64 = value.parse().map_err(|_| err(value))?;
                if block == 0 {
                    return Err(err(value));
                }
                Ok(NumberingScheme::LexBlocked { block })
            }
            ("morton", "g") => match value {
                "1" => Ok(NumberingScheme::Morton { group: 1 }),
                "2" => Ok(NumberingScheme::Morton { group: 2 }),
                _ => Err(err(value)),
            },
            ("lex" | "morton", _) => Err(err(key)),
            _ => Err(err(kind)),
        }
    }
}

pub fn parse_scheme(s: &str) -> Result<NumberingScheme> {
    s.parse()
}

pub fn scheme_text(scheme: &NumberingScheme) -> String {
    scheme.to_string()
}

/// Rank of `coord` under the key `(z/b, y/b, x/b, z%b, y%b, x%b)`.
///
/// All block layers before the current one are complete, so only the
/// current layer, row and block need their truncated extents.
fn lex_index(b: u64, [x, y, z]: Coord, dims: [usize; 3]) -> u64 {
    let [nx, ny, nz] = dims.map(|d| d as u64);
    let (x, y, z) = (x as u64, y as u64, z as u64);
    let (bx, by, bz) = (x / b, y / b, z / b);
    let tz = b.min(nz - bz * b);
    let ty = b.min(ny - by * b);
    let tx = b.min(nx - bx * b);
    bz * b * nx * ny
        + by * b * nx * tz
        + bx * b * ty * tz
        + (x % b)
        + (y % b) * tx
        + (z % b) * tx * ty
}

fn lex_decode(b: u64, index: u64, dims: [usize; 3]) -> Option<Coord> {
    let [nx, ny, nz] = dims.map(|d| d as u64);
    if index >= nx * ny * nz {
        return None;
    }
    let bz = index / (b * nx * ny);
    let rem = index % (b * nx * ny);
    let tz = b.min(nz - bz * b);
    let by = rem / (b * nx * tz);
    let rem = rem % (b * nx * tz);
    let ty = b.min(ny - by * b);
    let bx = rem / (b * ty * tz);
    let rem = rem % (b * ty * tz);
    let tx = b.min(nx - bx * b);
    let lz = rem / (tx * ty);
    let ly = (rem % (tx * ty)) / tx;
    let lx = rem % tx;
    Some([bx * b + lx, by * b + ly, bz * b + lz].map(|v| v as usize))
}

fn morton_axis_bits(group: u8) -> u32 {
    // Keep every code bit below position 63.
    if group == 1 {
        21
    } else {
        20
    }
}

fn morton_code_bits(group: u8) -> u32 {
    3 * morton_axis_bits(group)
}

/// Position in the code of bit `k` of axis `axis`.
#[inline]
fn morton_position(group: u8, axis: usize, k: u32) -> u32 {
    let g = group as u32;
    (k / g) * 3 * g + axis as u32 * g + k % g
}

/// Axis and axis-bit stored at code position `p`.
#[inline]
fn morton_locate(group: u8, p: u32) -> (usize, u32) {
    let g = group as u32;
    let axis = ((p % (3 * g)) / g) as usize;
    (axis, (p / (3 * g)) * g + p % g)
}

pub fn morton_encode(group: u8, coord: [u64; 3]) -> u64 {
    let mut code = 0u64;
    for k in 0..morton_axis_bits(group) {
        for (a, &v) in coord.iter().enumerate() {
            code |= ((v >> k) & 1) << morton_position(group, a, k);
        }
    }
    code
}

pub fn morton_decode(group: u8, code: u64) -> [u64; 3] {
    let mut c = [0u64; 3];
    for p in 0..morton_code_bits(group) {
        let (a, k) = morton_locate(group, p);
        c[a] |= ((code >> p) & 1) << k;
    }
    c
}

/// Smallest code `>= from` whose cell lies inside `[0, dims)`.
///
/// Tropf–Herzog BIGMIN over the box `[0, dims - 1]`. It applies to both
/// group widths because each axis keeps its bit significance order inside
/// the code.
fn morton_next_in_box(group: u8, from: u64, dims: [usize; 3]) -> Option<u64> {
    let bits = morton_code_bits(group);
    if from >> bits != 0 {
        return None;
    }
    let max_c = dims.map(|d| d as u64 - 1);
    let c = morton_decode(group, from);
    if (0..3).all(|a| c[a] <= max_c[a]) {
        return Some(from);
    }

    let mut lo = [0u64; 3];
    let mut hi = max_c;
    let mut best = None;
    for p in (0..bits).rev() {
        let (a, k) = morton_locate(group, p);
        let zb = (from >> p) & 1;
        let mn = (lo[a] >> k) & 1;
        let mx = (hi[a] >> k) & 1;
        match (zb, mn, mx) {
            (0, 0, 0) | (1, 1, 1) => {}
            (0, 0, 1) => {
                let mut cand = lo;
                cand[a] = load_one_then_zeros(lo[a], k);
                best = Some(morton_encode(group, cand));
                hi[a] = load_zero_then_ones(hi[a], k);
            }
            (0, 1, 1) => return Some(morton_encode(group, lo)),
            (1, 0, 0) => return best,
            (1, 0, 1) => lo[a] = load_one_then_zeros(lo[a], k),
            // lo <= hi holds on every axis throughout.
            _ => unreachable!("BIGMIN box inverted"),
        }
    }
    best
}

#[inline]
fn load_one_then_zeros(v: u64, k: u32) -> u64 {
    (v & !((2u64 << k) - 1)) | (1 << k)
}

#[inline]
fn load_zero_then_ones(v: u64, k: u32) -> u64 {
    (v & !((2u64 << k) - 1)) | ((1u64 << k) - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn all_cells(dims: [usize; 3]) -> impl Iterator<Item = Coord> {
        (0..dims[2])
            .flat_map(move |z| (0..dims[1]).flat_map(move |y| (0..dims[0]).map(move |x| [x, y, z])))
    }

    fn schemes() -> Vec<NumberingScheme> {
        vec![
            NumberingScheme::LexBlocked { block: 1 },
            NumberingScheme::LexBlocked { block: 2 },
            NumberingScheme::LexBlocked { block: 3 },
            NumberingScheme::LexBlocked { block: 4 },
            NumberingScheme::LexBlocked { block: 100 },
            NumberingScheme::Morton { group: 1 },
            NumberingScheme::Morton { group: 2 },
        ]
    }

    #[test]
    fn spot_values() {
        let lex1 = NumberingScheme::LexBlocked { block: 1 };
        assert_eq!(lex1.index_of([1, 2, 3], [4, 4, 4]).unwrap(), 57);
        let m1 = NumberingScheme::Morton { group: 1 };
        assert_eq!(m1.index_of([2, 3, 1], [8, 8, 8]).unwrap(), 30);
        let m2 = NumberingScheme::Morton { group: 2 };
        assert_eq!(m2.index_of([5, 2, 7], [8, 8, 8]).unwrap(), 1145);
    }

    #[test]
    fn lex_blocked_small_order() {
        let lex2 = NumberingScheme::LexBlocked { block: 2 };
        let dims = [4, 2, 1];
        let order = [
            [0, 0],
            [1, 0],
            [0, 1],
            [1, 1],
            [2, 0],
            [3, 0],
            [2, 1],
            [3, 1],
        ];
        for (i, [x, y]) in order.iter().enumerate() {
            assert_eq!(lex2.index_of([*x, *y, 0], dims).unwrap(), i as u64);
        }
        assert_eq!(lex2.index_of([2, 1, 0], dims).unwrap(), 6);
    }

    #[test]
    fn out_of_bounds() {
        let lex1 = NumberingScheme::LexBlocked { block: 1 };
        assert!(matches!(
            lex1.index_of([4, 0, 0], [4, 4, 4]),
            Err(Error::OutOfDomain { .. })
        ));
    }

    #[test]
    fn lex_matches_sort_key_oracle() {
        for dims in [[5, 3, 4], [7, 6, 5], [3, 9, 2], [1, 1, 7]] {
            for b in [1u64, 2, 3, 4, 5, 100] {
                let key = |[x, y, z]: Coord| {
                    let b = b as usize;
                    (z / b, y / b, x / b, z % b, y % b, x % b)
                };
                let mut cells: Vec<Coord> = all_cells(dims).collect();
                cells.sort_by_key(|&c| key(c));
                let s = NumberingScheme::LexBlocked { block: b };
                for (rank, c) in cells.iter().enumerate() {
                    assert_eq!(s.index_of(*c, dims).unwrap(), rank as u64, "{dims:?} b={b}");
                    assert_eq!(s.decode(rank as u64, dims), Some(*c));
                }
            }
        }
    }

    #[test]
    fn injective_up_to_32_cubed() {
        for dims in [[32, 32, 32], [31, 17, 5], [20, 6, 6], [13, 32, 1]] {
            for s in schemes() {
                let mut seen = HashSet::with_capacity(dims.iter().product());
                for c in all_cells(dims) {
                    let i = s.index_of(c, dims).unwrap();
                    assert!(seen.insert(i), "{s} collides on {dims:?}");
                    assert_eq!(s.decode(i, dims), Some(c));
                }
            }
        }
    }

    #[test]
    fn lex_unblocked_is_row_major() {
        let dims = [6, 5, 4];
        let s = NumberingScheme::LexBlocked { block: 1 };
        for c in all_cells(dims) {
            assert_eq!(
                s.index_of(c, dims).unwrap(),
                (c[0] + 6 * c[1] + 30 * c[2]) as u64
            );
        }
        let whole = NumberingScheme::LexBlocked { block: 6 };
        for c in all_cells(dims) {
            assert_eq!(
                whole.index_of(c, dims).unwrap(),
                s.index_of(c, dims).unwrap()
            );
        }
    }

    #[test]
    fn morton_bijective_on_power_of_two_cubes() {
        for n in [1usize, 2, 4, 8, 16] {
            let dims = [n, n, n];
            let s = NumberingScheme::Morton { group: 1 };
            let mut idx: Vec<u64> = all_cells(dims)
                .map(|c| s.index_of(c, dims).unwrap())
                .collect();
            idx.sort_unstable();
            assert!(idx.iter().enumerate().all(|(i, &v)| v == i as u64));
        }
    }

    #[test]
    fn next_existing_matches_linear_scan() {
        for group in [1u8, 2] {
            let s = NumberingScheme::Morton { group };
            for dims in [[5usize, 3, 2], [3, 7, 1], [6, 6, 6], [1, 1, 9], [9, 2, 5]] {
                let pad = dims.iter().max().unwrap().next_power_of_two() as u64;
                let space = morton_encode(group, [pad - 1; 3]) + 1;
                let mut expect = None;
                for from in (0..space + 3).rev() {
                    if from < space && s.decode(from, dims).is_some() {
                        expect = Some(from);
                    }
                    assert_eq!(
                        s.next_existing(from, dims),
                        expect,
                        "g={group} {dims:?} from={from}"
                    );
                }
            }
        }
    }

    #[test]
    fn scheme_text_roundtrip() {
        assert_eq!(
            NumberingScheme::LexBlocked { block: 100 }.to_string(),
            "lex:b=100"
        );
        assert_eq!(
            parse_scheme("morton:g=2").unwrap(),
            NumberingScheme::Morton { group: 2 }
        );
        for s in schemes() {
            assert_eq!(parse_scheme(&scheme_text(&s)).unwrap(), s);
        }
    }

    #[test]
    fn scheme_parse_errors_name_token() {
        let token = |s: &str| match parse_scheme(s) {
            Err(Error::SchemeParse { token }) => token,
            other => panic!("{s}: expected parse error, got {other:?}"),
        };
        assert_eq!(token("lex:b=0"), "0");
        assert_eq!(token("hilbert:b=2"), "hilbert");
        assert_eq!(token("morton:g=3"), "3");
        assert_eq!(token("lex:g=2"), "g");
        assert_eq!(token("lex"), "lex");
        assert_eq!(token("lex:b=x1"), "x1");
    }
}
