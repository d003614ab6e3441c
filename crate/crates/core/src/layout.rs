//! Layout algebra for MMA operand fragments.
//!
//! A [`Layout`] maps a coordinate to `Σ coord_i · stride_i`. A
//! [`FragmentMap`] records which thread of a thread group owns each element
//! of the A, B and C tiles of one MMA instruction. Maps are data files; the
//! compatibility check asks whether the C fragments of one multiply can be
//! fed as the A fragments of the next without moving any element between
//! threads.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FRAGMENT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LayoutError {
    #[error("shape {shape:?} and stride {stride:?} differ in rank")]
    Rank {
        shape: Vec<usize>,
        stride: Vec<usize>,
    },
    #[error("coordinate {coord:?} outside shape {shape:?}")]
    OutOfRange {
        coord: Vec<usize>,
        shape: Vec<usize>,
    },
    #[error("unknown instruction {0:?}")]
    UnknownInstr(String),
    #[error("fragment map {instr}: {detail}")]
    Map { instr: String, detail: String },
    #[error(
        "{instr}: {c_tiles} C tile(s) of width {n} cannot be re-tiled into A tiles of width {k}"
    )]
    Retile {
        instr: Instr,
        c_tiles: usize,
        n: usize,
        k: usize,
    },
    #[error("cannot read fragment map {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed fragment map: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Layout {
    pub shape: Vec<usize>,
    pub stride: Vec<usize>,
}

impl Layout {
    pub fn new(shape: Vec<usize>, stride: Vec<usize>) -> Result<Self, LayoutError> {
        if shape.len() != stride.len() {
            return Err(LayoutError::Rank { shape, stride });
        }
        Ok(Self { shape, stride })
    }

    pub fn size(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn eval(&self, coord: &[usize]) -> Result<usize, LayoutError> {
        if coord.len() != self.shape.len() || coord.iter().zip(&self.shape).any(|(c, s)| c >= s) {
            return Err(LayoutError::OutOfRange {
                coord: coord.to_vec(),
                shape: self.shape.clone(),
            });
        }
        Ok(coord.iter().zip(&self.stride).map(|(c, s)| c * s).sum())
    }

    /// Indices of all coordinates in lexicographic order (last mode fastest).
    pub fn enumerate(&self) -> Vec<usize> {
        let mut coord = vec![0; self.shape.len()];
        let mut out = Vec::with_capacity(self.size());
        if self.shape.contains(&0) {
            return out;
        }
        loop {
            out.push(coord.iter().zip(&self.stride).map(|(c, s)| c * s).sum());
            let mut i = coord.len();
            loop {
                if i == 0 {
                    return out;
                }
                i -= 1;
                coord[i] += 1;
                if coord[i] < self.shape[i] {
                    break;
                }
                coord[i] = 0;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Instr {
    #[serde(rename = "m16n8k16")]
    M16n8k16,
    #[serde(rename = "m8n8k4_f32acc")]
    M8n8k4F32Acc,
    #[serde(rename = "m8n8k4_f16acc")]
    M8n8k4F16Acc,
}

impl Instr {
    pub const ALL: [Instr; 3] = [Instr::M16n8k16, Instr::M8n8k4F32Acc, Instr::M8n8k4F16Acc];

    pub fn name(self) -> &'static str {
        match self {
            Instr::M16n8k16 => "m16n8k16",
            Instr::M8n8k4F32Acc => "m8n8k4_f32acc",
            Instr::M8n8k4F16Acc => "m8n8k4_f16acc",
        }
    }

    fn builtin_json(self) -> &'static str {
        match self {
            Instr::M16n8k16 => include_str!("../data/fragments/m16n8k16.json"),
            Instr::M8n8k4F32Acc => include_str!("../data/fragments/m8n8k4_f32acc.json"),
            Instr::M8n8k4F16Acc => include_str!("../data/fragments/m8n8k4_f16acc.json"),
        }
    }
}

impl fmt::Display for Instr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Instr {
    type Err = LayoutError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Instr::ALL
            .into_iter()
            .find(|i| i.name() == s)
            .ok_or_else(|| LayoutError::UnknownInstr(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Role {
    A,
    B,
    C,
}

/// Per-thread `(row, col)` coordinates of one operand tile; thread indices
/// are local to a thread group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleMap {
    pub rows: usize,
    pub cols: usize,
    pub threads: Vec<Vec<(usize, usize)>>,
}

impl RoleMap {
    /// Owner `(thread, register)` of every element, row-major.
    fn owners(&self) -> Result<Vec<(usize, usize)>, String> {
        let mut own: Vec<Option<(usize, usize)>> = vec![None; self.rows * self.cols];
        for (t, coords) in self.threads.iter().enumerate() {
            for (i, &(r, c)) in coords.iter().enumerate() {
                if r >= self.rows || c >= self.cols {
                    return Err(format!(
                        "thread {t} holds ({r}, {c}) outside {}x{}",
                        self.rows, self.cols
                    ));
                }
                if let Some((t0, _)) = own[r * self.cols + c].replace((t, i)) {
                    return Err(format!("element ({r}, {c}) owned by threads {t0} and {t}"));
                }
            }
        }
        own.into_iter()
            .enumerate()
            .map(|(e, o)| {
                o.ok_or_else(|| {
                    format!(
                        "element ({}, {}) has no owner",
                        e / self.cols,
                        e % self.cols
                    )
                })
            })
            .collect()
    }

    pub fn owner(&self, r: usize, c: usize) -> Option<(usize, usize)> {
        self.threads
            .iter()
            .enumerate()
            .find_map(|(t, coords)| coords.iter().position(|&x| x == (r, c)).map(|i| (t, i)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FragmentMap {
    pub schema_version: u32,
    pub instr: Instr,
    /// Warp lanes of each thread group, in group-local thread order. Each
    /// group computes its own independent tile.
    pub group_lanes: Vec<Vec<usize>>,
    pub a: RoleMap,
    pub b: RoleMap,
    pub c: RoleMap,
}

impl FragmentMap {
    pub fn builtin(instr: Instr) -> Self {
        Self::from_json(instr.builtin_json()).expect("shipped fragment map is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, LayoutError> {
        let map: Self = serde_json::from_str(text)?;
        map.validate()?;
        Ok(map)
    }

    pub fn from_path(path: &Path) -> Result<Self, LayoutError> {
        let text = std::fs::read_to_string(path).map_err(|source| LayoutError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn role(&self, role: Role) -> &RoleMap {
        match role {
            Role::A => &self.a,
            Role::B => &self.b,
            Role::C => &self.c,
        }
    }

    pub fn group_size(&self) -> usize {
        self.group_lanes.first().map_or(0, Vec::len)
    }

    /// `(group, local thread)` of a warp lane.
    pub fn locate_lane(&self, lane: usize) -> Option<(usize, usize)> {
        self.group_lanes
            .iter()
            .enumerate()
            .find_map(|(g, lanes)| lanes.iter().position(|&l| l == lane).map(|t| (g, t)))
    }

    fn err(&self, detail: String) -> LayoutError {
        LayoutError::Map {
            instr: self.instr.to_string(),
            detail,
        }
    }

    /// Checks the schema, that the groups partition the 32 lanes, and that
    /// every role partitions its tile.
    pub fn validate(&self) -> Result<(), LayoutError> {
        if self.schema_version != FRAGMENT_SCHEMA_VERSION {
            return Err(self.err(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        let gs = self.group_size();
        let mut seen = [false; 32];
        for lanes in &self.group_lanes {
            if lanes.len() != gs {
                return Err(self.err("thread groups differ in size".into()));
            }
            for &l in lanes {
                if l >= 32 || std::mem::replace(&mut seen[l], true) {
                    return Err(self.err(format!("lane {l} is out of range or repeated")));
                }
            }
        }
        if !seen.iter().all(|&s| s) {
            return Err(self.err("thread groups do not cover all 32 lanes".into()));
        }
        for (name, role) in [("A", &self.a), ("B", &self.b), ("C", &self.c)] {
            if role.threads.len() != gs {
                return Err(self.err(format!(
                    "role {name} lists {} threads, group has {gs}",
                    role.threads.len()
                )));
            }
            role.owners()
                .map_err(|d| self.err(format!("role {name}: {d}")))?;
        }
        if self.a.rows != self.c.rows {
            return Err(self.err("A and C tiles differ in rows".into()));
        }
        Ok(())
    }
}

pub fn layout_eval(l: &Layout, coord: &[usize]) -> Result<usize, LayoutError> {
    l.eval(coord)
}

/// Location of one A-operand register in the C fragments it is taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Source {
    pub c_tile: usize,
    pub thread: usize,
    pub reg: usize,
}

/// A fragments of the second multiply built from the C fragments of the
/// first, with the C register each A register comes from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Conversion {
    pub instr: Instr,
    pub c_tiles: usize,
    /// `a_tiles[tile][thread][reg]`: coordinate inside the A tile.
    pub a_tiles: Vec<Vec<Vec<(usize, usize)>>>,
    /// `sources[tile][thread][reg]`.
    pub sources: Vec<Vec<Vec<Source>>>,
}

/// One element that must change thread.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Move {
    pub from: Source,
    pub a_tile: usize,
    pub to_thread: usize,
    pub to_reg: usize,
}

impl Conversion {
    pub fn a_tile_count(&self) -> usize {
        self.a_tiles.len()
    }

    /// A registers per thread across all A tiles.
    pub fn a_regs_per_thread(&self) -> usize {
        self.a_tiles
            .iter()
            .map(|t| t.first().map_or(0, Vec::len))
            .sum()
    }

    /// Elements whose owner thread differs from the thread that needs them.
    pub fn moves(&self) -> Vec<Move> {
        let mut out = Vec::new();
        for (tile, threads) in self.sources.iter().enumerate() {
            for (t, regs) in threads.iter().enumerate() {
                for (i, s) in regs.iter().enumerate() {
                    if s.thread != t {
                        out.push(Move {
                            from: *s,
                            a_tile: tile,
                            to_thread: t,
                            to_reg: i,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn is_ownership_preserving(&self) -> bool {
        self.moves().is_empty()
    }

    /// Rebuilds the C fragments from the A fragments: `c[tile][thread][reg]`.
    pub fn invert(&self, c_cols: usize, k: usize) -> Vec<Vec<Vec<(usize, usize)>>> {
        let threads = self.sources.first().map_or(0, Vec::len);
        let regs = self
            .sources
            .iter()
            .flatten()
            .flatten()
            .filter(|s| s.c_tile == 0 && s.thread == 0)
            .count();
        let mut c = vec![vec![vec![(usize::MAX, usize::MAX); regs]; threads]; self.c_tiles];
        for (tile, ts) in self.a_tiles.iter().enumerate() {
            for (t, coords) in ts.iter().enumerate() {
                for (i, &(r, col)) in coords.iter().enumerate() {
                    let s = self.sources[tile][t][i];
                    let global = tile * k + col;
                    c[s.c_tile][s.thread][s.reg] = (r, global - s.c_tile * c_cols);
                }
            }
        }
        c
    }
}

/// Re-tiles `c_tiles` side-by-side C tiles of `instr` into A tiles along the
/// column axis. The total width must be a whole number of A tiles.
pub fn convert_layout_acc_aregs(
    map: &FragmentMap,
    c_tiles: usize,
) -> Result<Conversion, LayoutError> {
    let (n, k) = (map.c.cols, map.a.cols);
    if c_tiles == 0 || !(c_tiles * n).is_multiple_of(k) {
        return Err(LayoutError::Retile {
            instr: map.instr,
            c_tiles,
            n,
            k,
        });
    }
    let c_owner = map.c.owners().map_err(|d| map.err(d))?;
    let a_tiles = c_tiles * n / k;
    let mut coords = Vec::with_capacity(a_tiles);
    let mut sources = Vec::with_capacity(a_tiles);
    for tile in 0..a_tiles {
        coords.push(map.a.threads.clone());
        sources.push(
            map.a
                .threads
                .iter()
                .map(|regs| {
                    regs.iter()
                        .map(|&(r, c)| {
                            let global = tile * k + c;
                            let (thread, reg) = c_owner[r * n + global % n];
                            Source {
                                c_tile: global / n,
                                thread,
                                reg,
                            }
                        })
                        .collect()
                })
                .collect(),
        );
    }
    Ok(Conversion {
        instr: map.instr,
        c_tiles,
        a_tiles: coords,
        sources,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Compat {
    pub instr: Instr,
    pub compatible: bool,
    /// Elements, summed over the group, that a thread holds in C but does
    /// not need as A.
    pub exchanges_needed: usize,
    /// The same count per group-local thread.
    pub per_thread: Vec<usize>,
    pub c_tiles: usize,
}

/// Smallest C strip that is a whole number of A tiles.
fn strip_tiles(map: &FragmentMap) -> usize {
    let (n, k) = (map.c.cols, map.a.cols);
    lcm(n, k) / n
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

pub fn check_b2b_compat_map(map: &FragmentMap) -> Result<Compat, LayoutError> {
    let c_tiles = strip_tiles(map);
    let conv = convert_layout_acc_aregs(map, c_tiles)?;
    let mut per_thread = vec![0; map.group_size()];
    for m in conv.moves() {
        per_thread[m.from.thread] += 1;
    }
    let exchanges_needed = per_thread.iter().sum();
    Ok(Compat {
        instr: map.instr,
        compatible: exchanges_needed == 0,
        exchanges_needed,
        per_thread,
        c_tiles,
    })
}

pub fn check_b2b_compat(instr: &str) -> Result<Compat, LayoutError> {
    check_b2b_compat_map(&FragmentMap::builtin(instr.parse()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn column_major_example() {
        let l = Layout::new(vec![4, 2], vec![1, 4]).unwrap();
        assert_eq!(l.eval(&[2, 1]).unwrap(), 6);
        assert_eq!(l.eval(&[0, 0]).unwrap(), 0);
        assert!(l.eval(&[4, 0]).is_err());
        assert!(Layout::new(vec![4], vec![1, 4]).is_err());
    }

    #[test]
    fn row_major_enumeration() {
        let l = Layout::new(vec![3, 3], vec![3, 1]).unwrap();
        assert_eq!(l.enumerate(), (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn builtin_maps_validate() {
        for i in Instr::ALL {
            let m = FragmentMap::builtin(i);
            assert_eq!(m.instr, i);
            assert_eq!(m.locate_lane(0), Some((0, 0)));
        }
        assert!("m8n8k8".parse::<Instr>().is_err());
    }

    #[test]
    fn verdicts() {
        let v: Vec<bool> = ["m16n8k16", "m8n8k4_f32acc", "m8n8k4_f16acc"]
            .iter()
            .map(|i| check_b2b_compat(i).unwrap().compatible)
            .collect();
        assert_eq!(v, vec![true, false, true]);
        assert!(check_b2b_compat("wgmma").is_err());
    }

    #[test]
    fn odd_tile_count_rejected() {
        let m = FragmentMap::builtin(Instr::M16n8k16);
        assert!(matches!(
            convert_layout_acc_aregs(&m, 1),
            Err(LayoutError::Retile { .. })
        ));
        assert_eq!(
            convert_layout_acc_aregs(&m, 2).unwrap().a_regs_per_thread(),
            8
        );
    }

    #[test]
    fn validate_rejects_double_ownership() {
        let mut m = FragmentMap::builtin(Instr::M8n8k4F16Acc);
        m.c.threads[1][0] = m.c.threads[0][0];
        assert!(m.validate().is_err());
    }
}
