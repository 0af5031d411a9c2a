//! Multivariate series, dimension permutations and the rotation cube.
//!
//! A cube built from a series `T` with dimensions `D` and a permutation `pi`
//! arranges `S = [T^(pi(0)), ..., T^(pi(D-1))]` into a `D × D` grid of
//! series. The bottom row holds `S` in order and each row above is rotated
//! left by one more step:
//!
//! ```text
//! cells[r][c] = S[(c + D - 1 - r) mod D]
//! ```
//!
//! so every row and every column contains each dimension exactly once.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `D × n` real values, row-major by dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultivariateSeries {
    dims: usize,
    len: usize,
    values: Vec<f64>,
    label: Option<usize>,
    mask: Option<Vec<bool>>,
}

impl MultivariateSeries {
    pub fn new(dims: usize, len: usize, values: Vec<f64>) -> Result<Self> {
        if dims == 0 || len == 0 {
            return Err(Error::Config(format!(
                "series needs at least one dimension and one timestamp, got {dims}×{len}"
            )));
        }
        if values.len() != dims * len {
            return Err(Error::shape(
                "series",
                format!("{dims}×{len} needs {} values, got {}", dims * len, values.len()),
            ));
        }
        Ok(MultivariateSeries {
            dims,
            len,
            values,
            label: None,
            mask: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let len = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != len) {
            return Err(Error::shape(
                "series",
                format!("row {i} has {} values, expected {len}", r.len()),
            ));
        }
        Self::new(rows.len(), len, rows.concat())
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.values.len() {
            return Err(Error::shape(
                "series mask",
                format!("mask has {} cells, series has {}", mask.len(), self.values.len()),
            ));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, dim: usize) -> &[f64] {
        &self.values[dim * self.len..(dim + 1) * self.len]
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }

    pub fn set_label(&mut self, label: Option<usize>) {
        self.label = label;
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn positive_cells(&self) -> usize {
        self.mask.as_ref().map_or(0, |m| m.iter().filter(|&&b| b).count())
    }
}

/// `pi[r]` is the original dimension placed at slot `r`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn identity(dims: usize) -> Self {
        Permutation((0..dims).collect())
    }

    pub fn new(order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &d in &order {
            if d >= order.len() || std::mem::replace(&mut seen[d], true) {
                return Err(Error::Config(format!("{order:?} is not a permutation")));
            }
        }
        Ok(Permutation(order))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// `inverse()[d]` is the slot holding original dimension `d`.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.0.len()];
        for (slot, &d) in self.0.iter().enumerate() {
            inv[d] = slot;
        }
        inv
    }
}

/// Slot of `S` shown at `(row, col)` of a `dims`-wide cube.
pub fn cube_slot(row: usize, col: usize, dims: usize) -> usize {
    (col + dims - 1 - row) % dims
}

/// Rotation cube of one series under one permutation.
#[derive(Clone, Debug, PartialEq)]
pub struct InputCube {
    dims: usize,
    len: usize,
    /// rows × columns × time
    cells: Vec<f64>,
    permutation: Permutation,
}

impl InputCube {
    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn permutation(&self) -> &Permutation {
        &self.permutation
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.dims + col) * self.len;
        &self.cells[start..start + self.len]
    }

    /// Original dimension shown at `(row, col)`.
    pub fn dimension_at(&self, row: usize, col: usize) -> usize {
        self.permutation.0[cube_slot(row, col, self.dims)]
    }

    pub fn cells(&self) -> &[f64] {
        &self.cells
    }
}

pub fn build_cube(series: &MultivariateSeries, perm: &Permutation) -> Result<InputCube> {
    let dims = series.dims();
    if perm.len() != dims {
        return Err(Error::shape(
            "build_cube",
            format!("permutation of length {} for {dims} dimensions", perm.len()),
        ));
    }
    let len = series.len();
    let mut cells = Vec::with_capacity(dims * dims * len);
    for row in 0..dims {
        for col in 0..dims {
            cells.extend_from_slice(series.row(perm.0[cube_slot(row, col, dims)]));
        }
    }
    Ok(InputCube {
        dims,
        len,
        cells,
        permutation: perm.clone(),
    })
}

/// Row of the cube holding original dimension `dim` at column `pos`.
///
/// The rotation makes this row unique.
pub fn idx(dim: usize, pos: usize, perm: &Permutation, dims: usize) -> Result<usize> {
    if perm.len() != dims || dim >= dims || pos >= dims {
        return Err(Error::Contract(format!(
            "idx({dim}, {pos}) with {dims} dimensions and permutation of length {}",
            perm.len()
        )));
    }
    let slot = perm.inverse()[dim];
    Ok(row_for_slot(slot, pos, dims))
}

/// Row where slot `slot` of `S` appears at column `pos`.
pub fn row_for_slot(slot: usize, pos: usize, dims: usize) -> usize {
    (dims - 1 + pos + dims - slot) % dims
}

/// `count` permutations drawn independently and uniformly (with
/// replacement) by Fisher–Yates shuffles of one seeded stream.
pub fn sample_permutations(dims: usize, count: usize, seed: u64) -> Vec<Permutation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut order: Vec<usize> = (0..dims).collect();
            order.shuffle(&mut rng);
            Permutation(order)
        })
        .collect()
}

/// Path of the mask sidecar for a series file: `x.csv` -> `x.mask.csv`.
pub fn mask_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.mask.csv"))
}

fn read_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let row = line
            .split(',')
            .map(|c| {
                let c = c.trim();
                c.parse::<f64>()
                    .map_err(|_| parse_err(format!("non-numeric cell {c:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(parse_err(format!("ragged row: {} columns, expected {w}", row.len())))
            }
            _ => {}
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "no data rows".into(),
        });
    }
    Ok(rows)
}

fn write_rows(path: &Path, rows: usize, cols: usize, cell: impl Fn(usize) -> String) -> Result<()> {
    let mut out = String::new();
    for r in 0..rows {
        for c in 0..cols {
            if c > 0 {
                out.push(',');
            }
            out.push_str(&cell(r * cols + c));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads one row per dimension; picks up `<name>.mask.csv` when present.
pub fn load_series_csv(path: &Path) -> Result<MultivariateSeries> {
    let rows = read_rows(path)?;
    let series = MultivariateSeries::from_rows(&rows)?;
    let mpath = mask_path(path);
    if !mpath.exists() {
        return Ok(series);
    }
    let mask = read_mask(&mpath, series.dims(), series.len())?;
    series.with_mask(mask)
}

pub(crate) fn read_mask(path: &Path, dims: usize, len: usize) -> Result<Vec<bool>> {
    let rows = read_rows(path)?;
    if rows.len() != dims || rows[0].len() != len {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: format!("mask is {}×{}, series is {dims}×{len}", rows.len(), rows[0].len()),
        });
    }
    rows.concat()
        .into_iter()
        .enumerate()
        .map(|(i, v)| match v {
            0.0 => Ok(false),
            1.0 => Ok(true),
            v => Err(Error::Parse {
                path: path.to_path_buf(),
                line: i / len + 1,
                message: format!("mask cell {v} is not 0 or 1"),
            }),
        })
        .collect()
}

/// Writes values with shortest round-trip formatting, plus the mask sidecar
/// when the series carries one.
pub fn save_series_csv(series: &MultivariateSeries, path: &Path) -> Result<()> {
    write_rows(path, series.dims(), series.len(), |i| {
        let mut s = String::new();
        write!(s, "{}", series.values[i]).expect("string write");
        s
    })?;
    if let Some(mask) = series.mask() {
        write_rows(&mask_path(path), series.dims(), series.len(), |i| {
            if mask[i] { "1" } else { "0" }.to_string()
        })?;
    }
    Ok(())
}

/// Writes a `rows × cols` grid of scores as CSV.
pub fn save_grid_csv(values: &[f64], rows: usize, cols: usize, path: &Path) -> Result<()> {
    write_rows(path, rows, cols, |i| format!("{}", values[i]))
}
