//! Learnable relative-position dictionaries and relation matrices.
//!
//! A dictionary holds one learnable bias per signed position offset: an axis
//! of extent `M` contributes `2M-1` offsets. Expanding a dictionary over every
//! ordered pair of window positions yields the relation matrix `R`, which is
//! Toeplitz along each axis by construction.
//!
//! Positions are flattened time-major, then row-major over height and width.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::init::{trunc_normal, SeededRng};
use crate::tensor::kernels::axpy;
use crate::tensor::{Tape, Tensor, Var};

/// Extents of a spatio-temporal window (frames × height × width).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Window {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Window {
    pub const fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }

    pub fn tokens(&self) -> usize {
        self.t * self.h * self.w
    }

    /// Element-wise minimum, used when a stage is smaller than its window.
    pub fn clamp_to(&self, extent: Window) -> Window {
        Window::new(self.t.min(extent.t), self.h.min(extent.h), self.w.min(extent.w))
    }

    pub fn fits_within(&self, other: &Window) -> bool {
        self.t <= other.t && self.h <= other.h && self.w <= other.w
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.t, self.h, self.w)
    }
}

/// Which window axes a dictionary spans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelPosKind {
    Temporal,
    Spatial,
    SpatioTemporal,
}

impl RelPosKind {
    /// Extents of the axes this kind mixes, outermost first.
    pub fn axes(self, window: Window) -> Vec<usize> {
        match self {
            RelPosKind::Temporal => vec![window.t],
            RelPosKind::Spatial => vec![window.h, window.w],
            RelPosKind::SpatioTemporal => vec![window.t, window.h, window.w],
        }
    }

    pub fn tokens(self, window: Window) -> usize {
        self.axes(window).iter().product()
    }

    /// Number of offsets per group: `Π (2M-1)` over the mixed axes.
    pub fn offsets(self, window: Window) -> usize {
        self.axes(window).iter().map(|m| 2 * m - 1).product()
    }

    /// Shape of a `groups`-way dictionary table.
    pub fn table_shape(self, window: Window, groups: usize) -> Vec<usize> {
        std::iter::once(groups)
            .chain(self.axes(window).into_iter().map(|m| 2 * m - 1))
            .collect()
    }
}

fn check_extents(window: Window) -> Result<()> {
    if window.t == 0 || window.h == 0 || window.w == 0 {
        return Err(Error::Invalid(format!("window extents must be positive, got {window}")));
    }
    Ok(())
}

/// `groups` learnable bias tables indexed by relative position offset.
#[derive(Debug, Clone, PartialEq)]
pub struct RelPosDictionary {
    pub kind: RelPosKind,
    pub window: Window,
    pub groups: usize,
    pub table: Tensor,
}

impl RelPosDictionary {
    pub fn new(kind: RelPosKind, window: Window, groups: usize, init_std: f64, rng: &mut SeededRng) -> Result<Self> {
        check_extents(window)?;
        if groups == 0 {
            return Err(Error::Invalid("dictionary needs at least one group".into()));
        }
        let table = trunc_normal(kind.table_shape(window, groups), init_std, rng);
        Ok(Self { kind, window, groups, table })
    }

    pub fn from_table(kind: RelPosKind, window: Window, table: Tensor) -> Result<Self> {
        check_extents(window)?;
        let groups = table.shape()[0];
        if table.shape() != kind.table_shape(window, groups) {
            return Err(Error::shape(
                "dictionary",
                format!("table {:?} for {kind:?} window {window}", table.shape()),
            ));
        }
        Ok(Self { kind, window, groups, table })
    }

    pub fn param_count(&self) -> usize {
        self.table.len()
    }

    pub fn tokens(&self) -> usize {
        self.kind.tokens(self.window)
    }

    /// Dense `groups × N × N` relation matrices over the full window.
    pub fn expand(&self) -> RelPosMatrix {
        self.expand_at(self.window).expect("full window always fits")
    }

    /// Relation matrices for a (possibly smaller) runtime window, read from
    /// the centered part of the table so offsets keep their meaning.
    pub fn expand_at(&self, runtime: Window) -> Result<RelPosMatrix> {
        let index = relation_index(self.kind, self.window, runtime, self.groups)?;
        let n = self.kind.tokens(runtime);
        let src = self.table.data();
        let data = index.iter().map(|&i| src[i]).collect();
        Ok(RelPosMatrix {
            kind: self.kind,
            matrix: Tensor::new([self.groups, n, n], data)?,
        })
    }
}

/// Non-learnable `groups × N × N` view expanded from a dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct RelPosMatrix {
    pub kind: RelPosKind,
    pub matrix: Tensor,
}

impl RelPosMatrix {
    pub fn tokens(&self) -> usize {
        self.matrix.shape()[1]
    }

    /// One group's `N × N` matrix.
    pub fn group(&self, g: usize) -> Tensor {
        let n = self.tokens();
        let data = self.matrix.data()[g * n * n..(g + 1) * n * n].to_vec();
        Tensor::new([n, n], data).expect("group slice is square")
    }
}

/// Flat table index for the offset between two positions.
///
/// Along an axis of extent `M`, offset `p_i − p_j` lands at `p_i − p_j + M − 1`;
/// per-axis indices combine row-major over the `(2M−1)` table extents.
pub fn offset_index(pos_i: &[usize], pos_j: &[usize], extents: &[usize]) -> Result<usize> {
    if pos_i.len() != extents.len() || pos_j.len() != extents.len() {
        return Err(Error::Invalid(format!(
            "positions {pos_i:?}/{pos_j:?} do not match extents {extents:?}"
        )));
    }
    let mut flat = 0;
    for ((&a, &b), &m) in pos_i.iter().zip(pos_j).zip(extents) {
        if a >= m || b >= m {
            return Err(Error::Invalid(format!("position out of range: {pos_i:?}/{pos_j:?} in {extents:?}")));
        }
        flat = flat * (2 * m - 1) + (a + m - 1 - b);
    }
    Ok(flat)
}

fn unflatten(mut flat: usize, extents: &[usize], out: &mut [usize]) {
    for d in (0..extents.len()).rev() {
        out[d] = flat % extents[d];
        flat /= extents[d];
    }
}

/// Gather indices realizing `R[g][i][j] = table[g][offset(i, j)]` for a
/// `runtime` window inside a dictionary sized for `dict_window`.
pub fn relation_index(kind: RelPosKind, dict_window: Window, runtime: Window, groups: usize) -> Result<Vec<usize>> {
    check_extents(runtime)?;
    let dict_axes = kind.axes(dict_window);
    let run_axes = kind.axes(runtime);
    if run_axes.iter().zip(&dict_axes).any(|(r, d)| r > d) {
        return Err(Error::shape(
            "relation_index",
            format!("runtime window {runtime} exceeds dictionary window {dict_window} for {kind:?}"),
        ));
    }
    let n: usize = run_axes.iter().product();
    let offsets = kind.offsets(dict_window);
    let rank = run_axes.len();
    let (mut pi, mut pj) = (vec![0; rank], vec![0; rank]);
    // Map runtime positions into the dictionary's coordinate frame: only
    // differences matter, so no shift is needed.
    let mut base = Vec::with_capacity(n * n);
    for i in 0..n {
        unflatten(i, &run_axes, &mut pi);
        for j in 0..n {
            unflatten(j, &run_axes, &mut pj);
            base.push(offset_index(&pi, &pj, &dict_axes)?);
        }
    }
    let mut index = Vec::with_capacity(groups * n * n);
    for g in 0..groups {
        index.extend(base.iter().map(|&b| g * offsets + b));
    }
    Ok(index)
}

/// Whether `matrix[i][j]` depends only on the offset between positions `i`
/// and `j` of `window`.
pub fn is_translation_invariant(kind: RelPosKind, window: Window, matrix: &Tensor) -> bool {
    let axes = kind.axes(window);
    let n: usize = axes.iter().product();
    if matrix.shape() != [n, n] {
        return false;
    }
    let mut seen: HashMap<usize, f64> = HashMap::new();
    let (mut pi, mut pj) = (vec![0; axes.len()], vec![0; axes.len()]);
    for i in 0..n {
        unflatten(i, &axes, &mut pi);
        for j in 0..n {
            unflatten(j, &axes, &mut pj);
            let off = offset_index(&pi, &pj, &axes).expect("positions in range");
            let v = matrix.data()[i * n + j];
            if *seen.entry(off).or_insert(v) != v {
                return false;
            }
        }
    }
    true
}

/// Memoized [`relation_index`] tables, shared across forward passes.
#[derive(Debug, Default)]
pub struct RelationIndexCache {
    entries: HashMap<(RelPosKind, Window, Window, usize), Arc<Vec<usize>>>,
}

impl RelationIndexCache {
    pub fn get(&mut self, kind: RelPosKind, dict_window: Window, runtime: Window, groups: usize) -> Result<Arc<Vec<usize>>> {
        let key = (kind, dict_window, runtime, groups);
        if let Some(hit) = self.entries.get(&key) {
            return Ok(hit.clone());
        }
        let index = Arc::new(relation_index(kind, dict_window, runtime, groups)?);
        self.entries.insert(key, index.clone());
        Ok(index)
    }
}

/// Differentiable expansion of a taped dictionary table into `[g, N, N]`.
pub fn relation_matrix(
    tape: &mut Tape,
    table: Var,
    kind: RelPosKind,
    dict_window: Window,
    runtime: Window,
    cache: &mut RelationIndexCache,
) -> Result<Var> {
    let groups = tape.shape(table)[0];
    if tape.shape(table) != kind.table_shape(dict_window, groups) {
        return Err(Error::shape(
            "relation_matrix",
            format!("table {:?} for {kind:?} window {dict_window}", tape.shape(table)),
        ));
    }
    let index = cache.get(kind, dict_window, runtime, groups)?;
    let n = kind.tokens(runtime);
    tape.gather(table, index, [groups, n, n])
}

/// Token mixing straight from the dictionary, without materializing `R`.
///
/// `x` is viewed as `[outer, N, inner, channels]`; channel groups are
/// contiguous. Memory beyond the output is `O(rank)`.
pub fn lazy_mix(dict: &RelPosDictionary, runtime: Window, x: &Tensor, outer: usize, inner: usize) -> Result<Tensor> {
    let run_axes = dict.kind.axes(runtime);
    let dict_axes = dict.kind.axes(dict.window);
    let n: usize = run_axes.iter().product();
    let c = x.channels();
    if outer * n * inner * c != x.len() || !c.is_multiple_of(dict.groups) {
        return Err(Error::shape("lazy_mix", format!("{:?} as {outer}x{n}x{inner}x{c}", x.shape())));
    }
    let cg = c / dict.groups;
    let offsets = dict.kind.offsets(dict.window);
    let table = dict.table.data();
    let slab = inner * c;
    let rank = run_axes.len();
    let (mut pi, mut pj) = (vec![0; rank], vec![0; rank]);
    let mut out = vec![0.0; x.len()];
    for i in 0..n {
        unflatten(i, &run_axes, &mut pi);
        for j in 0..n {
            unflatten(j, &run_axes, &mut pj);
            let off = offset_index(&pi, &pj, &dict_axes)?;
            for o in 0..outer {
                let (yb, xb) = ((o * n + i) * slab, (o * n + j) * slab);
                for s in 0..inner {
                    for g in 0..dict.groups {
                        let r = table[g * offsets + off];
                        let span = s * c + g * cg..s * c + (g + 1) * cg;
                        axpy(
                            &mut out[yb + span.start..yb + span.end],
                            r,
                            &x.data()[xb + span.start..xb + span.end],
                        );
                    }
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Writes an `N × N` matrix as comma-separated rows.
pub fn write_csv(matrix: &Tensor, path: &Path) -> Result<()> {
    let [rows, cols] = square_dims(matrix)?;
    let mut out = String::with_capacity(rows * cols * 24);
    for r in 0..rows {
        let line: Vec<String> = matrix.data()[r * cols..(r + 1) * cols].iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path)?;
    let mut data = Vec::new();
    let mut rows = 0;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|e| Error::Invalid(format!("{}: bad value `{field}`: {e}", path.display())))?;
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 || data.len() % rows != 0 {
        return Err(Error::Invalid(format!("{}: ragged matrix", path.display())));
    }
    let cols = data.len() / rows;
    Tensor::new([rows, cols], data)
}

/// Writes a binary (P5) 8-bit greyscale heatmap, min-max normalized.
pub fn write_pgm(matrix: &Tensor, path: &Path) -> Result<()> {
    let [rows, cols] = square_dims(matrix)?;
    let lo = matrix.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = matrix.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let pixels: Vec<u8> = matrix
        .data()
        .iter()
        .map(|v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect();
    let mut file = fs::File::create(path)?;
    write!(file, "P5\n{cols} {rows}\n255\n")?;
    file.write_all(&pixels)?;
    Ok(())
}

fn square_dims(matrix: &Tensor) -> Result<[usize; 2]> {
    match matrix.shape() {
        [r, c] => Ok([*r, *c]),
        other => Err(Error::shape("export", format!("expected a matrix, got {other:?}"))),
    }
}
