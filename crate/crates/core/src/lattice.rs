//! Product-space bookkeeping and sampled fields on periodic grids.
//!
//! A [`LatticeGrid`] samples the torus `Π [-extent_a, extent_a)` with an even
//! number of nodes per axis. Node values are stored row-major: the last axis
//! varies fastest and the axes of factor 1 come first. Frequencies follow the
//! FFT ordering, `ξ = k / (2·extent)` for `k` in `[-N/2, N/2)`.

use std::io::{Read, Write};
use std::ops::Range;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported factor dimension.
pub const MAX_FACTOR_DIM: usize = 3;

/// A subset of the factor indices `{0, …, d-1}`.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FactorSet(u64);

impl FactorSet {
    pub const EMPTY: FactorSet = FactorSet(0);

    pub fn full(d: usize) -> Self {
        if d >= 64 {
            FactorSet(u64::MAX)
        } else {
            FactorSet((1u64 << d) - 1)
        }
    }

    pub fn from_indices<I: IntoIterator<Item = usize>>(idx: I) -> Self {
        idx.into_iter().fold(FactorSet(0), |s, i| s.with(i))
    }

    pub fn with(self, i: usize) -> Self {
        FactorSet(self.0 | (1u64 << i))
    }

    pub fn contains(self, i: usize) -> bool {
        i < 64 && self.0 & (1u64 << i) != 0
    }

    pub fn union(self, other: Self) -> Self {
        FactorSet(self.0 | other.0)
    }

    pub fn intersection(self, other: Self) -> Self {
        FactorSet(self.0 & other.0)
    }

    pub fn difference(self, other: Self) -> Self {
        FactorSet(self.0 & !other.0)
    }

    pub fn is_subset(self, other: Self) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        (0..64).filter(move |&i| self.contains(i))
    }
}

impl std::fmt::Debug for FactorSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

/// The product structure `ℝ^{n_1} × … × ℝ^{n_d}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductSpace {
    dims: Vec<usize>,
}

impl ProductSpace {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidSpace("need at least one factor".into()));
        }
        if let Some(&bad) = dims.iter().find(|&&n| n == 0 || n > MAX_FACTOR_DIM) {
            return Err(Error::InvalidSpace(format!(
                "factor dimension {bad} outside 1..={MAX_FACTOR_DIM}"
            )));
        }
        Ok(Self { dims: dims.to_vec() })
    }

    /// Number of parameters `d`.
    pub fn d(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dim(&self, i: usize) -> usize {
        self.dims[i]
    }

    /// Total dimension `n = Σ nᵢ`.
    pub fn n(&self) -> usize {
        self.dims.iter().sum()
    }

    /// Axis range occupied by factor `i`.
    pub fn factor_axes(&self, i: usize) -> Range<usize> {
        let start: usize = self.dims[..i].iter().sum();
        start..start + self.dims[i]
    }

    pub fn factor_of_axis(&self, axis: usize) -> usize {
        let mut acc = 0;
        for (i, &n) in self.dims.iter().enumerate() {
            acc += n;
            if axis < acc {
                return i;
            }
        }
        panic!("axis {axis} out of range for n = {}", self.n());
    }

    pub fn axes_of(&self, set: FactorSet) -> Vec<usize> {
        set.iter()
            .filter(|&i| i < self.d())
            .flat_map(|i| self.factor_axes(i))
            .collect()
    }

    /// Euclidean norm of the factor-`i` block of a point.
    pub fn factor_norm(&self, i: usize, v: &[f64]) -> f64 {
        v[self.factor_axes(i)].iter().map(|t| t * t).sum::<f64>().sqrt()
    }
}

/// Uniform periodic sampling of a product space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeGrid {
    space: ProductSpace,
    extent: Vec<f64>,
    points: Vec<usize>,
}

impl LatticeGrid {
    /// Per-axis constructor. `extent` and `points` each hold `n` entries.
    pub fn make(space: ProductSpace, extent: &[f64], points: &[usize]) -> Result<Self> {
        let n = space.n();
        if extent.len() != n || points.len() != n {
            return Err(Error::InvalidGrid(format!(
                "expected {n} per-axis entries, got {} extents and {} point counts",
                extent.len(),
                points.len()
            )));
        }
        for (a, (&e, &p)) in extent.iter().zip(points).enumerate() {
            if !(e.is_finite() && e > 0.0) {
                return Err(Error::InvalidGrid(format!("axis {a}: extent {e} must be positive")));
            }
            if p < 8 || p % 2 != 0 {
                return Err(Error::InvalidGrid(format!(
                    "axis {a}: points {p} must be even and at least 8"
                )));
            }
        }
        Ok(Self { space, extent: extent.to_vec(), points: points.to_vec() })
    }

    /// Same extent and point count on every axis.
    pub fn uniform(space: ProductSpace, extent: f64, points: usize) -> Result<Self> {
        let n = space.n();
        Self::make(space, &vec![extent; n], &vec![points; n])
    }

    pub fn space(&self) -> &ProductSpace {
        &self.space
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.extent[axis]
    }

    pub fn extents(&self) -> &[f64] {
        &self.extent
    }

    pub fn points(&self, axis: usize) -> usize {
        self.points[axis]
    }

    pub fn point_counts(&self) -> &[usize] {
        &self.points
    }

    /// Torus period `2·extent` along an axis.
    pub fn period(&self, axis: usize) -> f64 {
        2.0 * self.extent[axis]
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        2.0 * self.extent[axis] / self.points[axis] as f64
    }

    pub fn coord(&self, axis: usize, k: usize) -> f64 {
        self.extent[axis] * (2.0 * k as f64 / self.points[axis] as f64 - 1.0)
    }

    /// Index of the node nearest to `x` along an axis (wrapped onto the torus).
    pub fn nearest_index(&self, axis: usize, x: f64) -> usize {
        let n = self.points[axis] as i64;
        let k = ((x + self.extent[axis]) / self.spacing(axis)).round() as i64;
        k.rem_euclid(n) as usize
    }

    /// Signed integer frequency of FFT slot `idx`.
    pub fn freq_index(&self, axis: usize, idx: usize) -> i64 {
        let n = self.points[axis];
        if idx < n / 2 {
            idx as i64
        } else {
            idx as i64 - n as i64
        }
    }

    pub fn frequency(&self, axis: usize, idx: usize) -> f64 {
        self.freq_index(axis, idx) as f64 / self.period(axis)
    }

    /// Largest resolvable `|ξ|` along an axis, `points / (4·extent)`.
    pub fn max_frequency(&self, axis: usize) -> f64 {
        self.points[axis] as f64 / (4.0 * self.extent[axis])
    }

    pub fn node_count(&self) -> usize {
        self.points.iter().product()
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.n()).map(|a| self.spacing(a)).product()
    }

    pub fn frequency_cell_volume(&self) -> f64 {
        (0..self.n()).map(|a| 1.0 / self.period(a)).product()
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.n()];
        for a in (0..self.n().saturating_sub(1)).rev() {
            s[a] = s[a + 1] * self.points[a + 1];
        }
        s
    }

    pub fn multi_index(&self, mut node: usize, out: &mut [usize]) {
        for a in (0..self.n()).rev() {
            out[a] = node % self.points[a];
            node /= self.points[a];
        }
    }

    pub fn node_coords(&self, node: usize, out: &mut [f64]) {
        let mut rem = node;
        for a in (0..self.n()).rev() {
            let k = rem % self.points[a];
            rem /= self.points[a];
            out[a] = self.coord(a, k);
        }
    }

    pub fn node_frequency(&self, node: usize, out: &mut [f64]) {
        let mut rem = node;
        for a in (0..self.n()).rev() {
            let k = rem % self.points[a];
            rem /= self.points[a];
            out[a] = self.frequency(a, k);
        }
    }

    /// The single-factor grid carried by factor `i`.
    pub fn factor_grid(&self, i: usize) -> LatticeGrid {
        let axes = self.space.factor_axes(i);
        LatticeGrid {
            space: ProductSpace { dims: vec![self.space.dim(i)] },
            extent: self.extent[axes.clone()].to_vec(),
            points: self.points[axes].to_vec(),
        }
    }

    pub fn same_sampling(&self, other: &LatticeGrid) -> bool {
        self == other
    }
}

/// Complex samples on every node of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledField {
    grid: LatticeGrid,
    values: Vec<Complex64>,
}

impl SampledField {
    pub fn new(grid: LatticeGrid, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(Error::GridMismatch(format!(
                "{} values for {} nodes",
                values.len(),
                grid.node_count()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: LatticeGrid) -> Self {
        let len = grid.node_count();
        Self { grid, values: vec![Complex64::new(0.0, 0.0); len] }
    }

    /// Samples `f` at every node, in parallel over nodes.
    pub fn from_fn<F>(grid: LatticeGrid, f: F) -> Self
    where
        F: Fn(&[f64]) -> Complex64 + Sync,
    {
        let n = grid.n();
        let values = (0..grid.node_count())
            .into_par_iter()
            .map_init(
                || vec![0.0; n],
                |x, node| {
                    grid.node_coords(node, x);
                    f(x)
                },
            )
            .collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &LatticeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<Complex64> {
        self.values
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.values.iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("sampled field".into()))
        }
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: Complex64, other: &SampledField, b: Complex64) -> Result<Self> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch("fields live on different grids".into()));
        }
        let values = self.values.iter().zip(&other.values).map(|(x, y)| a * x + b * y).collect();
        Ok(Self { grid: self.grid.clone(), values })
    }

    pub fn sub(&self, other: &SampledField) -> Result<Self> {
        self.combine(Complex64::new(1.0, 0.0), other, Complex64::new(-1.0, 0.0))
    }

    pub fn lp_norm(&self, p: Exponent) -> Result<f64> {
        lp_norm(self, p)
    }
}

/// Norm exponents supported by the Riemann-sum norms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Exponent {
    One,
    Two,
    Inf,
}

impl Exponent {
    fn power(self, v: f64) -> f64 {
        match self {
            Exponent::One => v,
            Exponent::Two => v * v,
            Exponent::Inf => v,
        }
    }

    fn root(self, v: f64) -> f64 {
        match self {
            Exponent::One | Exponent::Inf => v,
            Exponent::Two => v.sqrt(),
        }
    }

    fn reduce(self, vals: &[f64], cell: f64) -> f64 {
        match self {
            Exponent::Inf => vals.iter().copied().fold(0.0, f64::max),
            _ => self.root(pairwise_sum(vals) * cell),
        }
    }
}

/// Fixed-shape pairwise summation; the tree depends only on the length.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if v.len() <= BLOCK {
        v.iter().sum()
    } else {
        let mid = v.len() / 2;
        pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
    }
}

/// Riemann-sum `L^p` norm over the whole grid.
pub fn lp_norm(f: &SampledField, p: Exponent) -> Result<f64> {
    f.check_finite()?;
    let pow: Vec<f64> = f.values.par_iter().map(|v| p.power(v.norm())).collect();
    Ok(p.reduce(&pow, f.grid.cell_volume()))
}

/// Index sets attached to an atom: `K`, `I`, `J`, `J₁`, `J₂` and the split
/// `I = I₁ ∪ I₂`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexPartition {
    pub d: usize,
    pub k: FactorSet,
    pub i: FactorSet,
    pub j: FactorSet,
    pub j1: FactorSet,
    pub j2: FactorSet,
    pub i1: FactorSet,
    pub i2: FactorSet,
}

impl IndexPartition {
    /// Builds the partition from `K` and `J₂`, a choice `I ⊆ K` and `I₁ ⊆ I`.
    pub fn new(d: usize, k: FactorSet, j2: FactorSet, i: FactorSet, i1: FactorSet) -> Result<Self> {
        let full = FactorSet::full(d);
        let j = full.difference(i);
        let p = Self { d, k, i, j, j1: j.intersection(k), j2, i1, i2: i.difference(i1) };
        p.validate()?;
        Ok(p)
    }

    /// Outer over `outer`, inner over the rest; no `K`/`J₂` bookkeeping.
    pub fn split(d: usize, outer: FactorSet) -> Result<Self> {
        let full = FactorSet::full(d);
        if !outer.is_subset(full) {
            return Err(Error::Partition(format!("{outer:?} not within {d} factors")));
        }
        Ok(Self {
            d,
            k: outer,
            i: outer,
            j: full.difference(outer),
            j1: FactorSet::EMPTY,
            j2: full.difference(outer),
            i1: outer,
            i2: FactorSet::EMPTY,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let full = FactorSet::full(self.d);
        let err = |m: &str| Err(Error::Partition(m.to_string()));
        if self.i.union(self.j) != full || !self.i.intersection(self.j).is_empty() {
            return err("I and J must partition {1..d}");
        }
        if !self.i.is_subset(self.k) {
            return err("I must be a subset of K");
        }
        if self.j1 != self.j.intersection(self.k) {
            return err("J1 must equal J ∩ K");
        }
        if !self.k.intersection(self.j2).is_empty() || self.k.union(self.j2) != full {
            return err("K and J2 must partition {1..d}");
        }
        if self.i1.union(self.i2) != self.i || !self.i1.intersection(self.i2).is_empty() {
            return err("I1 and I2 must partition I");
        }
        Ok(())
    }
}

/// `( ∫_{x_I} ( ∫_{x_J} |f|^inner dx_J )^{outer/inner} dx_I )^{1/outer}`.
pub fn mixed_norm(
    f: &SampledField,
    partition: &IndexPartition,
    outer: Exponent,
    inner: Exponent,
) -> Result<f64> {
    mixed_norm_masked(f, partition.i, outer, inner, None)
}

/// Mixed norm with the outer integral restricted to the `x_I` nodes where
/// `outer_mask` is set. The mask is indexed by the row-major order of the
/// outer axes.
pub fn mixed_norm_masked(
    f: &SampledField,
    outer_factors: FactorSet,
    outer: Exponent,
    inner: Exponent,
    outer_mask: Option<&[bool]>,
) -> Result<f64> {
    let grid = f.grid();
    let space = grid.space();
    if !outer_factors.is_subset(FactorSet::full(space.d())) {
        return Err(Error::Partition(format!(
            "outer factors {outer_factors:?} exceed d = {}",
            space.d()
        )));
    }
    f.check_finite()?;
    let outer_axes = space.axes_of(outer_factors);
    let inner_axes = space.axes_of(FactorSet::full(space.d()).difference(outer_factors));
    let outer_count: usize = outer_axes.iter().map(|&a| grid.points(a)).product();
    let inner_count: usize = inner_axes.iter().map(|&a| grid.points(a)).product();
    if let Some(m) = outer_mask {
        if m.len() != outer_count {
            return Err(Error::GridMismatch(format!(
                "mask has {} entries for {outer_count} outer nodes",
                m.len()
            )));
        }
    }
    let strides = grid.strides();
    let offsets = |axes: &[usize], count: usize| -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        let mut idx = vec![0usize; axes.len()];
        for _ in 0..count {
            out.push(axes.iter().zip(&idx).map(|(&a, &k)| k * strides[a]).sum());
            for p in (0..axes.len()).rev() {
                idx[p] += 1;
                if idx[p] < grid.points(axes[p]) {
                    break;
                }
                idx[p] = 0;
            }
        }
        out
    };
    let outer_off = offsets(&outer_axes, outer_count);
    let inner_off = offsets(&inner_axes, inner_count);
    let inner_cell: f64 = inner_axes.iter().map(|&a| grid.spacing(a)).product();
    let outer_cell: f64 = outer_axes.iter().map(|&a| grid.spacing(a)).product();
    let vals = f.values();
    let slices: Vec<f64> = outer_off
        .par_iter()
        .enumerate()
        .map(|(o, &base)| {
            if outer_mask.is_some_and(|m| !m[o]) {
                return 0.0;
            }
            let row: Vec<f64> =
                inner_off.iter().map(|&off| inner.power(vals[base + off].norm())).collect();
            outer.power(inner.reduce(&row, inner_cell))
        })
        .collect();
    Ok(outer.reduce(&slices, outer_cell))
}

/// Writes the flat little-endian container: `d`, `dims`, per-axis `points`,
/// per-axis `extent`, then interleaved re/im samples in node order.
pub fn write_container<W: Write>(mut w: W, f: &SampledField) -> Result<()> {
    let grid = f.grid();
    let space = grid.space();
    w.write_all(&(space.d() as u64).to_le_bytes())?;
    for &n in space.dims() {
        w.write_all(&(n as u64).to_le_bytes())?;
    }
    for &p in grid.point_counts() {
        w.write_all(&(p as u64).to_le_bytes())?;
    }
    for &e in grid.extents() {
        w.write_all(&e.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(16 * f.values().len());
    for v in f.values() {
        buf.extend_from_slice(&v.re.to_le_bytes());
        buf.extend_from_slice(&v.im.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_container<R: Read>(mut r: R) -> Result<SampledField> {
    let mut word = [0u8; 8];
    let mut next_u64 = |r: &mut R| -> Result<u64> {
        r.read_exact(&mut word)?;
        Ok(u64::from_le_bytes(word))
    };
    let d = next_u64(&mut r)? as usize;
    if d == 0 || d > 64 {
        return Err(Error::Format(format!("implausible parameter count {d}")));
    }
    let dims = (0..d).map(|_| next_u64(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let space = ProductSpace::new(&dims).map_err(|e| Error::Format(e.to_string()))?;
    let n = space.n();
    let points = (0..n).map(|_| next_u64(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let extent = (0..n).map(|_| next_u64(&mut r).map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
    let grid = LatticeGrid::make(space, &extent, &points).map_err(|e| Error::Format(e.to_string()))?;
    let mut raw = vec![0u8; 16 * grid.node_count()];
    r.read_exact(&mut raw)?;
    let values = raw
        .chunks_exact(16)
        .map(|c| {
            let re = f64::from_le_bytes(c[..8].try_into().unwrap());
            let im = f64::from_le_bytes(c[8..].try_into().unwrap());
            Complex64::new(re, im)
        })
        .collect();
    SampledField::new(grid, values)
}

/// A 0/1 field from a node mask, for export.
pub fn mask_field(grid: &LatticeGrid, mask: &[bool]) -> Result<SampledField> {
    let values = mask.iter().map(|&m| Complex64::new(if m { 1.0 } else { 0.0 }, 0.0)).collect();
    SampledField::new(grid.clone(), values)
}
