//! Experiments that turn the estimates into measured numbers: operator norms,
//! per-level majorization decay, `H¹_rect → L¹` sweeps, sector kernel
//! localization, Bessel kernel decay and phase remainder bounds.
//!
//! Each experiment returns a typed result that renders into an
//! [`ExperimentReport`]. Reports hold only deterministic quantities; wall
//! times go to [`ExperimentReport::timing`], which is written separately.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::atom::{dyadic_index, make_tensor_atom, Profile, RectangleAtom};
use crate::decomp::{bump, direction_grid};
use crate::error::{Error, Result};
use crate::evaluator::{
    apply_adjoint, apply_partial, apply_sector, apply_selected, bench, explicit_matrix, resolve, truncation_defect,
    BenchRow, Method, OperatorSpec, Selection, BENCH_CSV_HEADER,
};
use crate::fourier;
use crate::lattice::{lp_norm, mixed_norm_masked, Exponent, FactorSet, LatticeGrid, ProductSpace, SampledField};
use crate::phase::{psi_remainder, PhaseSpec};
use crate::region::{complement_mask, rectangle_mask, LevelMasks};

/// Ordinary least-squares line through `(x, y)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fit {
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
    /// Root-mean-square residual.
    pub residual: f64,
    pub points: usize,
    /// Initial acceptance bracket for the slope, when one applies.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bracket: Option<[f64; 2]>,
}

pub const MIN_FIT_POINTS: usize = 4;

pub fn fit_line(x: &[f64], y: &[f64]) -> Result<Fit> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::GridMismatch(format!("{n} abscissae for {} values", y.len())));
    }
    if n < MIN_FIT_POINTS {
        return Err(Error::InsufficientSamples { needed: MIN_FIT_POINTS, got: n });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fit samples".into()));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("all abscissae coincide".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    Ok(Fit {
        slope,
        intercept,
        stderr: (ssr / (nf - 2.0) / sxx).sqrt(),
        residual: (ssr / nf).sqrt(),
        points: n,
        bracket: None,
    })
}

/// A flat CSV table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self { name: name.into(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push<I: IntoIterator<Item = String>>(&mut self, row: I) {
        self.rows.push(row.into_iter().collect());
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }
}

fn num(v: f64) -> String {
    format!("{v:e}")
}

/// Result record of one experiment.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub id: String,
    pub spec_hash: String,
    pub params: Value,
    pub scalars: BTreeMap<String, f64>,
    pub fits: BTreeMap<String, Fit>,
    /// Pass/fail per criterion.
    pub checks: BTreeMap<String, bool>,
    pub pass: bool,
    #[serde(skip)]
    pub tables: Vec<Table>,
    /// Non-deterministic measurements (wall times, speedups).
    #[serde(skip)]
    pub timing: BTreeMap<String, f64>,
    /// Tables holding wall times, written next to the timing sidecar.
    #[serde(skip)]
    pub timing_tables: Vec<Table>,
}

impl ExperimentReport {
    pub fn new(id: &str, params: Value) -> Self {
        let mut h = Sha256::new();
        h.update(id.as_bytes());
        h.update(params.to_string().as_bytes());
        let spec_hash = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        Self {
            id: id.into(),
            spec_hash,
            params,
            scalars: BTreeMap::new(),
            fits: BTreeMap::new(),
            checks: BTreeMap::new(),
            pass: true,
            tables: Vec::new(),
            timing: BTreeMap::new(),
            timing_tables: Vec::new(),
        }
    }

    pub fn scalar(&mut self, name: &str, v: f64) {
        self.scalars.insert(name.into(), v);
    }

    pub fn check(&mut self, name: &str, ok: bool) {
        self.checks.insert(name.into(), ok);
        self.pass = self.checks.values().all(|&c| c);
    }

    pub fn failed_checks(&self) -> Vec<String> {
        self.checks.iter().filter(|(_, &ok)| !ok).map(|(k, _)| k.clone()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `<id>.json`, `<id>.<table>.csv`, `<id>.timing.json` and
    /// `<id>.<table>.timing.csv`; returns the paths written. Only the
    /// `timing` files depend on the machine.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut paths = Vec::new();
        let p = dir.join(format!("{}.json", self.id));
        fs::write(&p, self.to_json() + "\n")?;
        paths.push(p);
        for t in &self.tables {
            let p = dir.join(format!("{}.{}.csv", self.id, t.name));
            fs::write(&p, t.to_csv())?;
            paths.push(p);
        }
        let p = dir.join(format!("{}.timing.json", self.id));
        fs::write(&p, serde_json::to_string_pretty(&self.timing).expect("timing serializes") + "\n")?;
        paths.push(p);
        for t in &self.timing_tables {
            let p = dir.join(format!("{}.{}.timing.csv", self.id, t.name));
            fs::write(&p, t.to_csv())?;
            paths.push(p);
        }
        Ok(paths)
    }
}

fn log2_or_nan(v: f64) -> f64 {
    if v > 0.0 {
        v.log2()
    } else {
        f64::NAN
    }
}

fn finite_fit(x: &[f64], y: &[f64]) -> Option<Fit> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = x.iter().zip(y).filter(|(_, b)| b.is_finite()).map(|(a, b)| (*a, *b)).unzip();
    fit_line(&xs, &ys).ok()
}

// ---------------------------------------------------------------------------
// Operator norm

/// Node count up to which the dense matrix and the singular-value oracle
/// are used.
pub const DENSE_LIMIT: usize = 1024;
/// Relative Ritz residual at which the iteration stops.
pub const NORM_TOLERANCE: f64 = 1e-10;
/// Most Krylov vectors kept between restarts.
const LANCZOS_BASIS: usize = 200;
/// Memory budget for the Krylov basis.
const LANCZOS_BYTES: usize = 1 << 28;
pub const NORM_CONVERGENCE_LIMIT: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct NormEstimate {
    pub norm: f64,
    pub iterations: usize,
    /// Relative Ritz residual `‖T*T v − θv‖/θ` at exit.
    pub change: f64,
    /// Largest singular value of the dense matrix, when computed.
    pub dense: Option<f64>,
}

impl NormEstimate {
    pub fn dense_gap(&self) -> Option<f64> {
        self.dense.map(|d| (self.norm - d).abs() / d.max(f64::MIN_POSITIVE))
    }
}

fn random_vector(len: usize, seed: u64) -> Vec<Complex64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()
}

fn l2(v: &[Complex64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

fn dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Top eigenpair of a Hermitian positive semidefinite map. Returns
/// `(θ, products, relative residual)`.
fn lanczos_top(
    apply: impl Fn(&[Complex64]) -> Result<Vec<Complex64>>,
    start: Vec<Complex64>,
    max_products: usize,
    basis: usize,
) -> Result<(f64, usize, f64)> {
    let mut v = start;
    let s = l2(&v);
    v.iter_mut().for_each(|z| *z /= s);
    let (mut products, mut theta, mut residual) = (0usize, 0.0f64, f64::INFINITY);
    while products < max_products {
        let mut vs = vec![v.clone()];
        let (mut alpha, mut beta) = (Vec::new(), Vec::new());
        let tail;
        loop {
            let k = vs.len() - 1;
            let mut w = apply(&vs[k])?;
            products += 1;
            let a = dot(&vs[k], &w).re;
            alpha.push(a);
            // Two passes of full reorthogonalization.
            for _ in 0..2 {
                for q in &vs {
                    let c = dot(q, &w);
                    w.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
                }
            }
            let b = l2(&w);
            if b <= 1e-13 * a.abs().max(f64::MIN_POSITIVE) || vs.len() == basis || products >= max_products {
                tail = b;
                break;
            }
            beta.push(b);
            w.iter_mut().for_each(|z| *z /= b);
            vs.push(w);
        }
        let m = alpha.len();
        let t = DMatrix::from_fn(m, m, |i, j| {
            if i == j {
                alpha[i]
            } else if i + 1 == j {
                beta[i]
            } else if j + 1 == i {
                beta[j]
            } else {
                0.0
            }
        });
        let eig = t.symmetric_eigen();
        let top = eig.eigenvalues.imax();
        theta = eig.eigenvalues[top];
        let y = eig.eigenvectors.column(top);
        residual = if theta > 0.0 { tail * y[m - 1].abs() / theta } else { 0.0 };
        let mut next = vec![Complex64::new(0.0, 0.0); v.len()];
        for (q, &c) in vs.iter().zip(y.iter()) {
            next.iter_mut().zip(q).for_each(|(x, z)| *x += c * z);
        }
        let s = l2(&next);
        if residual <= NORM_TOLERANCE || tail == 0.0 || s == 0.0 {
            break;
        }
        v = next;
        v.iter_mut().for_each(|z| *z /= s);
    }
    Ok((theta, products, residual))
}

/// Largest singular value of the selected operator from restarted Lanczos
/// on `T*T`. `iterations` caps the number of `T*T` products.
pub fn l2_norm_estimate(op: &OperatorSpec, sel: &Selection, iterations: usize, seed: u64) -> Result<NormEstimate> {
    if iterations < 20 {
        return Err(Error::InsufficientSamples { needed: 20, got: iterations });
    }
    let grid = &op.grid;
    let total = grid.node_count();
    let dense = if total <= DENSE_LIMIT { Some(explicit_matrix(op, sel)?) } else { None };
    let adj = dense.as_ref().map(|a| a.adjoint());
    let forward = |v: &[Complex64]| -> Result<Vec<Complex64>> {
        match &dense {
            Some(a) => Ok((a * DVector::from_column_slice(v)).as_slice().to_vec()),
            None => {
                let f = SampledField::new(grid.clone(), v.to_vec())?;
                Ok(apply_selected(op, &f, sel, Method::Auto)?.into_values())
            }
        }
    };
    let backward = |v: &[Complex64]| -> Result<Vec<Complex64>> {
        match &adj {
            Some(a) => Ok((a * DVector::from_column_slice(v)).as_slice().to_vec()),
            None => {
                let f = SampledField::new(grid.clone(), v.to_vec())?;
                Ok(apply_adjoint(op, &f, sel, Method::Auto)?.into_values())
            }
        }
    };
    let gram = |v: &[Complex64]| -> Result<Vec<Complex64>> { backward(&forward(v)?) };
    let basis = (LANCZOS_BYTES / (16 * total)).clamp(4, LANCZOS_BASIS);
    let (theta, done, change) = lanczos_top(gram, random_vector(total, seed), iterations, basis)?;
    if change > NORM_CONVERGENCE_LIMIT {
        return Err(Error::NonConvergence(format!("relative residual {change:.3e} after {done} products")));
    }
    let est = theta.max(0.0).sqrt();
    let dense_sv = dense.map(|a| a.singular_values().max());
    Ok(NormEstimate { norm: est, iterations: done, change, dense: dense_sv })
}

/// Dense largest singular value of an arbitrary complex matrix.
pub fn largest_singular_value(a: &DMatrix<Complex64>) -> f64 {
    a.singular_values().max()
}

impl NormEstimate {
    pub fn report(&self, id: &str, params: Value, expected: Option<f64>, tolerance: f64) -> ExperimentReport {
        let mut r = ExperimentReport::new(id, params);
        r.scalar("norm", self.norm);
        r.scalar("iterations", self.iterations as f64);
        r.scalar("last_change", self.change);
        if let Some(d) = self.dense {
            r.scalar("dense_norm", d);
            r.check("dense_oracle", self.dense_gap().unwrap_or(0.0) <= 1e-6);
        }
        if let Some(e) = expected {
            r.scalar("expected_norm", e);
            r.check("expected_norm", (self.norm - e).abs() <= tolerance);
        }
        r.check("finite", self.norm.is_finite());
        r
    }
}

// ---------------------------------------------------------------------------
// Majorization sweep

#[derive(Debug, Clone, Serialize)]
pub struct MajorizationRow {
    pub offset: u32,
    pub levels: Vec<u32>,
    pub value: f64,
    /// `|Q_𝓘ᶜ|^{1/2}·‖T_j a‖₂`.
    pub l2_bound: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MajorizationResult {
    pub base_levels: Vec<u32>,
    pub outer: Vec<usize>,
    pub i1: Vec<usize>,
    pub rows: Vec<MajorizationRow>,
    pub fit: Option<Fit>,
    pub complement_volume: f64,
    pub tail_defect: f64,
    pub monotone: bool,
}

/// Per-level mixed norms `∫_{Q_𝓘ᶜ}(∫|T_{j_𝓘} a|² dx_𝓙)^{1/2} dx_𝓘` with
/// `jᵢ = kᵢ + s` on `𝓘₁` and `jᵢ = kᵢ − s` on `𝓘 ∖ 𝓘₁`, for `s` in
/// `0..=max_offset` (levels outside `[0, Jᵢ]` end the sweep). The fit is of
/// `log₂` value against `s`.
pub fn majorization_sweep(
    op: &OperatorSpec,
    atom: &RectangleAtom,
    i_set: FactorSet,
    i1: FactorSet,
    max_offset: u32,
    c: f64,
) -> Result<MajorizationResult> {
    if atom.grid() != &op.grid {
        return Err(Error::GridMismatch("atom does not live on the operator grid".into()));
    }
    if i_set.is_empty() || !i1.is_subset(i_set) || !i_set.is_subset(FactorSet::full(op.d())) {
        return Err(Error::Partition(format!("need ∅ ≠ I ⊆ factors and I₁ ⊆ I, got I = {i_set:?}, I₁ = {i1:?}")));
    }
    let mut regions = Vec::new();
    let mut ks = Vec::new();
    for i in i_set.iter() {
        let r = atom.radii[i];
        let k = dyadic_index(r).filter(|_| r < 1.0).ok_or_else(|| {
            Error::InvalidAtom(format!("factor {i} has side length {r} ≥ 1; it belongs to J₂"))
        })?;
        ks.push(k);
        let masks =
            LevelMasks::build(&op.phase, &op.grid.factor_grid(i), i, atom.center_of(i), c, op.levels[i], 1.0)?;
        regions.push(masks.region(r)?);
    }
    let refs: Vec<_> = regions.iter().collect();
    let mask = complement_mask(&refs)?;
    let outer_cell: f64 = op.grid.space().axes_of(i_set).iter().map(|&a| op.grid.spacing(a)).product();
    let complement_volume = mask.iter().filter(|&&m| m).count() as f64 * outer_cell;
    let tail_defect = regions.iter().map(|q| q.tail_defect).fold(0.0, f64::max);
    let mut rows = Vec::new();
    'sweep: for s in 0..=max_offset {
        let mut levels = Vec::new();
        for (q, i) in i_set.iter().enumerate() {
            let j = if i1.contains(i) { ks[q] as i64 + s as i64 } else { ks[q] as i64 - s as i64 };
            if j < 0 || j > op.levels[i] as i64 {
                break 'sweep;
            }
            levels.push((i, j as u32));
        }
        let t = apply_partial(op, &atom.field, &levels)?;
        let value = mixed_norm_masked(&t, i_set, Exponent::One, Exponent::Two, Some(&mask))?;
        let l2_bound = complement_volume.sqrt() * lp_norm(&t, Exponent::Two)?;
        rows.push(MajorizationRow { offset: s, levels: levels.iter().map(|p| p.1).collect(), value, l2_bound });
    }
    let x: Vec<f64> = rows.iter().map(|r| r.offset as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| log2_or_nan(r.value)).collect();
    let monotone = rows.windows(2).all(|w| w[1].value <= w[0].value);
    Ok(MajorizationResult {
        base_levels: ks,
        outer: i_set.iter().collect(),
        i1: i1.iter().collect(),
        fit: finite_fit(&x, &y),
        rows,
        complement_volume,
        tail_defect,
        monotone,
    })
}

impl MajorizationResult {
    /// Checks the trivial bound at `s = 0` and, with `max_slope`, that the
    /// fitted slope is at most `max_slope`. Without it the fit is recorded
    /// only.
    pub fn report(&self, id: &str, params: Value, max_slope: Option<f64>) -> ExperimentReport {
        let mut r = ExperimentReport::new(id, params);
        let mut t = Table::new("levels", &["offset", "levels", "value", "l2_bound"]);
        for row in &self.rows {
            let lv: Vec<String> = row.levels.iter().map(|j| j.to_string()).collect();
            t.push([row.offset.to_string(), lv.join("x"), num(row.value), num(row.l2_bound)]);
        }
        r.tables.push(t);
        r.scalar("complement_volume", self.complement_volume);
        r.scalar("tail_defect", self.tail_defect);
        r.scalar("levels_swept", self.rows.len() as f64);
        if let Some(first) = self.rows.first() {
            r.scalar("value_at_base", first.value);
            r.check("base_level_l2_bound", first.value.is_finite() && first.value <= first.l2_bound * (1.0 + 1e-12));
        }
        match (&self.fit, max_slope) {
            (Some(f), limit) => {
                let mut f = f.clone();
                if let Some(m) = limit {
                    f.bracket = Some([f64::NEG_INFINITY, m]);
                    r.check("decay_slope", f.slope <= m);
                }
                r.fits.insert("log2_value_vs_offset".into(), f);
            }
            (None, Some(_)) => r.check("decay_slope", false),
            (None, None) => {}
        }
        r.scalar("monotone", if self.monotone { 1.0 } else { 0.0 });
        r
    }
}

// ---------------------------------------------------------------------------
// H¹_rect → L¹ sweep

#[derive(Debug, Clone, Serialize)]
pub struct H1L1Row {
    pub k: u32,
    pub r: f64,
    pub l1: f64,
    pub defect: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct H1L1Result {
    pub rows: Vec<H1L1Row>,
    /// `log₂ ‖T a_R‖₁` against `k = log₂(1/r)`.
    pub fit: Fit,
    pub ratio: f64,
    /// `Σᵢ (mᵢ − mᵢ^crit)`.
    pub order_gap: f64,
}

pub const H1L1_DEFECT_LIMIT: f64 = 1e-6;
pub const H1L1_SLOPE_LIMIT: f64 = 0.25;
pub const H1L1_RATIO_LIMIT: f64 = 4.0;

/// `‖T a_R‖₁` for atoms of side `r = 2^{-k}` centered at the origin.
///
/// `factors` holds either one operator over the whole space or one
/// single-factor operator per factor. In the second case the operator is
/// the tensor product of the factors and so is every atom, so
/// `T a_R = ⊗ Tᵢ aᵢ` and `‖T a_R‖₁ = Π ‖Tᵢ aᵢ‖₁` hold exactly; this lets
/// each factor use its own fine grid.
pub fn h1l1_sweep(factors: &[OperatorSpec], profile: Profile, ks: &[u32], defect_limit: f64) -> Result<H1L1Result> {
    if factors.is_empty() {
        return Err(Error::InvalidSpace("no operator".into()));
    }
    if factors.len() > 1 && factors.iter().any(|op| op.d() != 1 || !op.symbol.is_factorizable()) {
        return Err(Error::NotFactorizable("tensor sweeps need single-factor, factorizable operators".into()));
    }
    let mut rows = Vec::new();
    for &k in ks {
        let r = (-(k as f64)).exp2();
        let (mut l1, mut kept) = (1.0, 1.0);
        for op in factors {
            let grid = &op.grid;
            let atom = make_tensor_atom(grid, &vec![0.0; grid.n()], &vec![r; op.d()], profile)?;
            let defect = truncation_defect(op, &atom.field)?;
            if defect > defect_limit {
                return Err(Error::Truncation { defect, limit: defect_limit });
            }
            kept *= 1.0 - defect;
            let t = apply_selected(op, &atom.field, &Selection::full(op.d()), Method::Auto)?;
            l1 *= lp_norm(&t, Exponent::One)?;
        }
        rows.push(H1L1Row { k, r, l1, defect: 1.0 - kept });
    }
    let x: Vec<f64> = rows.iter().map(|r| r.k as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.l1.log2()).collect();
    let fit = fit_line(&x, &y)?;
    let max = rows.iter().map(|r| r.l1).fold(0.0, f64::max);
    let min = rows.iter().map(|r| r.l1).fold(f64::INFINITY, f64::min);
    let order_gap = factors
        .iter()
        .map(|op| {
            let crit = crate::symbol::critical_exponents(op.symbol.space());
            op.symbol.order.iter().zip(&crit).map(|(m, c)| m - c).sum::<f64>()
        })
        .sum();
    Ok(H1L1Result { rows, fit, ratio: max / min, order_gap })
}

impl H1L1Result {
    pub fn bounded(&self) -> bool {
        self.fit.slope.abs() <= H1L1_SLOPE_LIMIT && self.ratio <= H1L1_RATIO_LIMIT
    }

    pub fn grows(&self) -> bool {
        self.fit.slope >= H1L1_SLOPE_LIMIT
    }

    pub fn decreases(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].l1 < w[0].l1)
    }

    /// At critical order the sweep must stay bounded; above it, grow;
    /// below it, decrease.
    pub fn report(&self, id: &str, params: Value) -> ExperimentReport {
        let mut r = ExperimentReport::new(id, params);
        let mut t = Table::new("atoms", &["k", "r", "l1", "truncation_defect"]);
        for row in &self.rows {
            t.push([row.k.to_string(), num(row.r), num(row.l1), num(row.defect)]);
        }
        r.tables.push(t);
        r.scalar("max_min_ratio", self.ratio);
        r.scalar("order_gap", self.order_gap);
        r.scalar("max_truncation_defect", self.rows.iter().map(|r| r.defect).fold(0.0, f64::max));
        let mut f = self.fit.clone();
        if self.order_gap.abs() < 1e-12 {
            f.bracket = Some([-H1L1_SLOPE_LIMIT, H1L1_SLOPE_LIMIT]);
            r.check("bounded", self.bounded());
        } else if self.order_gap > 0.0 {
            f.bracket = Some([H1L1_SLOPE_LIMIT, f64::INFINITY]);
            r.check("grows", self.grows());
        } else {
            r.check("decreases", self.decreases());
        }
        r.fits.insert("log2_l1_vs_k".into(), f);
        r
    }
}

// ---------------------------------------------------------------------------
// Sector localization

#[derive(Debug, Clone, Serialize)]
pub struct LocalizationRow {
    pub lambda: f64,
    pub outside_fraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LocalizationResult {
    pub level: u32,
    pub nu: usize,
    pub center: Vec<f64>,
    pub rows: Vec<LocalizationRow>,
}

/// Smallest valid atom: two cells per axis, centered half a cell off the
/// node nearest `near`.
pub fn point_atom(grid: &LatticeGrid, near: &[f64], profile: Profile) -> Result<RectangleAtom> {
    let center: Vec<f64> = (0..grid.n())
        .map(|a| grid.coord(a, grid.nearest_index(a, near[a])) + grid.spacing(a) / 2.0)
        .collect();
    let radii: Vec<f64> = (0..grid.space().d())
        .map(|i| grid.space().factor_axes(i).map(|a| 2.0 * grid.spacing(a)).fold(0.0, f64::max))
        .collect();
    make_tensor_atom(grid, &center, &radii, profile)
}

/// Fraction of `∫|T_j^ν a_δ|` outside the dilated rectangle `λR_j^ν`
/// (halfwidths `λ·2^{-j}` and `λ·2^{-j/2}`). Single-factor operators only.
pub fn sector_localization(op: &OperatorSpec, atom: &RectangleAtom, level: u32, nu: usize, lambdas: &[f64]) -> Result<LocalizationResult> {
    if op.d() != 1 {
        return Err(Error::InvalidSpace("sector localization runs on a single factor".into()));
    }
    if level < 2 {
        return Err(Error::LevelOutOfRange { level, max: op.levels[0] });
    }
    let t = apply_sector(op, &atom.field, &[(0, level, nu)])?;
    let abs: Vec<f64> = t.values().iter().map(|z| z.norm()).collect();
    let total: f64 = crate::lattice::pairwise_sum(&abs);
    let rows = lambdas
        .iter()
        .map(|&lambda| {
            let (_, m) = rectangle_mask(&op.phase, &op.grid, 0, &atom.center, level, nu, lambda, op.sector_scale)?;
            let outside: Vec<f64> = abs.iter().zip(&m.mask).map(|(v, &inside)| if inside { 0.0 } else { *v }).collect();
            let frac = if total > 0.0 { crate::lattice::pairwise_sum(&outside) / total } else { 0.0 };
            Ok(LocalizationRow { lambda, outside_fraction: frac })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LocalizationResult { level, nu, center: atom.center.clone(), rows })
}

impl LocalizationResult {
    pub fn fraction(&self, lambda: f64) -> Option<f64> {
        self.rows.iter().find(|r| r.lambda == lambda).map(|r| r.outside_fraction)
    }

    /// Checks the drop between `λ = 1` and `λ = 4` and the fraction at the
    /// largest `λ` when those rows exist.
    pub fn report(&self, id: &str, params: Value, max_fraction: f64) -> ExperimentReport {
        let mut r = ExperimentReport::new(id, params);
        let mut t = Table::new("dilations", &["lambda", "outside_fraction"]);
        for row in &self.rows {
            t.push([num(row.lambda), num(row.outside_fraction)]);
        }
        r.tables.push(t);
        if let (Some(a), Some(b)) = (self.fraction(1.0), self.fraction(4.0)) {
            r.scalar("drop_1_to_4", a / b.max(f64::MIN_POSITIVE));
            r.check("drop_1_to_4", a >= 10.0 * b);
        }
        if let Some(last) = self.rows.iter().max_by(|a, b| a.lambda.total_cmp(&b.lambda)) {
            r.scalar("largest_lambda", last.lambda);
            r.scalar("fraction_at_largest_lambda", last.outside_fraction);
            r.check("fraction_at_largest_lambda", last.outside_fraction <= max_fraction);
        }
        r
    }
}

// ---------------------------------------------------------------------------
// Bessel kernel decay

#[derive(Debug, Clone, Serialize)]
pub struct BesselParams {
    pub n: usize,
    /// Multiplier `(1+|ξ|²)^{exponent/2}`.
    pub exponent: f64,
    pub points: usize,
    pub extent: f64,
    pub top: u32,
    pub radii: Vec<f64>,
}

impl BesselParams {
    /// Defaults for `n = 2` (2D grid) and `n = 3` (radial reduction).
    pub fn standard(n: usize) -> Result<Self> {
        let radii = (6..=9).rev().map(|k| (-(k as f64)).exp2()).collect();
        match n {
            2 => Ok(Self { n, exponent: -0.5, points: 2048, extent: 0.25, top: 10, radii }),
            3 => Ok(Self { n, exponent: -1.0, points: 1 << 18, extent: 1.0, top: 15, radii }),
            _ => Err(Error::UnsupportedDimension(n)),
        }
    }

    pub fn target(&self) -> f64 {
        -(self.n as f64 + 1.0) / 2.0
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BesselResult {
    pub radii: Vec<f64>,
    pub values: Vec<f64>,
    pub peak: f64,
    pub fit: Option<Fit>,
    pub target: f64,
}

pub const BESSEL_TOLERANCE: f64 = 0.15;
/// Largest `|𝓡(r)|/|𝓡(0)|` over the radii for which a constant multiplier
/// counts as a discrete delta.
pub const BESSEL_GUARD_TAIL: f64 = 1e-3;

/// Radial decay of the kernel of `(1+|ξ|²)^{exponent/2}·φ(2^{-J}|ξ|)`.
///
/// `n = 2` samples the inverse transform on a square grid along the first
/// axis. `n = 3` uses the radial reduction
/// `𝓡(r) = (2/r)∫ρ m(ρ) sin(2πρr) dρ` on the positive frequencies of a
/// line grid. A constant multiplier gives a kernel concentrated at the
/// origin and no fit.
pub fn bessel_decay(p: &BesselParams) -> Result<BesselResult> {
    let line = LatticeGrid::uniform(ProductSpace::new(&[1])?, p.extent, p.points)?;
    let h = line.spacing(0);
    if (2.0 * p.top as f64 + 2.0).exp2() > line.max_frequency(0).powi(2) + 1e-9 {
        return Err(Error::InsufficientGrid(format!("2^(J+1) = {} exceeds {}", (p.top as f64 + 1.0).exp2(), line.max_frequency(0))));
    }
    let rmin = p.radii.iter().copied().fold(f64::INFINITY, f64::min);
    let rmax = p.radii.iter().copied().fold(0.0, f64::max);
    if rmin < 4.0 * h || rmax > p.extent / 4.0 {
        return Err(Error::InsufficientGrid(format!(
            "radii [{rmin}, {rmax}] need 4h = {} ≤ r ≤ E/4 = {}",
            4.0 * h,
            p.extent / 4.0
        )));
    }
    let cut = (p.top as f64).exp2();
    let m = |rho: f64| (1.0 + rho * rho).powf(p.exponent / 2.0) * bump(rho / cut);
    let (values, peak) = match p.n {
        2 => {
            let grid = LatticeGrid::uniform(ProductSpace::new(&[2])?, p.extent, p.points)?;
            let mut xi = [0.0; 2];
            let spec: Vec<Complex64> = (0..grid.node_count())
                .map(|k| {
                    grid.node_frequency(k, &mut xi);
                    Complex64::new(m((xi[0] * xi[0] + xi[1] * xi[1]).sqrt()), 0.0)
                })
                .collect();
            let kernel = fourier::inverse(&grid, &spec);
            let mid = p.points / 2;
            let at = |r: f64| kernel[mid * p.points + grid.nearest_index(1, r)].norm();
            let values: Vec<f64> = p.radii.iter().map(|&r| at(r)).collect();
            (values, kernel[mid * p.points + mid].norm())
        }
        3 => {
            let dr = line.frequency_cell_volume();
            let rhos: Vec<(f64, f64)> = (1..p.points / 2)
                .map(|k| {
                    let rho = k as f64 * dr;
                    (rho, rho * m(rho))
                })
                .filter(|(_, w)| *w != 0.0)
                .collect();
            let radial = |r: f64| -> f64 {
                let terms: Vec<f64> = rhos.iter().map(|(rho, w)| w * (2.0 * PI * rho * r).sin()).collect();
                2.0 / r * crate::lattice::pairwise_sum(&terms) * dr
            };
            let values: Vec<f64> = p.radii.par_iter().map(|&r| radial(r).abs()).collect();
            let terms: Vec<f64> = rhos.iter().map(|(rho, w)| 4.0 * PI * rho * w).collect();
            (values, crate::lattice::pairwise_sum(&terms) * dr)
        }
        n => return Err(Error::UnsupportedDimension(n)),
    };
    let fit = if p.exponent == 0.0 {
        None
    } else {
        let x: Vec<f64> = p.radii.iter().map(|r| r.log2()).collect();
        let y: Vec<f64> = values.iter().map(|v| log2_or_nan(*v)).collect();
        Some(fit_line(&x, &y)?)
    };
    Ok(BesselResult { radii: p.radii.clone(), values, peak, fit, target: p.target() })
}

impl BesselResult {
    pub fn report(&self, id: &str, params: Value) -> ExperimentReport {
        let mut r = ExperimentReport::new(id, params);
        let mut t = Table::new("radii", &["r", "abs_kernel"]);
        for (a, b) in self.radii.iter().zip(&self.values) {
            t.push([num(*a), num(*b)]);
        }
        r.tables.push(t);
        r.scalar("target_exponent", self.target);
        r.scalar("peak", self.peak);
        match &self.fit {
            Some(f) => {
                let mut f = f.clone();
                f.bracket = Some([self.target - BESSEL_TOLERANCE, self.target + BESSEL_TOLERANCE]);
                r.check("exponent", (f.slope - self.target).abs() <= BESSEL_TOLERANCE);
                r.fits.insert("log2_kernel_vs_log2_r".into(), f);
            }
            None => {
                let tail = self.values.iter().copied().fold(0.0, f64::max) / self.peak;
                r.scalar("tail_over_peak", tail);
                r.check("concentrated", tail <= BESSEL_GUARD_TAIL);
            }
        }
        r
    }
}

// ---------------------------------------------------------------------------
// Phase remainder bounds

#[derive(Debug, Clone, Serialize)]
pub struct PsiRow {
    pub level: u32,
    pub max_psi: f64,
    /// `2^j·max|∂_{ξ″}Ψ|`.
    pub normal: f64,
    /// `2^{j/2}·max|∂_{ξ′}Ψ|`.
    pub tangential: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PsiResult {
    pub rows: Vec<PsiRow>,
    pub drift: [f64; 3],
}

pub const PSI_DRIFT_LIMIT: f64 = 4.0;
const ZERO_FLOOR: f64 = 1e-12;
/// Difference quotients below this are cancellation noise of a vanishing
/// remainder: the step is `1e-4·|ξ|`, so rounding in `Φ` alone contributes
/// about `1e-12·|x|`.
const QUOTIENT_FLOOR: f64 = 1e-9;

fn rotate_toward(e: &[f64], t: &[f64], angle: f64) -> Vec<f64> {
    let (s, c) = angle.sin_cos();
    e.iter().zip(t).map(|(a, b)| c * a + s * b).collect()
}

/// Unit vectors orthogonal to `e`.
fn tangents(e: &[f64]) -> Vec<Vec<f64>> {
    match e.len() {
        1 => Vec::new(),
        2 => vec![vec![-e[1], e[0]]],
        _ => {
            let pick = if e[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
            let d: f64 = pick.iter().zip(e).map(|(a, b)| a * b).sum();
            let mut t1: Vec<f64> = pick.iter().zip(e).map(|(a, b)| a - d * b).collect();
            let s = t1.iter().map(|v| v * v).sum::<f64>().sqrt();
            t1.iter_mut().for_each(|v| *v /= s);
            let t2 = vec![e[1] * t1[2] - e[2] * t1[1], e[2] * t1[0] - e[0] * t1[2], e[0] * t1[1] - e[1] * t1[0]];
            vec![t1, t2]
        }
    }
}

fn drift(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    let max = v.iter().copied().fold(0.0, f64::max);
    if max <= ZERO_FLOOR {
        return 1.0;
    }
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    max / min
}

/// Maxima of `|Ψᵢ|` and its scaled directional derivatives over samples of
/// `Γ_j^ν ∩ {2^{j−1} ≤ |ξ| ≤ 2^{j+1}}`, for every sector `ν` and a few `xᵢ`.
pub fn psi_bound_sweep(phase: &PhaseSpec, i: usize, levels: &[u32], x_samples: &[Vec<f64>]) -> Result<PsiResult> {
    let n = phase.space().dim(i);
    if x_samples.iter().any(|x| x.len() != n) {
        return Err(Error::GridMismatch(format!("x samples must have {n} coordinates")));
    }
    let rows = levels
        .iter()
        .map(|&j| -> Result<PsiRow> {
            let grid = direction_grid(n, j, 1.0)?;
            let half = 2.0 * (-(j as f64) / 2.0).exp2();
            let aperture = 2.0 * (half / 2.0).min(1.0).asin();
            let out = (0..grid.len())
                .into_par_iter()
                .map(|nu| {
                    let e = grid.direction(nu);
                    let ts = tangents(e);
                    let mut dirs = vec![e.to_vec()];
                    for t in &ts {
                        for frac in [-1.0, -0.5, 0.5, 1.0] {
                            dirs.push(rotate_toward(e, t, frac * aperture));
                        }
                    }
                    let (mut mp, mut mn, mut mt) = (0.0f64, 0.0f64, 0.0f64);
                    for x in x_samples {
                        for d in &dirs {
                            for scale in [-1.0, 0.0, 1.0] {
                                let rho = (j as f64 + scale).exp2();
                                let xi: Vec<f64> = d.iter().map(|v| rho * v).collect();
                                let psi = |v: &[f64]| psi_remainder(phase, i, x, v, e);
                                mp = mp.max(psi(&xi).abs());
                                let step = 1e-4 * rho;
                                let diff = |dir: &[f64]| {
                                    let p: Vec<f64> = xi.iter().zip(dir).map(|(a, b)| a + step * b).collect();
                                    let m: Vec<f64> = xi.iter().zip(dir).map(|(a, b)| a - step * b).collect();
                                    let q = (psi(&p) - psi(&m)) / (2.0 * step);
                                    if q.abs() < QUOTIENT_FLOOR { 0.0 } else { q }
                                };
                                mn = mn.max(diff(e).abs());
                                for t in &ts {
                                    mt = mt.max(diff(t).abs());
                                }
                            }
                        }
                    }
                    (mp, mn, mt)
                })
                .reduce(|| (0.0, 0.0, 0.0), |a, b| (a.0.max(b.0), a.1.max(b.1), a.2.max(b.2)));
            let jf = j as f64;
            Ok(PsiRow { level: j, max_psi: out.0, normal: jf.exp2() * out.1, tangential: (jf / 2.0).exp2() * out.2 })
        })
        .collect::<Result<Vec<_>>>()?;
    let d = [
        drift(rows.iter().map(|r| r.max_psi)),
        drift(rows.iter().map(|r| r.normal)),
        drift(rows.iter().map(|r| r.tangential)),
    ];
    Ok(PsiResult { rows, drift: d })
}

impl PsiResult {
    pub fn stable(&self) -> bool {
        self.drift.iter().all(|&d| d < PSI_DRIFT_LIMIT)
    }

    pub fn report(&self, id: &str, params: Value) -> ExperimentReport {
        let mut r = ExperimentReport::new(id, params);
        let mut t = Table::new("levels", &["level", "max_psi", "normal_quotient", "tangential_quotient"]);
        for row in &self.rows {
            t.push([row.level.to_string(), num(row.max_psi), num(row.normal), num(row.tangential)]);
        }
        r.tables.push(t);
        r.scalar("drift_max_psi", self.drift[0]);
        r.scalar("drift_normal", self.drift[1]);
        r.scalar("drift_tangential", self.drift[2]);
        r.check("stable", self.stable());
        r
    }
}

// ---------------------------------------------------------------------------
// Region measure

#[derive(Debug, Clone, Serialize)]
pub struct RegionRow {
    pub k: u32,
    pub r: f64,
    pub volume: f64,
    pub ratio: f64,
    pub tail_defect: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegionResult {
    pub rows: Vec<RegionRow>,
    pub drift: f64,
    pub monotone: bool,
}

pub const REGION_DRIFT_LIMIT: f64 = 2.0;

/// `|Qᵢ|/rᵢ` for `rᵢ = 2^{-k}` with one center, sharing the level masks.
pub fn region_measure(
    phase: &PhaseSpec,
    grid: &LatticeGrid,
    i: usize,
    center: &[f64],
    c: f64,
    top: u32,
    ks: &[u32],
) -> Result<RegionResult> {
    let masks = LevelMasks::build(phase, grid, i, center, c, top, 1.0)?;
    let mut rows = Vec::new();
    let mut prev: Option<crate::region::RegionMask> = None;
    let mut monotone = true;
    let mut sorted = ks.to_vec();
    sorted.sort_unstable();
    for &k in &sorted {
        let r = (-(k as f64)).exp2();
        let q = masks.region(r)?;
        if let Some(p) = &prev {
            monotone &= q.mask.is_subset(p);
        }
        rows.push(RegionRow { k, r, volume: q.volume, ratio: q.ratio, tail_defect: q.tail_defect });
        prev = Some(q.mask);
    }
    let drift = drift(rows.iter().map(|r| r.ratio));
    Ok(RegionResult { rows, drift, monotone })
}

impl RegionResult {
    pub fn report(&self, id: &str, params: Value) -> ExperimentReport {
        let mut r = ExperimentReport::new(id, params);
        let mut t = Table::new("levels", &["k", "r", "volume", "ratio", "tail_defect"]);
        for row in &self.rows {
            t.push([row.k.to_string(), num(row.r), num(row.volume), num(row.ratio), num(row.tail_defect)]);
        }
        r.tables.push(t);
        r.scalar("ratio_drift", self.drift);
        r.scalar("max_ratio", self.rows.iter().map(|r| r.ratio).fold(0.0, f64::max));
        r.check("ratio_stable", self.drift <= REGION_DRIFT_LIMIT);
        r.check("monotone", self.monotone);
        r
    }
}

// ---------------------------------------------------------------------------
// Evaluator benchmark

#[derive(Debug, Clone)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
    pub relative_difference: f64,
    pub speedup: f64,
}

/// Times `reference` against `fast` on the same input.
pub fn compare_methods(op: &OperatorSpec, f: &SampledField, reference: Method, fast: Method) -> Result<BenchResult> {
    let sel = Selection::full(op.d());
    let (a, ra) = bench(op, f, &sel, reference)?;
    let (b, rb) = bench(op, f, &sel, fast)?;
    let diff = lp_norm(&rb.sub(&ra)?, Exponent::Two)? / lp_norm(&ra, Exponent::Two)?.max(f64::MIN_POSITIVE);
    let speedup = a.wall_ns as f64 / (b.wall_ns as f64).max(1.0);
    Ok(BenchResult { rows: vec![a, b], relative_difference: diff, speedup })
}

impl BenchResult {
    pub fn report(&self, id: &str, params: Value) -> ExperimentReport {
        let mut r = ExperimentReport::new(id, params);
        r.scalar("relative_difference", self.relative_difference);
        r.check("paths_agree", self.relative_difference <= 1e-10);
        let mut t = Table::new("bench", &BENCH_CSV_HEADER.split(',').collect::<Vec<_>>());
        for row in &self.rows {
            t.push(row.csv_line().split(',').map(String::from));
        }
        r.timing_tables.push(t);
        r.timing.insert("speedup".into(), self.speedup);
        r
    }
}

/// Random trigonometric polynomial with every factor's frequencies in
/// `|ξᵢ| ≤ band`.
pub fn band_limited_field(grid: &LatticeGrid, band: f64, seed: u64) -> Result<SampledField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let space = grid.space().clone();
    let mut xi = vec![0.0; grid.n()];
    let spec: Vec<Complex64> = (0..grid.node_count())
        .map(|k| {
            grid.node_frequency(k, &mut xi);
            let z = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            if (0..space.d()).all(|i| space.factor_norm(i, &xi) <= band) {
                z
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect();
    SampledField::new(grid.clone(), fourier::inverse(grid, &spec))
}

/// Times `f` in milliseconds.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64() * 1e3)
}

/// Method actually used for an operator under [`Method::Auto`].
pub fn auto_method(op: &OperatorSpec) -> Method {
    resolve(op, Method::Auto)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symbol::SymbolSpec;

    fn sp(dims: &[usize]) -> ProductSpace {
        ProductSpace::new(dims).unwrap()
    }

    #[test]
    fn fit_recovers_a_line() {
        let x = [0.0, 1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 1.5 - 0.75 * v).collect();
        let f = fit_line(&x, &y).unwrap();
        assert!((f.slope + 0.75).abs() < 1e-14 && (f.intercept - 1.5).abs() < 1e-14);
        assert!(f.stderr < 1e-14 && f.residual < 1e-14);
        // Hand-computed: y = (0,1,1,3) on x = (0,1,2,3) → slope 0.9, intercept −0.1,
        // residuals (0.1, 0.2, −0.7, 0.4).
        let f = fit_line(&[0.0, 1.0, 2.0, 3.0], &[0.0, 1.0, 1.0, 3.0]).unwrap();
        assert!((f.slope - 0.9).abs() < 1e-14 && (f.intercept + 0.1).abs() < 1e-14);
        assert!((f.residual - (0.7f64 / 4.0).sqrt()).abs() < 1e-14);
        assert!((f.stderr - (0.7f64 / 2.0 / 5.0).sqrt()).abs() < 1e-14);
        assert!(matches!(fit_line(&x[..3], &y[..3]), Err(Error::InsufficientSamples { needed: 4, got: 3 })));
    }

    #[test]
    fn identity_norm_is_one() {
        let space = sp(&[1]);
        let g = LatticeGrid::uniform(space.clone(), 1.0, 32).unwrap();
        let op = OperatorSpec::with_max_levels(SymbolSpec::unit(space.clone()), PhaseSpec::identity(space), g).unwrap();
        let est = l2_norm_estimate(&op, &Selection::full(1), 5000, 7).unwrap();
        assert!((est.norm - 1.0).abs() <= 1e-8, "{est:?}");
        assert!(est.dense_gap().unwrap() <= 1e-6);
    }

    #[test]
    fn diagonal_multiplier_norm_is_its_maximum() {
        let space = sp(&[2]);
        let g = LatticeGrid::uniform(space.clone(), 1.0, 16).unwrap();
        let sym = SymbolSpec::bessel_power(space.clone(), vec![-0.5], None).unwrap();
        let op = OperatorSpec::with_max_levels(sym, PhaseSpec::identity(space), g).unwrap();
        let est = l2_norm_estimate(&op, &Selection::full(1), 2000, 3).unwrap();
        assert!((est.norm - 1.0).abs() <= 1e-8, "{est:?}");
    }

    #[test]
    fn power_iteration_matches_dense_oracle() {
        let space = sp(&[2]);
        let g = LatticeGrid::uniform(space.clone(), 1.0, 16).unwrap();
        let op = OperatorSpec::with_max_levels(
            SymbolSpec::critical_order(space.clone(), 0.6).unwrap(),
            PhaseSpec::halfwave(space),
            g,
        )
        .unwrap();
        let est = l2_norm_estimate(&op, &Selection::full(1), 5000, 11).unwrap();
        assert!(est.dense_gap().unwrap() <= 1e-6, "{est:?}");
        assert!(matches!(l2_norm_estimate(&op, &Selection::full(1), 5, 1), Err(Error::InsufficientSamples { .. })));
    }

    #[test]
    fn matrix_free_norm_matches_dense() {
        let space = sp(&[1]);
        let g = LatticeGrid::uniform(space.clone(), 2.0, 2048).unwrap();
        let op = OperatorSpec::new(
            SymbolSpec::critical_order(space.clone(), 1.0).unwrap(),
            PhaseSpec::halfwave(space.clone()),
            g,
            vec![4],
        )
        .unwrap();
        let free = l2_norm_estimate(&op, &Selection::full(1), 3000, 5).unwrap();
        assert!(free.dense.is_none());
        let small = LatticeGrid::uniform(space.clone(), 2.0, 256).unwrap();
        let op2 = OperatorSpec::new(SymbolSpec::critical_order(space.clone(), 1.0).unwrap(), PhaseSpec::halfwave(space), small, vec![4]).unwrap();
        let dense = l2_norm_estimate(&op2, &Selection::full(1), 3000, 5).unwrap();
        assert!((free.norm - dense.norm).abs() < 1e-3, "{} vs {}", free.norm, dense.norm);
    }

    #[test]
    fn identity_line_majorization_decays() {
        let space = sp(&[1]);
        let g = LatticeGrid::uniform(space.clone(), 2.0, 4096).unwrap();
        let op = OperatorSpec::new(SymbolSpec::critical_order(space.clone(), 1.5).unwrap(), PhaseSpec::identity(space), g.clone(), vec![8])
            .unwrap();
        let atom = make_tensor_atom(&g, &[0.0], &[0.125], Profile::OddBump).unwrap();
        let up = majorization_sweep(&op, &atom, FactorSet::from_indices([0]), FactorSet::from_indices([0]), 5, 4.0).unwrap();
        assert_eq!(up.base_levels, vec![3]);
        assert_eq!(up.rows.len(), 6);
        let fit = up.fit.clone().unwrap();
        assert!(fit.slope <= -0.8, "{fit:?}");
        assert!(up.report("m", Value::Null, Some(-0.8)).pass);
        let down = majorization_sweep(&op, &atom, FactorSet::from_indices([0]), FactorSet::EMPTY, 5, 4.0).unwrap();
        assert_eq!(down.rows.len(), 4);
        assert!(down.rows.iter().all(|r| r.value.is_finite() && r.value <= r.l2_bound));
    }

    #[test]
    fn tensor_sweep_matches_full_grid() {
        let space = sp(&[1, 1]);
        let line = sp(&[1]);
        let g = LatticeGrid::uniform(space.clone(), 1.0, 256).unwrap();
        let gl = LatticeGrid::uniform(line.clone(), 1.0, 256).unwrap();
        let full = OperatorSpec::new(
            SymbolSpec::bessel_power(space.clone(), vec![0.0, 0.0], Some(1.2)).unwrap(),
            PhaseSpec::halfwave(space),
            g,
            vec![5, 5],
        )
        .unwrap();
        let one = OperatorSpec::new(
            SymbolSpec::bessel_power(line.clone(), vec![0.0], Some(1.2)).unwrap(),
            PhaseSpec::halfwave(line),
            gl,
            vec![5],
        )
        .unwrap();
        let ks = [1, 2, 3, 4];
        let a = h1l1_sweep(&[full], Profile::OddBump, &ks, 1.0).unwrap();
        let b = h1l1_sweep(&[one.clone(), one], Profile::OddBump, &ks, 1.0).unwrap();
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert!((x.l1 - y.l1).abs() <= 1e-10 * x.l1, "{} vs {}", x.l1, y.l1);
            assert!((x.defect - y.defect).abs() <= 1e-10);
        }
        assert_eq!(a.order_gap, 0.0);
        let strict = h1l1_sweep(&[b_op()], Profile::OddBump, &[5], 1e-6);
        assert!(matches!(strict, Err(Error::Truncation { .. })));
    }

    fn b_op() -> OperatorSpec {
        let line = sp(&[1]);
        let gl = LatticeGrid::uniform(line.clone(), 1.0, 256).unwrap();
        OperatorSpec::new(SymbolSpec::unit(line.clone()), PhaseSpec::identity(line), gl, vec![5]).unwrap()
    }

    #[test]
    fn identity_sector_is_localized() {
        let space = sp(&[2]);
        let g = LatticeGrid::uniform(space.clone(), 2.0, 512).unwrap();
        let op = OperatorSpec::with_max_levels(SymbolSpec::unit(space.clone()), PhaseSpec::identity(space), g.clone()).unwrap();
        let atom = point_atom(&g, &[0.0, 0.0], Profile::OddBump).unwrap();
        assert!((atom.center[0] - g.spacing(0) / 2.0).abs() < 1e-15);
        let res = sector_localization(&op, &atom, 5, 3, &[1.0, 4.0, 8.0, 256.0]).unwrap();
        let f = |l| res.fraction(l).unwrap();
        assert!(f(1.0) >= 10.0 * f(4.0), "{:?}", res.rows);
        assert!(f(8.0) <= 0.05);
        assert!(f(256.0) == 0.0);
    }

    #[test]
    fn bessel_guard_and_errors() {
        let mut p = BesselParams::standard(2).unwrap();
        p.points = 512;
        p.top = 6;
        p.extent = 1.0;
        p.radii = vec![1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0, 0.25];
        p.exponent = 0.0;
        let res = bessel_decay(&p).unwrap();
        assert!(res.fit.is_none());
        assert!(res.report("b", Value::Null).pass);
        p.radii[0] = 1e-4;
        assert!(matches!(bessel_decay(&p), Err(Error::InsufficientGrid(_))));
        assert!(matches!(BesselParams::standard(4), Err(Error::UnsupportedDimension(4))));
    }

    #[test]
    fn psi_sweeps() {
        let xs = vec![vec![0.0, 0.0], vec![0.3, -0.2]];
        let id = psi_bound_sweep(&PhaseSpec::identity(sp(&[2])), 0, &[2, 3, 4, 5, 6, 7, 8], &xs).unwrap();
        assert!(id.rows.iter().all(|r| r.max_psi == 0.0 && r.normal == 0.0 && r.tangential == 0.0));
        assert!(id.stable());
        let hw = psi_bound_sweep(&PhaseSpec::halfwave(sp(&[2])), 0, &[2, 3, 4, 5, 6, 7, 8], &xs).unwrap();
        assert!(hw.stable(), "{:?}", hw.rows);
        // Edge of the sector at |ξ| = 2^{j+1}: 2^{j+1}(1 − cos α) with
        // sin(α/2) = 2^{-j/2}, i.e. exactly 4.
        for r in &hw.rows {
            assert!((r.max_psi - 4.0).abs() < 1e-9, "{r:?}");
        }
        let a = psi_bound_sweep(&PhaseSpec::uniform(sp(&[2]), crate::phase::FactorPhase::Perturbed { eps: 0.05 }).unwrap(), 0, &[3, 5], &xs).unwrap();
        let b = psi_bound_sweep(&PhaseSpec::uniform(sp(&[2]), crate::phase::FactorPhase::Perturbed { eps: 0.1 }).unwrap(), 0, &[3, 5], &xs).unwrap();
        for (p, q) in a.rows.iter().zip(&b.rows) {
            assert!((q.max_psi - 2.0 * p.max_psi).abs() < 1e-9 * q.max_psi);
        }
    }

    #[test]
    fn reports_are_deterministic() {
        let xs = vec![vec![0.1]];
        let res = psi_bound_sweep(&PhaseSpec::halfwave(sp(&[1])), 0, &[2, 3, 4, 5], &xs).unwrap();
        let a = res.report("psi", serde_json::json!({"j": [2, 5]}));
        let b = res.report("psi", serde_json::json!({"j": [2, 5]}));
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.spec_hash.len(), 64);
        let c = res.report("psi", serde_json::json!({"j": [2, 6]}));
        assert_ne!(a.spec_hash, c.spec_hash);
        let dir = std::env::temp_dir().join(format!("mpfio-report-{}", std::process::id()));
        let paths = a.write(&dir).unwrap();
        assert_eq!(paths.len(), 3);
        assert!(fs::read_to_string(&paths[1]).unwrap().starts_with("level,max_psi"));
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn identity_region_ratio_is_stable() {
        let g = LatticeGrid::uniform(sp(&[1]), 2.0, 4096).unwrap();
        let res = region_measure(&PhaseSpec::identity(g.space().clone()), &g, 0, &[0.0], 4.0, 8, &[1, 2, 3, 4, 5]).unwrap();
        for row in &res.rows {
            assert!((row.ratio - 8.0).abs() <= 2.0 * g.spacing(0) / row.r, "{row:?}");
        }
        assert!(res.drift <= 1.1 && res.monotone);
    }
}
