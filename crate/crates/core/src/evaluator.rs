//! Application of `T`, its Littlewood–Paley pieces `T_j` and sector pieces
//! `T_j^ν`.
//!
//! Every path evaluates
//! `Tf(x) = Σ_ξ e^{2πiΦ(x,ξ)} σ(x,ξ) w(ξ) f̂(ξ) Δξ`
//! with `f̂` from [`fourier::forward`] and a per-factor frequency weight
//! `w(ξ) = Πᵢ wᵢ(ξᵢ)`. The untruncated operator uses `wᵢ = φ(2^{-Jᵢ}|ξᵢ|)`,
//! which is 1 up to `2^{Jᵢ}` and vanishes past `2^{Jᵢ+1}`, so the dyadic
//! pieces `φ_j` for `j ≤ Jᵢ` sum to it exactly.
//!
//! * [`Method::Direct`] is the O(N_x·N_ξ) double sum and serves as oracle.
//! * [`Method::Factorized`] applies one factor at a time along its own axes.
//! * [`Method::Spectral`] handles phases `x·ξ + ψ(ξ)` with symbols
//!   `χ(x)·m(ξ)` by a pair of FFTs.

use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftDirection;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::decomp::{direction_grid, lp_weight, sector_share, truncation_weight, AngularGrid};
use crate::error::{Error, Result};
use crate::fourier::{self, NdFft};
use crate::lattice::{LatticeGrid, SampledField};
use crate::phase::PhaseSpec;
use crate::symbol::SymbolSpec;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

fn cis(t: f64) -> Complex64 {
    let (s, c) = (2.0 * PI * t).sin_cos();
    Complex64::new(c, s)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|t| t * t).sum::<f64>().sqrt()
}

/// Frequency localization applied to one factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Band {
    /// `φ(2^{-J}|ξᵢ|)`: the whole truncated operator.
    Full,
    /// `φ_j(ξᵢ)`.
    Level(u32),
    /// `φ_j(ξᵢ)·χ_j^ν(ξᵢ)`.
    Sector { level: u32, nu: usize },
}

/// One [`Band`] per factor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Selection(pub Vec<Band>);

impl Selection {
    pub fn full(d: usize) -> Self {
        Selection(vec![Band::Full; d])
    }

    /// Levels `jᵢ` on the listed factors; the rest stay [`Band::Full`].
    pub fn partial(d: usize, levels: &[(usize, u32)]) -> Self {
        let mut s = Self::full(d);
        for &(i, j) in levels {
            s.0[i] = Band::Level(j);
        }
        s
    }

    /// Sectors `(i, jᵢ, νᵢ)` on the listed factors.
    pub fn sector(d: usize, sectors: &[(usize, u32, usize)]) -> Self {
        let mut s = Self::full(d);
        for &(i, level, nu) in sectors {
            s.0[i] = Band::Sector { level, nu };
        }
        s
    }

    pub fn label(&self) -> (String, String) {
        let levels: Vec<String> = self
            .0
            .iter()
            .map(|b| match b {
                Band::Full => "J".into(),
                Band::Level(j) | Band::Sector { level: j, .. } => j.to_string(),
            })
            .collect();
        let sectors: Vec<String> = self
            .0
            .iter()
            .map(|b| match b {
                Band::Sector { nu, .. } => nu.to_string(),
                _ => "*".into(),
            })
            .collect();
        (levels.join("x"), sectors.join("x"))
    }
}

/// Evaluation strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Method {
    Direct,
    Factorized,
    Spectral,
    /// Spectral when available, then factorized, then direct.
    Auto,
}

/// A discretized operator `T` with its truncation levels.
#[derive(Debug, Clone)]
pub struct OperatorSpec {
    pub symbol: SymbolSpec,
    pub phase: PhaseSpec,
    pub grid: LatticeGrid,
    /// `Jᵢ` per factor.
    pub levels: Vec<u32>,
    /// Multiplier of the nominal angular spacing `2^{-j/2}`.
    pub sector_scale: f64,
}

/// Largest `J` with `2^{J+1}` at most the resolvable frequency on every axis
/// of factor `i`.
pub fn max_level(grid: &LatticeGrid, i: usize) -> Result<u32> {
    let axes = grid.space().factor_axes(i);
    let f = axes.map(|a| grid.max_frequency(a)).fold(f64::INFINITY, f64::min);
    let l = f.log2().floor() - 1.0;
    if l < 0.0 {
        return Err(Error::InsufficientGrid(format!("factor {i} resolves only |ξ| ≤ {f}")));
    }
    Ok(l as u32)
}

impl OperatorSpec {
    pub fn new(symbol: SymbolSpec, phase: PhaseSpec, grid: LatticeGrid, levels: Vec<u32>) -> Result<Self> {
        if symbol.space() != grid.space() || phase.space() != grid.space() {
            return Err(Error::GridMismatch("symbol, phase and grid must share one product space".into()));
        }
        if levels.len() != grid.space().d() {
            return Err(Error::InvalidSpace(format!("{} truncation levels for d = {}", levels.len(), grid.space().d())));
        }
        for (i, &j) in levels.iter().enumerate() {
            let max = max_level(&grid, i)?;
            if j > max {
                return Err(Error::LevelOutOfRange { level: j, max });
            }
        }
        Ok(Self { symbol, phase, grid, levels, sector_scale: 1.0 })
    }

    /// Uses the largest admissible `J` on every factor.
    pub fn with_max_levels(symbol: SymbolSpec, phase: PhaseSpec, grid: LatticeGrid) -> Result<Self> {
        let levels = (0..grid.space().d()).map(|i| max_level(&grid, i)).collect::<Result<Vec<_>>>()?;
        Self::new(symbol, phase, grid, levels)
    }

    pub fn with_sector_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidSpace(format!("sector spacing scale {scale} must be positive")));
        }
        self.sector_scale = scale;
        Ok(self)
    }

    pub fn d(&self) -> usize {
        self.grid.space().d()
    }

    pub fn angular_grid(&self, i: usize, level: u32) -> Result<AngularGrid> {
        direction_grid(self.grid.space().dim(i), level, self.sector_scale)
    }

    pub fn is_spectral(&self) -> bool {
        self.phase.spectral_parts().is_some() && self.symbol.is_multiplier_form()
    }

    fn check_selection(&self, sel: &Selection) -> Result<()> {
        if sel.0.len() != self.d() {
            return Err(Error::InvalidSpace(format!("{} bands for d = {}", sel.0.len(), self.d())));
        }
        for (i, band) in sel.0.iter().enumerate() {
            match *band {
                Band::Full => {}
                Band::Level(j) | Band::Sector { level: j, .. } if j > self.levels[i] => {
                    return Err(Error::LevelOutOfRange { level: j, max: self.levels[i] });
                }
                Band::Sector { level, nu } => {
                    let g = self.angular_grid(i, level)?;
                    if nu >= g.len() {
                        return Err(Error::InvalidSector { level, nu, count: g.len() });
                    }
                }
                Band::Level(_) => {}
            }
        }
        Ok(())
    }

    /// `wᵢ` on the frequency nodes of factor `i`.
    pub fn factor_weights(&self, i: usize, band: Band) -> Result<Vec<f64>> {
        let fg = self.grid.factor_grid(i);
        let mut xi = vec![0.0; fg.n()];
        let angular = match band {
            Band::Sector { level, .. } => Some(self.angular_grid(i, level)?),
            _ => None,
        };
        (0..fg.node_count())
            .map(|k| {
                fg.node_frequency(k, &mut xi);
                let r = norm(&xi);
                Ok(match band {
                    Band::Full => truncation_weight(self.levels[i], r),
                    Band::Level(j) => lp_weight(j, r),
                    Band::Sector { level, nu } => {
                        let w = lp_weight(level, r);
                        if w == 0.0 {
                            0.0
                        } else {
                            w * sector_share(angular.as_ref().expect("sector grid"), nu, &xi)?
                        }
                    }
                })
            })
            .collect()
    }

    fn weights(&self, sel: &Selection) -> Result<Vec<Vec<f64>>> {
        self.check_selection(sel)?;
        (0..self.d()).map(|i| self.factor_weights(i, sel.0[i])).collect()
    }
}

/// Maps a global node index to its per-factor sub-indices.
struct FactorIndex {
    strides: Vec<usize>,
    sizes: Vec<usize>,
}

impl FactorIndex {
    fn new(grid: &LatticeGrid) -> Self {
        let space = grid.space();
        let sizes: Vec<usize> =
            (0..space.d()).map(|i| space.factor_axes(i).map(|a| grid.points(a)).product()).collect();
        let mut strides = vec![1; sizes.len()];
        for i in (0..sizes.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * sizes[i + 1];
        }
        Self { strides, sizes }
    }

    fn sub(&self, node: usize, i: usize) -> usize {
        (node / self.strides[i]) % self.sizes[i]
    }
}

fn product_weight(idx: &FactorIndex, w: &[Vec<f64>], node: usize) -> f64 {
    w.iter().enumerate().map(|(i, wi)| wi[idx.sub(node, i)]).product()
}

fn check_field(op: &OperatorSpec, f: &SampledField) -> Result<()> {
    if f.grid() != &op.grid {
        return Err(Error::GridMismatch("input field does not live on the operator grid".into()));
    }
    f.check_finite()
}

/// `Tf` by the direct double sum.
pub fn apply(op: &OperatorSpec, f: &SampledField) -> Result<SampledField> {
    apply_selected(op, f, &Selection::full(op.d()), Method::Direct)
}

/// `T_{j_I} f` with `φ_{jᵢ}` on the listed factors.
pub fn apply_partial(op: &OperatorSpec, f: &SampledField, levels: &[(usize, u32)]) -> Result<SampledField> {
    apply_selected(op, f, &Selection::partial(op.d(), levels), Method::Auto)
}

/// `T_{j_I}^ν f` with `φ_{jᵢ}·χ_{jᵢ}^{νᵢ}` on the listed factors.
pub fn apply_sector(op: &OperatorSpec, f: &SampledField, sectors: &[(usize, u32, usize)]) -> Result<SampledField> {
    apply_selected(op, f, &Selection::sector(op.d(), sectors), Method::Auto)
}

/// `Tf` one factor at a time; requires a factorizable symbol.
pub fn apply_factorized(op: &OperatorSpec, f: &SampledField) -> Result<SampledField> {
    apply_selected(op, f, &Selection::full(op.d()), Method::Factorized)
}

pub fn resolve(op: &OperatorSpec, method: Method) -> Method {
    match method {
        Method::Auto if op.is_spectral() => Method::Spectral,
        Method::Auto if op.symbol.is_factorizable() => Method::Factorized,
        Method::Auto => Method::Direct,
        m => m,
    }
}

pub fn apply_selected(op: &OperatorSpec, f: &SampledField, sel: &Selection, method: Method) -> Result<SampledField> {
    check_field(op, f)?;
    let w = op.weights(sel)?;
    let values = match resolve(op, method) {
        Method::Direct => direct(op, f, &w)?,
        Method::Factorized => factorized(op, f.values(), &w, false)?,
        Method::Spectral => spectral(op, f.values(), &w, false)?,
        Method::Auto => unreachable!(),
    };
    SampledField::new(op.grid.clone(), values)
}

/// `T* g` for the adjoint with respect to the Riemann-sum inner product
/// scaled out: the plain conjugate transpose of the node-to-node matrix.
pub fn apply_adjoint(op: &OperatorSpec, g: &SampledField, sel: &Selection, method: Method) -> Result<SampledField> {
    check_field(op, g)?;
    let w = op.weights(sel)?;
    let values = match resolve(op, method) {
        Method::Spectral => spectral(op, g.values(), &w, true)?,
        Method::Factorized => factorized(op, g.values(), &w, true)?,
        _ => {
            let a = explicit_matrix(op, sel)?;
            let v = nalgebra::DVector::from_column_slice(g.values());
            (a.adjoint() * v).as_slice().to_vec()
        }
    };
    SampledField::new(op.grid.clone(), values)
}

fn direct(op: &OperatorSpec, f: &SampledField, w: &[Vec<f64>]) -> Result<Vec<Complex64>> {
    let grid = &op.grid;
    let n = grid.n();
    let space = grid.space();
    let idx = FactorIndex::new(grid);
    let fhat = fourier::forward(grid, f.values());
    let dxi = grid.frequency_cell_volume();
    let multiplier_form = op.symbol.is_multiplier_form();
    let mut xi_flat = Vec::new();
    let mut coef = Vec::new();
    let mut xi = vec![0.0; n];
    for (k, v) in fhat.iter().enumerate() {
        let wk = product_weight(&idx, w, k);
        if wk == 0.0 {
            continue;
        }
        grid.node_frequency(k, &mut xi);
        let m = if multiplier_form { op.symbol.multiplier(&xi)? } else { 1.0 };
        xi_flat.extend_from_slice(&xi);
        coef.push(v * (wk * m * dxi));
    }
    let factors: Vec<_> = (0..space.d()).map(|i| space.factor_axes(i)).collect();
    let out = (0..grid.node_count())
        .into_par_iter()
        .map_init(
            || vec![0.0; n],
            |x, node| -> Result<Complex64> {
                grid.node_coords(node, x);
                let chi = op.symbol.cutoff(x);
                if chi == 0.0 {
                    return Ok(ZERO);
                }
                let mut acc = ZERO;
                for (q, c) in coef.iter().enumerate() {
                    let xq = &xi_flat[q * n..(q + 1) * n];
                    let ph: f64 = factors
                        .iter()
                        .enumerate()
                        .map(|(i, r)| op.phase.eval_factor(i, &x[r.clone()], &xq[r.clone()]))
                        .sum();
                    let amp = if multiplier_form {
                        Complex64::new(chi, 0.0)
                    } else {
                        crate::symbol::eval_symbol(&op.symbol, x, xq)?
                    };
                    acc += cis(ph) * amp * c;
                }
                Ok(acc)
            },
        )
        .collect::<Result<Vec<_>>>()?;
    Ok(out)
}

/// Kernel table `B[x][ξ] = e^{2πiΦᵢ}·σᵢ·wᵢ·Δξᵢ` of one factor, restricted
/// to frequencies with nonzero weight.
struct FactorTable {
    active: Vec<usize>,
    table: Vec<Complex64>,
}

fn factor_table(op: &OperatorSpec, i: usize, w: &[f64]) -> Result<FactorTable> {
    let fg = op.grid.factor_grid(i);
    let ni = fg.n();
    let dxi = fg.frequency_cell_volume();
    let active: Vec<usize> = (0..w.len()).filter(|&k| w[k] != 0.0).collect();
    let xis: Vec<Vec<f64>> = active
        .iter()
        .map(|&k| {
            let mut v = vec![0.0; ni];
            fg.node_frequency(k, &mut v);
            v
        })
        .collect();
    let rows: Vec<Vec<Complex64>> = (0..fg.node_count())
        .into_par_iter()
        .map(|node| -> Result<Vec<Complex64>> {
            let mut x = vec![0.0; ni];
            fg.node_coords(node, &mut x);
            active
                .iter()
                .zip(&xis)
                .map(|(&k, xi)| {
                    let s = op.symbol.factor_value(i, &x, xi)?;
                    Ok(cis(op.phase.eval_factor(i, &x, xi)) * (s * w[k] * dxi))
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FactorTable { active, table: rows.concat() })
}

/// Applies (or, with `adjoint`, applies the conjugate transpose of) the
/// factor operators in sequence.
fn factorized(op: &OperatorSpec, input: &[Complex64], w: &[Vec<f64>], adjoint: bool) -> Result<Vec<Complex64>> {
    if !op.symbol.is_factorizable() {
        return Err(Error::NotFactorizable(format!("symbol '{}' has a custom part", op.symbol.tag())));
    }
    let grid = &op.grid;
    let space = grid.space();
    let idx = FactorIndex::new(grid);
    let total = grid.node_count();
    let mut data = input.to_vec();
    let order: Vec<usize> = if adjoint { (0..space.d()).rev().collect() } else { (0..space.d()).collect() };
    for i in order {
        let fg = grid.factor_grid(i);
        let size = idx.sizes[i];
        let post = idx.strides[i];
        let pre = total / (size * post);
        let tab = factor_table(op, i, &w[i])?;
        let signs = fourier::parity_signs(&fg);
        let cell = fg.cell_volume();
        let shape = fg.point_counts().to_vec();
        let plan = NdFft::new(&shape, if adjoint { FftDirection::Inverse } else { FftDirection::Forward });
        // Gather fibers into rows, transform each, scatter back.
        let mut fibers = vec![ZERO; total];
        for p in 0..pre {
            for s in 0..size {
                let src = (p * size + s) * post;
                for q in 0..post {
                    fibers[(p * post + q) * size + s] = data[src + q];
                }
            }
        }
        let na = tab.active.len();
        fibers.par_chunks_mut(size).for_each_init(
            || (Vec::new(), vec![ZERO; na]),
            |(scratch, spec), fiber| {
                if adjoint {
                    // v(ξ) = Σ_x conj(B[x][ξ]) g(x), then hⁿ·Σ_ξ e^{2πi x·ξ} v(ξ).
                    spec.iter_mut().for_each(|v| *v = ZERO);
                    for (xk, g) in fiber.iter().enumerate() {
                        if *g == ZERO {
                            continue;
                        }
                        let row = &tab.table[xk * na..(xk + 1) * na];
                        for (v, b) in spec.iter_mut().zip(row) {
                            *v += b.conj() * g;
                        }
                    }
                    fiber.iter_mut().for_each(|v| *v = ZERO);
                    for (q, &k) in tab.active.iter().enumerate() {
                        fiber[k] = spec[q] * (cell * signs[k]);
                    }
                    plan.process(fiber, scratch);
                } else {
                    plan.process(fiber, scratch);
                    for (q, &k) in tab.active.iter().enumerate() {
                        spec[q] = fiber[k] * (cell * signs[k]);
                    }
                    for (xk, out) in fiber.iter_mut().enumerate() {
                        let row = &tab.table[xk * na..(xk + 1) * na];
                        *out = row.iter().zip(spec.iter()).map(|(b, v)| b * v).sum();
                    }
                }
            },
        );
        for p in 0..pre {
            for s in 0..size {
                let dst = (p * size + s) * post;
                for q in 0..post {
                    data[dst + q] = fibers[(p * post + q) * size + s];
                }
            }
        }
    }
    Ok(data)
}

/// Per-node spectral factor `e^{2πiψ(ξ)}·m(ξ)·w(ξ)`.
fn spectral_factor(op: &OperatorSpec, w: &[Vec<f64>]) -> Result<Vec<Complex64>> {
    let parts = op
        .phase
        .spectral_parts()
        .ok_or_else(|| Error::NotMultiplier(format!("phase '{}' is not of the form x·ξ + ψ(ξ)", op.phase.name())))?;
    if !op.symbol.is_multiplier_form() {
        return Err(Error::NotMultiplier(format!("symbol '{}' is not χ(x)·m(ξ)", op.symbol.tag())));
    }
    let grid = &op.grid;
    let space = grid.space();
    let idx = FactorIndex::new(grid);
    let n = grid.n();
    (0..grid.node_count())
        .into_par_iter()
        .map_init(
            || vec![0.0; n],
            |xi, k| {
                let wk = product_weight(&idx, w, k);
                if wk == 0.0 {
                    return Ok(ZERO);
                }
                grid.node_frequency(k, xi);
                let psi: f64 = parts.iter().enumerate().map(|(i, p)| p.eval(&xi[space.factor_axes(i)])).sum();
                Ok(cis(psi) * (op.symbol.multiplier(xi)? * wk))
            },
        )
        .collect()
}

fn cutoff_values(op: &OperatorSpec) -> Vec<f64> {
    let grid = &op.grid;
    let n = grid.n();
    (0..grid.node_count())
        .into_par_iter()
        .map_init(
            || vec![0.0; n],
            |x, node| {
                grid.node_coords(node, x);
                op.symbol.cutoff(x)
            },
        )
        .collect()
}

fn spectral(op: &OperatorSpec, input: &[Complex64], w: &[Vec<f64>], adjoint: bool) -> Result<Vec<Complex64>> {
    let grid = &op.grid;
    let mult = spectral_factor(op, w)?;
    let chi = cutoff_values(op);
    if adjoint {
        let g: Vec<Complex64> = input.iter().zip(&chi).map(|(v, c)| v * c).collect();
        let mut s = fourier::inverse_adjoint(grid, &g);
        s.par_iter_mut().zip(&mult).for_each(|(v, m)| *v *= m.conj());
        Ok(fourier::forward_adjoint(grid, &s))
    } else {
        let mut s = fourier::forward(grid, input);
        s.par_iter_mut().zip(&mult).for_each(|(v, m)| *v *= m);
        let mut out = fourier::inverse(grid, &s);
        out.par_iter_mut().zip(&chi).for_each(|(v, c)| *v *= c);
        Ok(out)
    }
}

/// Dense node-to-node matrix `A = B·F` of the selected operator, with
/// `B[x][ξ] = e^{2πiΦ}σwΔξ` and `F` the forward transform.
pub fn explicit_matrix(op: &OperatorSpec, sel: &Selection) -> Result<DMatrix<Complex64>> {
    let w = op.weights(sel)?;
    let grid = &op.grid;
    let n = grid.n();
    let total = grid.node_count();
    let idx = FactorIndex::new(grid);
    let dxi = grid.frequency_cell_volume();
    let cell = grid.cell_volume();
    let signs = fourier::parity_signs(grid);
    let plan = NdFft::new(grid.point_counts(), FftDirection::Forward);
    let freq: Vec<(usize, Vec<f64>, f64)> = (0..total)
        .filter_map(|k| {
            let wk = product_weight(&idx, &w, k);
            (wk != 0.0).then(|| {
                let mut xi = vec![0.0; n];
                grid.node_frequency(k, &mut xi);
                (k, xi, wk)
            })
        })
        .collect();
    let rows: Vec<Vec<Complex64>> = (0..total)
        .into_par_iter()
        .map(|a| -> Result<Vec<Complex64>> {
            let mut x = vec![0.0; n];
            grid.node_coords(a, &mut x);
            // A[a][b] = hⁿ·DFT[B[a][·]·(−1)^k](b)
            let mut row = vec![ZERO; total];
            for (k, xi, wk) in &freq {
                let s = crate::symbol::eval_symbol(&op.symbol, &x, xi)?;
                let ph = crate::phase::eval_phase(&op.phase, &x, xi)?;
                row[*k] = cis(ph) * s * (wk * dxi * signs[*k] * cell);
            }
            plan.process(&mut row, &mut Vec::new());
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_fn(total, total, |a, b| rows[a][b]))
}

/// `K_{j}^ν(x,y) = Σ_ξ e^{2πi(Φ(x,ξ) − y·ξ)} σ(x,ξ) w(ξ) Δξ`.
pub fn kernel_value(op: &OperatorSpec, sel: &Selection, x: &[f64], y: &[f64]) -> Result<Complex64> {
    let w = op.weights(sel)?;
    let grid = &op.grid;
    let idx = FactorIndex::new(grid);
    let dxi = grid.frequency_cell_volume();
    let mut xi = vec![0.0; grid.n()];
    let mut acc = ZERO;
    for k in 0..grid.node_count() {
        let wk = product_weight(&idx, &w, k);
        if wk == 0.0 {
            continue;
        }
        grid.node_frequency(k, &mut xi);
        let ph = crate::phase::eval_phase(&op.phase, x, &xi)? - y.iter().zip(&xi).map(|(a, b)| a * b).sum::<f64>();
        acc += cis(ph) * crate::symbol::eval_symbol(&op.symbol, x, &xi)? * (wk * dxi);
    }
    Ok(acc)
}

/// Fraction of `‖f̂‖²` at frequencies where some `|ξᵢ| > 2^{Jᵢ}`, i.e. where
/// the truncation weight is below 1.
pub fn truncation_defect(op: &OperatorSpec, f: &SampledField) -> Result<f64> {
    check_field(op, f)?;
    let grid = &op.grid;
    let space = grid.space();
    let fhat = fourier::forward(grid, f.values());
    let mut xi = vec![0.0; grid.n()];
    let (mut outside, mut total) = (0.0, 0.0);
    for (k, v) in fhat.iter().enumerate() {
        let e = v.norm_sqr();
        total += e;
        grid.node_frequency(k, &mut xi);
        let cut = (0..space.d()).any(|i| space.factor_norm(i, &xi) > (op.levels[i] as f64).exp2());
        if cut {
            outside += e;
        }
    }
    Ok(if total > 0.0 { outside / total } else { 0.0 })
}

/// One benchmark record.
#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub op: String,
    pub grid: String,
    pub levels: String,
    pub sectors: String,
    pub wall_ns: u128,
    pub checksum: String,
}

pub const BENCH_CSV_HEADER: &str = "op,grid,levels,sectors,wall_ns,checksum";

impl BenchRow {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{},{},{}", self.op, self.grid, self.levels, self.sectors, self.wall_ns, self.checksum)
    }
}

/// Short SHA-256 digest of the little-endian sample bytes.
pub fn field_checksum(f: &SampledField) -> String {
    let mut h = Sha256::new();
    for v in f.values() {
        h.update(v.re.to_le_bytes());
        h.update(v.im.to_le_bytes());
    }
    let digest = h.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Times one application and records it.
pub fn bench(op: &OperatorSpec, f: &SampledField, sel: &Selection, method: Method) -> Result<(BenchRow, SampledField)> {
    let start = Instant::now();
    let out = apply_selected(op, f, sel, method)?;
    let wall_ns = start.elapsed().as_nanos();
    let (levels, sectors) = sel.label();
    let grid = op.grid.point_counts().iter().map(|p| p.to_string()).collect::<Vec<_>>().join("x");
    let row = BenchRow {
        op: format!("{:?}", resolve(op, method)).to_lowercase(),
        grid,
        levels,
        sectors,
        wall_ns,
        checksum: field_checksum(&out),
    };
    Ok((row, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{lp_norm, Exponent, ProductSpace};
    use crate::phase::FactorPhase;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sp(dims: &[usize]) -> ProductSpace {
        ProductSpace::new(dims).unwrap()
    }

    /// Random trigonometric polynomial with `|ξᵢ| ≤ band` in every factor.
    fn band_limited(grid: &LatticeGrid, band: f64, seed: u64) -> SampledField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let space = grid.space().clone();
        let mut spec = vec![ZERO; grid.node_count()];
        let mut xi = vec![0.0; grid.n()];
        for (k, v) in spec.iter_mut().enumerate() {
            grid.node_frequency(k, &mut xi);
            if (0..space.d()).all(|i| space.factor_norm(i, &xi) <= band) {
                *v = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            }
        }
        SampledField::new(grid.clone(), fourier::inverse(grid, &spec)).unwrap()
    }

    fn rel(a: &SampledField, b: &SampledField) -> f64 {
        lp_norm(&a.sub(b).unwrap(), Exponent::Two).unwrap() / lp_norm(b, Exponent::Two).unwrap()
    }

    #[test]
    fn identity_reproduces_band_limited_input() {
        let g = LatticeGrid::uniform(sp(&[2]), 1.0, 32).unwrap();
        let op = OperatorSpec::with_max_levels(SymbolSpec::unit(sp(&[2])), PhaseSpec::identity(sp(&[2])), g.clone()).unwrap();
        let f = band_limited(&g, (op.levels[0] as f64).exp2(), 1);
        assert!(rel(&apply(&op, &f).unwrap(), &f) <= 1e-10);
    }

    #[test]
    fn translation_shifts() {
        let g = LatticeGrid::uniform(sp(&[1]), 2.0, 64).unwrap();
        let op = OperatorSpec::with_max_levels(
            SymbolSpec::unit(sp(&[1])),
            PhaseSpec::translation(sp(&[1]), 0.5).unwrap(),
            g.clone(),
        )
        .unwrap();
        let shifted = |x: &[f64]| {
            let t = PI * (x[0] + 0.5) / 2.0;
            Complex64::new((3.0 * t).cos(), (2.0 * t).sin() - 0.25 * (5.0 * t).cos())
        };
        let f = SampledField::from_fn(g.clone(), |x| shifted(&[x[0] - 0.5]));
        let want = SampledField::from_fn(g.clone(), shifted);
        assert!(rel(&apply(&op, &f).unwrap(), &want) <= 1e-10);
    }

    #[test]
    fn halfwave_on_a_plane_wave() {
        let g = LatticeGrid::uniform(sp(&[2]), 1.0, 32).unwrap();
        let op = OperatorSpec::with_max_levels(SymbolSpec::unit(sp(&[2])), PhaseSpec::halfwave(sp(&[2])), g.clone()).unwrap();
        // k = (3,4) in cycles per period 2, i.e. ξ = (1.5, 2), |ξ| = 2.5.
        let f = SampledField::from_fn(g.clone(), |x| cis(1.5 * x[0] + 2.0 * x[1]));
        let got = apply(&op, &f).unwrap();
        for (a, b) in got.values().iter().zip(f.values()) {
            assert!((a - b * cis(2.5)).norm() < 1e-12);
        }
    }

    #[test]
    fn paths_agree() {
        let space = sp(&[1, 1]);
        let g = LatticeGrid::uniform(space.clone(), 1.0, 16).unwrap();
        let phase = PhaseSpec::new(space.clone(), vec![FactorPhase::Halfwave, FactorPhase::Translation { a: 0.25 }]).unwrap();
        let sym = SymbolSpec::critical_order(space.clone(), 1.2).unwrap();
        let op = OperatorSpec::with_max_levels(sym, phase, g.clone()).unwrap();
        let f = band_limited(&g, 4.0, 3);
        let sel = Selection::sector(2, &[(0, 1, 1)]);
        let d = apply_selected(&op, &f, &sel, Method::Direct).unwrap();
        let fa = apply_selected(&op, &f, &sel, Method::Factorized).unwrap();
        let s = apply_selected(&op, &f, &sel, Method::Spectral).unwrap();
        let m = explicit_matrix(&op, &sel).unwrap();
        let e = m * nalgebra::DVector::from_column_slice(f.values());
        assert!(rel(&fa, &d) < 1e-12);
        assert!(rel(&s, &d) < 1e-12);
        let ef = SampledField::new(g.clone(), e.as_slice().to_vec()).unwrap();
        assert!(rel(&ef, &d) < 1e-12);
    }

    #[test]
    fn adjoints_match_conjugate_transpose() {
        let space = sp(&[1, 1]);
        let g = LatticeGrid::uniform(space.clone(), 1.0, 16).unwrap();
        let phase = PhaseSpec::new(space.clone(), vec![FactorPhase::Halfwave, FactorPhase::Perturbed { eps: 0.1 }]).unwrap();
        let sym = SymbolSpec::critical_order(space.clone(), 1.2).unwrap();
        let op = OperatorSpec::with_max_levels(sym.clone(), phase, g.clone()).unwrap();
        let gfield = band_limited(&g, 4.0, 5);
        let sel = Selection::full(2);
        let dense = explicit_matrix(&op, &sel).unwrap().adjoint() * nalgebra::DVector::from_column_slice(gfield.values());
        let dense = SampledField::new(g.clone(), dense.as_slice().to_vec()).unwrap();
        let fa = apply_adjoint(&op, &gfield, &sel, Method::Factorized).unwrap();
        assert!(rel(&fa, &dense) < 1e-12);
        let sop = OperatorSpec::with_max_levels(sym, PhaseSpec::halfwave(space), g.clone()).unwrap();
        let dense = explicit_matrix(&sop, &sel).unwrap().adjoint() * nalgebra::DVector::from_column_slice(gfield.values());
        let dense = SampledField::new(g, dense.as_slice().to_vec()).unwrap();
        let sp_adj = apply_adjoint(&sop, &gfield, &sel, Method::Spectral).unwrap();
        assert!(rel(&sp_adj, &dense) < 1e-12);
    }

    #[test]
    fn partial_and_sector_sums() {
        let space = sp(&[2]);
        let g = LatticeGrid::uniform(space.clone(), 1.0, 32).unwrap();
        let op = OperatorSpec::with_max_levels(
            SymbolSpec::critical_order(space.clone(), 1.5).unwrap(),
            PhaseSpec::halfwave(space.clone()),
            g.clone(),
        )
        .unwrap();
        let f = band_limited(&g, 8.0, 9);
        let whole = apply(&op, &f).unwrap();
        let mut acc = SampledField::zeros(g.clone());
        for j in 0..=op.levels[0] {
            let tj = apply_partial(&op, &f, &[(0, j)]).unwrap();
            let mut sectors = SampledField::zeros(g.clone());
            let count = op.angular_grid(0, j).unwrap().len();
            for nu in 0..count {
                let t = apply_sector(&op, &f, &[(0, j, nu)]).unwrap();
                sectors = sectors.combine(Complex64::new(1.0, 0.0), &t, Complex64::new(1.0, 0.0)).unwrap();
            }
            assert!(rel(&sectors, &tj) <= 1e-11, "level {j}");
            acc = acc.combine(Complex64::new(1.0, 0.0), &tj, Complex64::new(1.0, 0.0)).unwrap();
        }
        assert!(rel(&acc, &whole) <= 1e-10);
    }

    #[test]
    fn shell_input_misses_distant_levels() {
        let space = sp(&[1]);
        let g = LatticeGrid::uniform(space.clone(), 2.0, 128).unwrap();
        let op = OperatorSpec::with_max_levels(SymbolSpec::unit(space.clone()), PhaseSpec::identity(space), g.clone()).unwrap();
        // ξ = 3 lies in the shell (2, 4).
        let f = SampledField::from_fn(g.clone(), |x| cis(3.0 * x[0]));
        for j in 4..=op.levels[0] {
            let t = apply_partial(&op, &f, &[(0, j)]).unwrap();
            assert!(lp_norm(&t, Exponent::Inf).unwrap() < 1e-12);
        }
    }

    #[test]
    fn low_block_is_low_pass() {
        let space = sp(&[1]);
        let g = LatticeGrid::uniform(space.clone(), 2.0, 64).unwrap();
        let op = OperatorSpec::with_max_levels(SymbolSpec::unit(space.clone()), PhaseSpec::identity(space), g.clone()).unwrap();
        let f = SampledField::from_fn(g.clone(), |x| Complex64::new(1.0 + (PI * x[0]).cos() + (3.0 * PI * x[0]).sin(), 0.0));
        let t0 = apply_partial(&op, &f, &[(0, 0)]).unwrap();
        // φ(0.5) = 1 keeps the ξ = ±1/2 term, φ(1.5) = 1/2 halves the other.
        let want = SampledField::from_fn(g, |x| Complex64::new(1.0 + (PI * x[0]).cos() + 0.5 * (3.0 * PI * x[0]).sin(), 0.0));
        assert!(rel(&t0, &want) < 1e-12);
    }

    #[test]
    fn one_dimensional_sectors_split_by_sign() {
        let space = sp(&[1]);
        let g = LatticeGrid::uniform(space.clone(), 1.0, 64).unwrap();
        let op = OperatorSpec::with_max_levels(SymbolSpec::unit(space.clone()), PhaseSpec::identity(space), g.clone()).unwrap();
        let f = SampledField::from_fn(g.clone(), |x| cis(5.0 * x[0]) + cis(-5.0 * x[0]) * 2.0);
        let plus = apply_sector(&op, &f, &[(0, 3, 0)]).unwrap();
        let minus = apply_sector(&op, &f, &[(0, 3, 1)]).unwrap();
        let w = lp_weight(3, 5.0);
        for (node, (p, m)) in plus.values().iter().zip(minus.values()).enumerate() {
            let x = g.coord(0, node);
            assert!((p - cis(5.0 * x) * w).norm() < 1e-12);
            assert!((m - cis(-5.0 * x) * (2.0 * w)).norm() < 1e-12);
        }
    }

    #[test]
    fn kernel_examples() {
        let space = sp(&[1]);
        let g = LatticeGrid::uniform(space.clone(), 1.0, 32).unwrap();
        let op = OperatorSpec::with_max_levels(
            SymbolSpec::bump_const(space.clone(), 1.5).unwrap(),
            PhaseSpec::identity(space),
            g,
        )
        .unwrap();
        let sel = Selection::partial(1, &[(0, 2)]);
        let k = kernel_value(&op, &sel, &[0.1], &[0.1]).unwrap();
        assert!(k.re > 0.0 && k.im.abs() < 1e-12);
        let a = kernel_value(&op, &sel, &[0.1], &[0.3]).unwrap();
        let b = kernel_value(&op, &sel, &[0.2], &[0.4]).unwrap();
        assert!((a - b).norm() < 1e-12);
    }

    #[test]
    fn linearity_and_determinism() {
        let space = sp(&[1, 1]);
        let g = LatticeGrid::uniform(space.clone(), 1.0, 16).unwrap();
        let op = OperatorSpec::with_max_levels(
            SymbolSpec::rough_rho(space.clone(), 0.5, 1.5).unwrap(),
            PhaseSpec::halfwave(space),
            g.clone(),
        )
        .unwrap();
        let f = band_limited(&g, 4.0, 1);
        let h = band_limited(&g, 4.0, 2);
        let (al, be) = (Complex64::new(0.3, -1.2), Complex64::new(2.0, 0.5));
        let lhs = apply(&op, &f.combine(al, &h, be).unwrap()).unwrap();
        let rhs = apply(&op, &f).unwrap().combine(al, &apply(&op, &h).unwrap(), be).unwrap();
        assert!(rel(&lhs, &rhs) <= 1e-12);
        let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| apply(&op, &f).unwrap());
        let parallel = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap().install(|| apply(&op, &f).unwrap());
        assert_eq!(serial.values(), parallel.values());
        let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| apply_factorized(&op, &f).unwrap());
        let parallel = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap().install(|| apply_factorized(&op, &f).unwrap());
        assert_eq!(serial.values(), parallel.values());
    }

    #[test]
    fn rejects_bad_requests() {
        let space = sp(&[1]);
        let g = LatticeGrid::uniform(space.clone(), 1.0, 32).unwrap();
        assert!(matches!(
            OperatorSpec::new(SymbolSpec::unit(space.clone()), PhaseSpec::identity(space.clone()), g.clone(), vec![3]),
            Err(Error::LevelOutOfRange { .. })
        ));
        let op = OperatorSpec::with_max_levels(SymbolSpec::unit(space.clone()), PhaseSpec::identity(space.clone()), g.clone()).unwrap();
        let f = SampledField::zeros(g.clone());
        assert!(matches!(apply_partial(&op, &f, &[(0, 9)]), Err(Error::LevelOutOfRange { .. })));
        assert!(matches!(apply_sector(&op, &f, &[(0, 1, 2)]), Err(Error::InvalidSector { .. })));
        let custom = SymbolSpec::custom(space.clone(), vec![0.0], 1.0, 0.0, |_, _| Complex64::new(1.0, 0.0)).unwrap();
        let cop = OperatorSpec::with_max_levels(custom, PhaseSpec::identity(space.clone()), g).unwrap();
        assert!(matches!(apply_factorized(&cop, &f), Err(Error::NotFactorizable(_))));
        assert!(matches!(apply_selected(&cop, &f, &Selection::full(1), Method::Spectral), Err(Error::NotMultiplier(_))));
    }

    #[test]
    fn bench_rows() {
        let space = sp(&[1]);
        let g = LatticeGrid::uniform(space.clone(), 1.0, 32).unwrap();
        let op = OperatorSpec::with_max_levels(SymbolSpec::unit(space.clone()), PhaseSpec::identity(space), g.clone()).unwrap();
        let f = band_limited(&g, 4.0, 1);
        let (row, out) = bench(&op, &f, &Selection::partial(1, &[(0, 2)]), Method::Direct).unwrap();
        assert_eq!(row.op, "direct");
        assert_eq!(row.levels, "2");
        assert_eq!(row.checksum, field_checksum(&out));
        assert_eq!(row.csv_line().split(',').count(), BENCH_CSV_HEADER.split(',').count());
    }
}
