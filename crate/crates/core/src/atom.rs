//! Rectangle atoms: sampled, compactly supported, mean-zero in every factor
//! and normalized so that `‖a‖₂ = |R|^{-1/2}`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{
    lp_norm, pairwise_sum, Exponent, FactorSet, IndexPartition, LatticeGrid, SampledField,
};

/// One-dimensional profile family, applied per axis on `t ∈ (−1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// `t·β(t)` on the first axis of each factor, `β` on the others.
    OddBump,
    /// `(t² − μ)·β(t)` on the first axis of each factor, `β` on the others.
    TwoHump,
    /// `t·β(t)` on every axis.
    TensorOdd,
    /// Constant on the rectangle; no cancellation. Used to exercise the
    /// validator.
    Flat,
}

impl Profile {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "odd-bump" => Some(Profile::OddBump),
            "two-hump" => Some(Profile::TwoHump),
            "tensor-odd" => Some(Profile::TensorOdd),
            "flat" => Some(Profile::Flat),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Profile::OddBump => "odd-bump",
            Profile::TwoHump => "two-hump",
            Profile::TensorOdd => "tensor-odd",
            Profile::Flat => "flat",
        }
    }

    fn cancels(self, first_axis: bool) -> bool {
        match self {
            Profile::OddBump | Profile::TwoHump => first_axis,
            Profile::TensorOdd => true,
            Profile::Flat => false,
        }
    }

    fn shape(self, first_axis: bool, t: f64) -> f64 {
        if !(t.abs() < 1.0) {
            return 0.0;
        }
        if self == Profile::Flat {
            return 1.0;
        }
        let b = beta(t);
        if !self.cancels(first_axis) {
            return b;
        }
        match self {
            Profile::TwoHump => (t * t - TWO_HUMP_MU) * b,
            _ => t * b,
        }
    }
}

/// `∫t²β / ∫β` over `(−1,1)`, which makes `(t² − μ)β` mean-zero.
const TWO_HUMP_MU: f64 = 0.158_113_636_263_796_6;

fn beta(t: f64) -> f64 {
    if t.abs() < 1.0 {
        (-1.0 / (1.0 - t * t)).exp()
    } else {
        0.0
    }
}

/// `kᵢ = max(0, ⌈−log₂ rᵢ⌉)` for `rᵢ ≤ 2`; a tie `rᵢ = 2^{-k}` maps to `k`.
pub fn dyadic_index(r: f64) -> Option<u32> {
    if r > 2.0 || r <= 0.0 {
        return None;
    }
    Some((-r.log2()).ceil().max(0.0) as u32)
}

/// A sampled rectangle atom.
#[derive(Debug, Clone)]
pub struct RectangleAtom {
    /// Center `ȳ`, one entry per axis.
    pub center: Vec<f64>,
    /// Side length `rᵢ` per factor.
    pub radii: Vec<f64>,
    pub profile: Profile,
    pub field: SampledField,
    pub k: Vec<Option<u32>>,
}

impl RectangleAtom {
    pub fn grid(&self) -> &LatticeGrid {
        self.field.grid()
    }

    /// `|R| = Πᵢ rᵢ^{nᵢ}`.
    pub fn volume(&self) -> f64 {
        let space = self.grid().space();
        self.radii.iter().enumerate().map(|(i, r)| r.powi(space.dim(i) as i32)).product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        contains(self.grid(), &self.center, &self.radii, x)
    }

    pub fn center_of(&self, i: usize) -> &[f64] {
        &self.center[self.grid().space().factor_axes(i)]
    }
}

fn contains(grid: &LatticeGrid, center: &[f64], radii: &[f64], x: &[f64]) -> bool {
    let space = grid.space();
    (0..grid.n()).all(|a| (x[a] - center[a]).abs() <= radii[space.factor_of_axis(a)] / 2.0)
}

fn check_rectangle(grid: &LatticeGrid, center: &[f64], radii: &[f64]) -> Result<()> {
    let space = grid.space();
    if center.len() != grid.n() || radii.len() != space.d() {
        return Err(Error::InvalidAtom(format!(
            "expected {} center coordinates and {} radii",
            grid.n(),
            space.d()
        )));
    }
    if let Some(r) = radii.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
        return Err(Error::InvalidAtom(format!("side length {r} must be positive")));
    }
    for a in 0..grid.n() {
        let half = radii[space.factor_of_axis(a)] / 2.0;
        let margin = 2.0 * grid.spacing(a);
        if center[a] - half < -grid.extent(a) + margin || center[a] + half > grid.extent(a) - margin {
            return Err(Error::InvalidAtom(format!(
                "rectangle exceeds the grid on axis {a} (needs a margin of two spacings)"
            )));
        }
    }
    Ok(())
}

/// Samples one axis of the profile; cancelling axes are corrected so their
/// discrete sum vanishes while keeping the support.
fn axis_samples(grid: &LatticeGrid, axis: usize, center: f64, side: f64, profile: Profile, first: bool) -> Result<Vec<f64>> {
    let half = side / 2.0;
    let ts: Vec<f64> = (0..grid.points(axis)).map(|k| (grid.coord(axis, k) - center) / half).collect();
    let mut p: Vec<f64> = ts.iter().map(|&t| profile.shape(first, t)).collect();
    if profile.cancels(first) {
        let b: Vec<f64> = ts.iter().map(|&t| beta(t)).collect();
        let sb = pairwise_sum(&b);
        if sb == 0.0 {
            return Err(Error::InvalidAtom(format!("side {side} too small for the grid on axis {axis}")));
        }
        let c = pairwise_sum(&p) / sb;
        for (v, w) in p.iter_mut().zip(&b) {
            *v -= c * w;
        }
        // One more pass removes the rounding left by the first.
        let c = pairwise_sum(&p) / sb;
        for (v, w) in p.iter_mut().zip(&b) {
            *v -= c * w;
        }
    }
    if p.iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidAtom(format!("side {side} too small for the grid on axis {axis}")));
    }
    Ok(p)
}

/// Tensor atom `a = Π hₐ(xₐ)` on the rectangle with the given center and
/// side lengths, rescaled so `‖a‖₂ = |R|^{-1/2}` on the grid.
pub fn make_tensor_atom(grid: &LatticeGrid, center: &[f64], radii: &[f64], profile: Profile) -> Result<RectangleAtom> {
    check_rectangle(grid, center, radii)?;
    let space = grid.space();
    let mut axes = Vec::with_capacity(grid.n());
    for i in 0..space.d() {
        for (k, a) in space.factor_axes(i).enumerate() {
            axes.push(axis_samples(grid, a, center[a], radii[i], profile, k == 0)?);
        }
    }
    let n = grid.n();
    let mut idx = vec![0usize; n];
    let values: Vec<Complex64> = (0..grid.node_count())
        .map(|node| {
            grid.multi_index(node, &mut idx);
            let v: f64 = idx.iter().enumerate().map(|(a, &k)| axes[a][k]).product();
            Complex64::new(v, 0.0)
        })
        .collect();
    let field = SampledField::new(grid.clone(), values)?;
    normalize(field, center.to_vec(), radii.to_vec(), profile)
}

fn normalize(mut field: SampledField, center: Vec<f64>, radii: Vec<f64>, profile: Profile) -> Result<RectangleAtom> {
    let space = field.grid().space().clone();
    let volume: f64 = radii.iter().enumerate().map(|(i, r)| r.powi(space.dim(i) as i32)).product();
    let norm = lp_norm(&field, Exponent::Two)?;
    if norm == 0.0 {
        return Err(Error::InvalidAtom("atom vanishes on the grid".into()));
    }
    field.scale(volume.sqrt().recip() / norm);
    let k = radii.iter().map(|&r| dyadic_index(r)).collect();
    Ok(RectangleAtom { center, radii, profile, field, k })
}

/// Renormalized `Σ wₖ aₖ` of atoms on one rectangle.
pub fn make_sum_atom(terms: &[(f64, &RectangleAtom)]) -> Result<RectangleAtom> {
    let (_, first) = terms.first().ok_or_else(|| Error::InvalidAtom("empty sum".into()))?;
    let mut acc = SampledField::zeros(first.grid().clone());
    for (w, a) in terms {
        if a.center != first.center || a.radii != first.radii || a.grid() != first.grid() {
            return Err(Error::InvalidAtom("summands live on different rectangles".into()));
        }
        acc = acc.combine(Complex64::new(1.0, 0.0), &a.field, Complex64::new(*w, 0.0))?;
    }
    normalize(acc, first.center.clone(), first.radii.clone(), first.profile)
}

/// Outcome of [`validate_atom`].
#[derive(Debug, Clone, Serialize)]
pub struct AtomReport {
    pub l2_norm: f64,
    pub l2_bound: f64,
    pub l2_ok: bool,
    /// Largest `|a|` at a node outside `R`.
    pub support_defect: f64,
    pub support_ok: bool,
    /// Per factor: `max over slices |∫ a dxᵢ| / ‖a‖₁`.
    pub cancel_defect: Vec<f64>,
    pub cancel_ok: Vec<bool>,
    pub l1_norm: f64,
    /// `‖a‖₁ ≤ |R|^{1/2}·‖a‖₂·(1 + 1e-9)`.
    pub cauchy_schwarz_ok: bool,
}

impl AtomReport {
    pub fn all_ok(&self) -> bool {
        self.l2_ok && self.support_ok && self.cancel_ok.iter().all(|&c| c) && self.cauchy_schwarz_ok
    }
}

pub const L2_TOLERANCE: f64 = 1e-9;
pub const CANCEL_TOLERANCE: f64 = 1e-10;

/// Measures the three atom conditions on the sampled field.
pub fn validate_atom(a: &RectangleAtom) -> Result<AtomReport> {
    let grid = a.grid();
    let space = grid.space();
    let l2_norm = lp_norm(&a.field, Exponent::Two)?;
    let l1_norm = lp_norm(&a.field, Exponent::One)?;
    let volume = a.volume();
    let l2_bound = volume.sqrt().recip();
    let mut x = vec![0.0; grid.n()];
    let mut support_defect: f64 = 0.0;
    for (node, v) in a.field.values().iter().enumerate() {
        grid.node_coords(node, &mut x);
        if !a.contains(&x) {
            support_defect = support_defect.max(v.norm());
        }
    }
    let mut cancel_defect = Vec::with_capacity(space.d());
    for i in 0..space.d() {
        let worst = slice_integrals(&a.field, i)
            .into_iter()
            .map(|s| s.norm())
            .fold(0.0, f64::max);
        cancel_defect.push(if l1_norm > 0.0 { worst / l1_norm } else { 0.0 });
    }
    let cancel_ok = cancel_defect.iter().map(|&c| c <= CANCEL_TOLERANCE).collect();
    Ok(AtomReport {
        l2_norm,
        l2_bound,
        l2_ok: l2_norm <= l2_bound * (1.0 + L2_TOLERANCE),
        support_defect,
        support_ok: support_defect == 0.0,
        cancel_defect,
        cancel_ok,
        l1_norm,
        cauchy_schwarz_ok: l1_norm <= volume.sqrt() * l2_norm * (1.0 + L2_TOLERANCE),
    })
}

/// `∫ a dxᵢ` for every node of the complementary axes.
fn slice_integrals(f: &SampledField, i: usize) -> Vec<Complex64> {
    let grid = f.grid();
    let axes = grid.space().factor_axes(i);
    let cell: f64 = axes.clone().map(|a| grid.spacing(a)).product();
    let mut idx = vec![0usize; grid.n()];
    let mut slices = std::collections::BTreeMap::<Vec<usize>, Vec<Complex64>>::new();
    for (node, v) in f.values().iter().enumerate() {
        grid.multi_index(node, &mut idx);
        let key: Vec<usize> = idx.iter().enumerate().filter(|(a, _)| !axes.contains(a)).map(|(_, &k)| k).collect();
        slices.entry(key).or_default().push(*v);
    }
    slices
        .into_values()
        .map(|vals| {
            let re: Vec<f64> = vals.iter().map(|v| v.re).collect();
            let im: Vec<f64> = vals.iter().map(|v| v.im).collect();
            Complex64::new(pairwise_sum(&re), pairwise_sum(&im)) * cell
        })
        .collect()
}

/// `K = {rᵢ < 1}`, `J₂ = {rᵢ ≥ 1}`, and the caller's `I ⊆ K` with split
/// `I₁ ⊆ I`.
pub fn index_partition(a: &RectangleAtom, i_set: FactorSet, i1: FactorSet) -> Result<IndexPartition> {
    partition_for_radii(&a.radii, i_set, i1)
}

pub fn partition_for_radii(radii: &[f64], i_set: FactorSet, i1: FactorSet) -> Result<IndexPartition> {
    let d = radii.len();
    let k = FactorSet::from_indices((0..d).filter(|&i| radii[i] < 1.0));
    let j2 = FactorSet::full(d).difference(k);
    if !i1.is_subset(i_set) {
        return Err(Error::Partition("I1 must be a subset of I".into()));
    }
    IndexPartition::new(d, k, j2, i_set, i1)
}
