//! Factorized phases `Φ(x,ξ) = Σᵢ Φᵢ(xᵢ,ξᵢ)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decomp::{bump, bump_slope_max, direction_grid};
use crate::error::{Error, Result};
use crate::lattice::{LatticeGrid, ProductSpace};

/// Central-difference step for gradients of custom phases.
pub const GRADIENT_STEP: f64 = 1e-4;

type FactorFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
type GradFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

/// One factor `Φᵢ(xᵢ, ξᵢ)`.
#[derive(Clone)]
pub enum FactorPhase {
    /// `x·ξ`
    Identity,
    /// `(x + a·1)·ξ`
    Translation { a: f64 },
    /// `x·ξ + |ξ|`
    Halfwave,
    /// `x·ξ + ε·g(x)·|ξ|` with `g(x) = φ(|x|)`.
    Perturbed { eps: f64 },
    Custom { name: String, value: FactorFn, gradient: Option<GradFn> },
}

impl fmt::Debug for FactorPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FactorPhase::Identity => write!(f, "Identity"),
            FactorPhase::Translation { a } => write!(f, "Translation({a})"),
            FactorPhase::Halfwave => write!(f, "Halfwave"),
            FactorPhase::Perturbed { eps } => write!(f, "Perturbed({eps})"),
            FactorPhase::Custom { name, .. } => write!(f, "Custom({name})"),
        }
    }
}

/// The `ξ`-only part `ψ` of a phase of the form `x·ξ + ψ(ξ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpectralPart {
    Zero,
    Shift(f64),
    Norm,
}

impl SpectralPart {
    pub fn eval(self, xi: &[f64]) -> f64 {
        match self {
            SpectralPart::Zero => 0.0,
            SpectralPart::Shift(a) => a * xi.iter().sum::<f64>(),
            SpectralPart::Norm => norm(xi),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|t| t * t).sum::<f64>().sqrt()
}

impl FactorPhase {
    pub fn custom<F>(name: &str, value: F) -> Self
    where
        F: Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    {
        FactorPhase::Custom { name: name.to_string(), value: Arc::new(value), gradient: None }
    }

    pub fn name(&self) -> String {
        match self {
            FactorPhase::Identity => "identity".into(),
            FactorPhase::Translation { a } => format!("translation({a})"),
            FactorPhase::Halfwave => "halfwave".into(),
            FactorPhase::Perturbed { eps } => format!("perturbed({eps})"),
            FactorPhase::Custom { name, .. } => name.clone(),
        }
    }

    pub fn eval(&self, x: &[f64], xi: &[f64]) -> f64 {
        match self {
            FactorPhase::Identity => dot(x, xi),
            FactorPhase::Translation { a } => x.iter().zip(xi).map(|(p, q)| (p + a) * q).sum(),
            FactorPhase::Halfwave => dot(x, xi) + norm(xi),
            FactorPhase::Perturbed { eps } => dot(x, xi) + eps * bump(norm(x)) * norm(xi),
            FactorPhase::Custom { value, .. } => value(x, xi),
        }
    }

    /// `∇_ξ Φᵢ(x, ξ)`; at `ξ = 0` the `|ξ|` term contributes nothing.
    pub fn grad_xi(&self, x: &[f64], xi: &[f64], out: &mut [f64]) {
        let r = norm(xi);
        let unit = |a: usize| if r == 0.0 { 0.0 } else { xi[a] / r };
        match self {
            FactorPhase::Identity => out.copy_from_slice(x),
            FactorPhase::Translation { a } => {
                for (o, p) in out.iter_mut().zip(x) {
                    *o = p + a;
                }
            }
            FactorPhase::Halfwave => {
                for (k, o) in out.iter_mut().enumerate() {
                    *o = x[k] + unit(k);
                }
            }
            FactorPhase::Perturbed { eps } => {
                let g = bump(norm(x));
                for (k, o) in out.iter_mut().enumerate() {
                    *o = x[k] + eps * g * unit(k);
                }
            }
            FactorPhase::Custom { value, gradient, .. } => match gradient {
                Some(g) => g(x, xi, out),
                None => fd_gradient(|v| value(x, v), xi, GRADIENT_STEP, out),
            },
        }
    }

    pub fn spectral_part(&self) -> Option<SpectralPart> {
        match self {
            FactorPhase::Identity => Some(SpectralPart::Zero),
            FactorPhase::Translation { a } => Some(SpectralPart::Shift(*a)),
            FactorPhase::Halfwave => Some(SpectralPart::Norm),
            _ => None,
        }
    }
}

fn fd_gradient<F: Fn(&[f64]) -> f64>(f: F, at: &[f64], h: f64, out: &mut [f64]) {
    let mut p = at.to_vec();
    for k in 0..at.len() {
        p[k] = at[k] + h;
        let up = f(&p);
        p[k] = at[k] - h;
        let down = f(&p);
        p[k] = at[k];
        out[k] = (up - down) / (2.0 * h);
    }
}

/// A factorized phase on a product space.
#[derive(Debug, Clone)]
pub struct PhaseSpec {
    space: ProductSpace,
    factors: Vec<FactorPhase>,
}

impl PhaseSpec {
    pub fn new(space: ProductSpace, factors: Vec<FactorPhase>) -> Result<Self> {
        if factors.len() != space.d() {
            return Err(Error::InvalidSpace(format!(
                "{} factor phases for d = {}",
                factors.len(),
                space.d()
            )));
        }
        let limit = 0.5 / bump_slope_max();
        for f in &factors {
            match f {
                FactorPhase::Perturbed { eps } if !(eps.abs() < limit) => {
                    return Err(Error::Degenerate(format!(
                        "perturbation {eps} too large; mixed Hessian stays invertible only for |eps| < {limit:.3}"
                    )));
                }
                FactorPhase::Translation { a } | FactorPhase::Perturbed { eps: a } if !a.is_finite() => {
                    return Err(Error::NonFinite("phase parameter".into()));
                }
                _ => {}
            }
        }
        Ok(Self { space, factors })
    }

    /// The same builtin on every factor.
    pub fn uniform(space: ProductSpace, factor: FactorPhase) -> Result<Self> {
        let d = space.d();
        Self::new(space, vec![factor; d])
    }

    pub fn identity(space: ProductSpace) -> Self {
        Self::uniform(space, FactorPhase::Identity).expect("identity phase is always valid")
    }

    pub fn halfwave(space: ProductSpace) -> Self {
        Self::uniform(space, FactorPhase::Halfwave).expect("halfwave phase is always valid")
    }

    pub fn translation(space: ProductSpace, a: f64) -> Result<Self> {
        Self::uniform(space, FactorPhase::Translation { a })
    }

    pub fn space(&self) -> &ProductSpace {
        &self.space
    }

    pub fn factor(&self, i: usize) -> &FactorPhase {
        &self.factors[i]
    }

    pub fn factors(&self) -> &[FactorPhase] {
        &self.factors
    }

    pub fn name(&self) -> String {
        self.factors.iter().map(FactorPhase::name).collect::<Vec<_>>().join("⊗")
    }

    pub fn eval_factor(&self, i: usize, x: &[f64], xi: &[f64]) -> f64 {
        self.factors[i].eval(x, xi)
    }

    /// `ψ` per factor when every factor has the form `x·ξ + ψ(ξ)`.
    pub fn spectral_parts(&self) -> Option<Vec<SpectralPart>> {
        self.factors.iter().map(FactorPhase::spectral_part).collect()
    }
}

/// `Φ(x,ξ) = Σᵢ Φᵢ(xᵢ,ξᵢ)` for full-length `x` and `ξ`.
pub fn eval_phase(phi: &PhaseSpec, x: &[f64], xi: &[f64]) -> Result<f64> {
    if x.iter().chain(xi).any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("phase arguments".into()));
    }
    let space = phi.space();
    let v: f64 = (0..space.d())
        .map(|i| {
            let r = space.factor_axes(i);
            phi.eval_factor(i, &x[r.clone()], &xi[r])
        })
        .sum();
    if !v.is_finite() {
        return Err(Error::NonFinite("phase value".into()));
    }
    Ok(v)
}

fn sample_point(rng: &mut ChaCha8Rng, grid: &LatticeGrid, axes: std::ops::Range<usize>) -> Vec<f64> {
    axes.map(|a| rng.gen_range(-grid.extent(a)..grid.extent(a))).collect()
}

/// Frequency sample with `spacing ≤ |ξᵢ| ≤ max frequency` in each factor.
fn sample_frequency(rng: &mut ChaCha8Rng, grid: &LatticeGrid, axes: std::ops::Range<usize>) -> Vec<f64> {
    let lo = axes.clone().map(|a| 1.0 / grid.period(a)).fold(0.0, f64::max);
    let hi = axes.clone().map(|a| grid.max_frequency(a)).fold(f64::INFINITY, f64::min);
    loop {
        let v: Vec<f64> = axes.clone().map(|_| rng.gen_range(-hi..hi)).collect();
        let r = norm(&v);
        if r >= lo && r <= hi {
            return v;
        }
    }
}

/// Max over samples and scales of `|Φ(x,tξ) − tΦ(x,ξ)| / (1 + |tΦ(x,ξ)|)`.
pub fn check_homogeneity(
    phi: &PhaseSpec,
    grid: &LatticeGrid,
    samples: usize,
    scales: &[f64],
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let space = phi.space();
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        for i in 0..space.d() {
            let x = sample_point(&mut rng, grid, space.factor_axes(i));
            let xi = sample_frequency(&mut rng, grid, space.factor_axes(i));
            let base = phi.eval_factor(i, &x, &xi);
            for &t in scales {
                let scaled: Vec<f64> = xi.iter().map(|v| t * v).collect();
                let d = (phi.eval_factor(i, &x, &scaled) - t * base).abs() / (1.0 + (t * base).abs());
                worst = worst.max(d);
            }
        }
    }
    worst
}

/// Result of the mixed-Hessian scan.
#[derive(Debug, Clone, PartialEq)]
pub struct NondegeneracyReport {
    pub min_abs_det: f64,
    pub per_factor: Vec<f64>,
    pub step: f64,
}

impl NondegeneracyReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.min_abs_det >= threshold
    }
}

/// `|det ∂²Φᵢ/∂xᵢ∂ξᵢ|` by mixed central second differences, minimized over
/// a subsampled set of grid nodes and the unit directions of the level-`j`
/// direction grid. `step = None` uses `max(1e-4, spacing/16)`.
pub fn check_nondegeneracy(
    phi: &PhaseSpec,
    grid: &LatticeGrid,
    level: u32,
    step: Option<f64>,
) -> Result<NondegeneracyReport> {
    let space = phi.space();
    let spacing = (0..grid.n()).map(|a| grid.spacing(a)).fold(f64::INFINITY, f64::min);
    let h = step.unwrap_or((spacing / 16.0).max(1e-4));
    let mut per_factor = Vec::with_capacity(space.d());
    for i in 0..space.d() {
        let axes = space.factor_axes(i);
        let ni = axes.len();
        let fg = grid.factor_grid(i);
        let stride = (fg.points(0) / 16).max(1);
        let dirs = direction_grid(ni, level, 1.0)?;
        let mut worst = f64::INFINITY;
        let mut idx = vec![0usize; ni];
        let mut x = vec![0.0; ni];
        'nodes: loop {
            for a in 0..ni {
                x[a] = fg.coord(a, idx[a]);
            }
            for u in dirs.directions() {
                let mut m = DMatrix::<f64>::zeros(ni, ni);
                for a in 0..ni {
                    for b in 0..ni {
                        let mut xp = x.clone();
                        let mut xm = x.clone();
                        xp[a] += h;
                        xm[a] -= h;
                        let mut up = u.to_vec();
                        let mut um = u.to_vec();
                        up[b] += h;
                        um[b] -= h;
                        let f = |p: &[f64], q: &[f64]| phi.eval_factor(i, p, q);
                        let v = (f(&xp, &up) - f(&xp, &um) - f(&xm, &up) + f(&xm, &um)) / (4.0 * h * h);
                        if !v.is_finite() {
                            return Err(Error::NonFinite(format!("mixed second difference of factor {i}")));
                        }
                        m[(a, b)] = v;
                    }
                }
                worst = worst.min(m.determinant().abs());
            }
            for a in (0..ni).rev() {
                idx[a] += stride;
                if idx[a] < fg.points(a) {
                    continue 'nodes;
                }
                idx[a] = 0;
            }
            break;
        }
        per_factor.push(worst);
    }
    let min_abs_det = per_factor.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(NondegeneracyReport { min_abs_det, per_factor, step: h })
}

/// `Ψᵢ(xᵢ,ξᵢ) = Φᵢ(xᵢ,ξᵢ) − ∇_ξΦᵢ(xᵢ, e)·ξᵢ` for a unit direction `e`.
pub fn psi_remainder(phi: &PhaseSpec, i: usize, x: &[f64], xi: &[f64], direction: &[f64]) -> f64 {
    let f = phi.factor(i);
    let mut g = vec![0.0; xi.len()];
    f.grad_xi(x, direction, &mut g);
    f.eval(x, xi) - dot(&g, xi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sp(dims: &[usize]) -> ProductSpace {
        ProductSpace::new(dims).unwrap()
    }

    #[test]
    fn eval_examples() {
        let id = PhaseSpec::identity(sp(&[1]));
        assert!((eval_phase(&id, &[0.3], &[2.0]).unwrap() - 0.6).abs() < 1e-15);
        let hw = PhaseSpec::halfwave(sp(&[2]));
        assert_eq!(eval_phase(&hw, &[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        let tr = PhaseSpec::translation(sp(&[1]), 0.5).unwrap();
        assert!((eval_phase(&tr, &[0.2], &[4.0]).unwrap() - 2.8).abs() < 1e-15);
        assert_eq!(eval_phase(&hw, &[0.1, 0.2], &[0.0, 0.0]).unwrap(), 0.0);
        assert!(eval_phase(&hw, &[f64::NAN, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn product_phase_sums_factors() {
        let p = PhaseSpec::new(sp(&[1, 2]), vec![FactorPhase::Translation { a: 1.0 }, FactorPhase::Halfwave])
            .unwrap();
        let v = eval_phase(&p, &[0.5, 1.0, -1.0], &[2.0, 3.0, 4.0]).unwrap();
        assert!((v - (3.0 + (3.0 - 4.0 + 5.0))).abs() < 1e-14);
        assert!(PhaseSpec::new(sp(&[1, 1]), vec![FactorPhase::Identity]).is_err());
    }

    #[test]
    fn homogeneity_examples() {
        let g = LatticeGrid::uniform(sp(&[2]), 1.0, 64).unwrap();
        // Power-of-two scales are exact in floating point.
        assert_eq!(check_homogeneity(&PhaseSpec::identity(sp(&[2])), &g, 100, &[0.5, 2.0, 8.0], 1), 0.0);
        let hw = PhaseSpec::halfwave(sp(&[2]));
        assert!(check_homogeneity(&hw, &g, 1000, &[0.5, 2.0, 7.0], 2) <= 1e-12);
        let pert = PhaseSpec::uniform(sp(&[2]), FactorPhase::Perturbed { eps: 0.1 }).unwrap();
        assert!(check_homogeneity(&pert, &g, 1000, &[0.5, 2.0, 7.0], 3) <= 1e-12);

        let wrong = PhaseSpec::uniform(
            sp(&[1]),
            FactorPhase::custom("quadratic", |x, xi| x[0] * xi[0] + xi[0] * xi[0]),
        )
        .unwrap();
        // |Φ(0,2) − 2Φ(0,1)| / (1 + 2) = 2/3.
        let d = (wrong.eval_factor(0, &[0.0], &[2.0]) - 2.0 * wrong.eval_factor(0, &[0.0], &[1.0])).abs()
            / (1.0 + 2.0 * wrong.eval_factor(0, &[0.0], &[1.0]));
        assert!((d - 2.0 / 3.0).abs() < 1e-15);
        let g1 = LatticeGrid::uniform(sp(&[1]), 1.0, 64).unwrap();
        assert!(check_homogeneity(&wrong, &g1, 100, &[2.0], 4) > 0.1);
    }

    #[test]
    fn nondegeneracy_examples() {
        let g = LatticeGrid::uniform(sp(&[2]), 1.0, 32).unwrap();
        let r = check_nondegeneracy(&PhaseSpec::identity(sp(&[2])), &g, 2, None).unwrap();
        assert!((r.min_abs_det - 1.0).abs() < 1e-6);
        assert!(r.passes(0.5));
        let r = check_nondegeneracy(&PhaseSpec::halfwave(sp(&[2])), &g, 2, None).unwrap();
        assert!((r.min_abs_det - 1.0).abs() < 1e-6);
        let pert = PhaseSpec::uniform(sp(&[2]), FactorPhase::Perturbed { eps: 0.1 }).unwrap();
        assert!(check_nondegeneracy(&pert, &g, 2, None).unwrap().min_abs_det > 0.5);
        let degen = PhaseSpec::uniform(sp(&[2]), FactorPhase::custom("rank1", |x, xi| x[0] * xi[0])).unwrap();
        assert!(check_nondegeneracy(&degen, &g, 2, None).unwrap().min_abs_det <= 1e-10);
        let bad = PhaseSpec::uniform(sp(&[1]), FactorPhase::custom("nan", |_, _| f64::NAN)).unwrap();
        let g1 = LatticeGrid::uniform(sp(&[1]), 1.0, 32).unwrap();
        assert!(matches!(check_nondegeneracy(&bad, &g1, 0, None), Err(Error::NonFinite(_))));
    }

    #[test]
    fn large_perturbation_is_rejected() {
        assert!(matches!(
            PhaseSpec::uniform(sp(&[1]), FactorPhase::Perturbed { eps: 5.0 }),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn psi_examples() {
        let id = PhaseSpec::identity(sp(&[2]));
        assert_eq!(psi_remainder(&id, 0, &[0.3, -0.2], &[5.0, 7.0], &[0.6, 0.8]), 0.0);
        let hw = PhaseSpec::halfwave(sp(&[2]));
        let e = [0.6, 0.8];
        let on_axis = psi_remainder(&hw, 0, &[0.1, 0.4], &[64.0 * 0.6, 64.0 * 0.8], &e);
        assert!(on_axis.abs() < 1e-12);
        let a: f64 = 0.125;
        let base = 0.8f64.atan2(0.6);
        let xi = [64.0 * (base + a).cos(), 64.0 * (base + a).sin()];
        let psi = psi_remainder(&hw, 0, &[0.0, 0.0], &xi, &e);
        let closed = 64.0 * (1.0 - a.cos());
        assert!((psi - closed).abs() < 1e-12);
        assert!((closed - 0.499349).abs() < 1e-6);
    }

    #[test]
    fn fd_gradient_matches_analytic() {
        let x = [0.3, -0.7];
        let xi = [2.5, -1.5];
        for f in [FactorPhase::Identity, FactorPhase::Halfwave, FactorPhase::Translation { a: 0.5 }, FactorPhase::Perturbed { eps: 0.1 }] {
            let mut exact = [0.0; 2];
            f.grad_xi(&x, &xi, &mut exact);
            let mut fd = [0.0; 2];
            fd_gradient(|v| f.eval(&x, v), &xi, GRADIENT_STEP, &mut fd);
            for k in 0..2 {
                assert!((exact[k] - fd[k]).abs() <= 1e-6 * exact[k].abs().max(1.0), "{f:?}");
            }
        }
        let c = FactorPhase::custom("hw", |x, xi| x[0] * xi[0] + xi[0].abs());
        let mut g = [0.0];
        c.grad_xi(&[0.25], &[3.0], &mut g);
        assert!((g[0] - 1.25).abs() < 1e-8);
    }
}
