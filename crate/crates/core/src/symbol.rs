//! Product amplitudes in `S^{m⃗}_{ρ,δ}` and a finite-difference order check.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::decomp::bump;
use crate::error::{Error, Result};
use crate::lattice::ProductSpace;

type CustomFn = Arc<dyn Fn(&[f64], &[f64]) -> Complex64 + Send + Sync>;

/// One multiplicative part of an amplitude.
#[derive(Clone)]
pub enum Part {
    /// `χ(x) = Πᵢ φ(2|xᵢ|/R)`: 1 on `|xᵢ| ≤ R/2`, 0 beyond `R`.
    Cutoff { radius: f64 },
    /// `Πᵢ (1 + |ξᵢ|²)^{mᵢ/2}`.
    Bessel { m: Vec<f64> },
    /// `Πᵢ cos(|ξᵢ|^{1-ρ})`.
    Oscillating { rho: f64 },
    /// Arbitrary `σ(x, ξ)`, not factorizable.
    Custom(CustomFn),
}

impl fmt::Debug for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Part::Cutoff { radius } => write!(f, "Cutoff({radius})"),
            Part::Bessel { m } => write!(f, "Bessel({m:?})"),
            Part::Oscillating { rho } => write!(f, "Oscillating({rho})"),
            Part::Custom(_) => write!(f, "Custom"),
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|t| t * t).sum::<f64>().sqrt()
}

impl Part {
    fn factor(&self, i: usize, x: &[f64], xi: &[f64]) -> f64 {
        match self {
            Part::Cutoff { radius } => bump(2.0 * norm(x) / radius),
            Part::Bessel { m } => (1.0 + xi.iter().map(|t| t * t).sum::<f64>()).powf(m[i] / 2.0),
            Part::Oscillating { rho } => norm(xi).powf(1.0 - rho).cos(),
            Part::Custom(_) => unreachable!("custom parts are not factorizable"),
        }
    }

    fn depends_on_x(&self) -> bool {
        matches!(self, Part::Cutoff { .. } | Part::Custom(_))
    }
}

/// An amplitude `σ(x,ξ)` with its declared order `(m⃗, ρ, δ)`.
#[derive(Debug, Clone)]
pub struct SymbolSpec {
    space: ProductSpace,
    pub order: Vec<f64>,
    pub rho: f64,
    pub delta: f64,
    tag: String,
    parts: Vec<Part>,
}

impl SymbolSpec {
    pub fn new(
        space: ProductSpace,
        order: Vec<f64>,
        rho: f64,
        delta: f64,
        tag: &str,
        parts: Vec<Part>,
    ) -> Result<Self> {
        if order.len() != space.d() {
            return Err(Error::InvalidSpace(format!("{} order entries for d = {}", order.len(), space.d())));
        }
        if !(0.5..=1.0).contains(&rho) || !(0.0..=1.0).contains(&delta) {
            return Err(Error::InvalidSpace(format!("rho {rho} / delta {delta} outside [1/2,1] / [0,1]")));
        }
        for p in &parts {
            match p {
                Part::Cutoff { radius } if !(radius.is_finite() && *radius > 0.0) => {
                    return Err(Error::InvalidSpace(format!("support radius {radius} must be positive")));
                }
                Part::Bessel { m } if m.len() != space.d() => {
                    return Err(Error::InvalidSpace(format!("{} exponents for d = {}", m.len(), space.d())));
                }
                Part::Oscillating { rho } if !(0.0..1.0).contains(rho) => {
                    return Err(Error::InvalidSpace(format!("oscillation rho {rho} outside [0,1)")));
                }
                _ => {}
            }
        }
        Ok(Self { space, order, rho, delta, tag: tag.to_string(), parts })
    }

    /// `σ ≡ 1`, no x-cutoff.
    pub fn unit(space: ProductSpace) -> Self {
        let d = space.d();
        Self::new(space, vec![0.0; d], 1.0, 0.0, "unit", vec![]).expect("unit symbol")
    }

    /// `σ = χ(x)`.
    pub fn bump_const(space: ProductSpace, radius: f64) -> Result<Self> {
        let d = space.d();
        Self::new(space, vec![0.0; d], 1.0, 0.0, "bump_const", vec![Part::Cutoff { radius }])
    }

    /// `χ(x)·Πᵢ(1+|ξᵢ|²)^{mᵢ/2}` with `mᵢ = −(nᵢ−1)/2`.
    pub fn critical_order(space: ProductSpace, radius: f64) -> Result<Self> {
        let m = critical_exponents(&space);
        Self::bessel_power_tagged(space, m, Some(radius), "critical_order")
    }

    /// `χ(x)·Πᵢ(1+|ξᵢ|²)^{mᵢ/2}`; `radius = None` drops the cutoff.
    pub fn bessel_power(space: ProductSpace, m: Vec<f64>, radius: Option<f64>) -> Result<Self> {
        Self::bessel_power_tagged(space, m, radius, "bessel_power")
    }

    fn bessel_power_tagged(space: ProductSpace, m: Vec<f64>, radius: Option<f64>, tag: &str) -> Result<Self> {
        let mut parts: Vec<Part> = radius.map(|radius| Part::Cutoff { radius }).into_iter().collect();
        parts.push(Part::Bessel { m: m.clone() });
        Self::new(space, m, 1.0, 0.0, tag, parts)
    }

    /// `χ(x)·Πᵢ cos(|ξᵢ|^{1−ρ})`, order 0 of type `ρ`.
    pub fn rough_rho(space: ProductSpace, rho: f64, radius: f64) -> Result<Self> {
        let d = space.d();
        Self::new(space, vec![0.0; d], rho, 0.0, "rough_rho", vec![Part::Cutoff { radius }, Part::Oscillating { rho: rho.min(1.0 - 1e-15) }])
    }

    pub fn custom<F>(space: ProductSpace, order: Vec<f64>, rho: f64, delta: f64, f: F) -> Result<Self>
    where
        F: Fn(&[f64], &[f64]) -> Complex64 + Send + Sync + 'static,
    {
        Self::new(space, order, rho, delta, "custom", vec![Part::Custom(Arc::new(f))])
    }

    /// Pointwise product; the declared order adds, `ρ` takes the minimum and
    /// `δ` the maximum.
    pub fn product(&self, other: &SymbolSpec) -> Result<Self> {
        if self.space != other.space {
            return Err(Error::InvalidSpace("symbols on different spaces".into()));
        }
        let order = self.order.iter().zip(&other.order).map(|(a, b)| a + b).collect();
        let mut parts = self.parts.clone();
        parts.extend(other.parts.iter().cloned());
        Self::new(
            self.space.clone(),
            order,
            self.rho.min(other.rho),
            self.delta.max(other.delta),
            &format!("{}*{}", self.tag, other.tag),
            parts,
        )
    }

    /// Same amplitude with a different declared order.
    pub fn with_order(mut self, order: Vec<f64>) -> Result<Self> {
        if order.len() != self.space.d() {
            return Err(Error::InvalidSpace(format!("{} order entries for d = {}", order.len(), self.space.d())));
        }
        self.order = order;
        Ok(self)
    }

    pub fn space(&self) -> &ProductSpace {
        &self.space
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn parts(&self) -> &[Part] {
        &self.parts
    }

    /// Smallest cutoff radius, if any.
    pub fn support_radius(&self) -> Option<f64> {
        self.parts
            .iter()
            .filter_map(|p| match p {
                Part::Cutoff { radius } => Some(*radius),
                _ => None,
            })
            .reduce(f64::min)
    }

    pub fn is_factorizable(&self) -> bool {
        !self.parts.iter().any(|p| matches!(p, Part::Custom(_)))
    }

    /// True when `σ(x,ξ) = χ(x)·m(ξ)`.
    pub fn is_multiplier_form(&self) -> bool {
        self.is_factorizable()
    }

    /// `σᵢ(xᵢ,ξᵢ)`; the product over factors equals `σ`.
    pub fn factor_value(&self, i: usize, x: &[f64], xi: &[f64]) -> Result<f64> {
        if !self.is_factorizable() {
            return Err(Error::NotFactorizable(format!("symbol '{}' has a custom part", self.tag)));
        }
        Ok(self.parts.iter().map(|p| p.factor(i, x, xi)).product())
    }

    /// x-only part `χ(x)` of a multiplier-form symbol.
    pub fn cutoff(&self, x: &[f64]) -> f64 {
        let mut v = 1.0;
        for p in self.parts.iter().filter(|p| p.depends_on_x()) {
            if let Part::Cutoff { .. } = p {
                for i in 0..self.space.d() {
                    let r = self.space.factor_axes(i);
                    v *= p.factor(i, &x[r], &[]);
                }
            }
        }
        v
    }

    /// ξ-only part `m(ξ)` of a multiplier-form symbol.
    pub fn multiplier(&self, xi: &[f64]) -> Result<f64> {
        if !self.is_multiplier_form() {
            return Err(Error::NotMultiplier(format!("symbol '{}' has a custom part", self.tag)));
        }
        let mut v = 1.0;
        for p in self.parts.iter().filter(|p| !p.depends_on_x()) {
            for i in 0..self.space.d() {
                v *= p.factor(i, &[], &xi[self.space.factor_axes(i)]);
            }
        }
        Ok(v)
    }

    fn raw(&self, x: &[f64], xi: &[f64]) -> Complex64 {
        let mut v = Complex64::new(1.0, 0.0);
        for p in &self.parts {
            match p {
                Part::Custom(f) => v *= f(x, xi),
                _ => {
                    for i in 0..self.space.d() {
                        let r = self.space.factor_axes(i);
                        v *= p.factor(i, &x[r.clone()], &xi[r]);
                    }
                }
            }
        }
        v
    }
}

/// `mᵢ = −(nᵢ−1)/2` for every factor.
pub fn critical_exponents(space: &ProductSpace) -> Vec<f64> {
    space.dims().iter().map(|&n| -((n as f64) - 1.0) / 2.0).collect()
}

/// `σ(x,ξ)`, exactly 0 outside the x-support.
pub fn eval_symbol(s: &SymbolSpec, x: &[f64], xi: &[f64]) -> Result<Complex64> {
    let v = s.raw(x, xi);
    if !(v.re.is_finite() && v.im.is_finite()) {
        return Err(Error::NonFinite(format!("symbol '{}'", s.tag)));
    }
    Ok(v)
}

/// Measured `C_{α,β}` for one pair of multi-indices.
#[derive(Debug, Clone, Serialize)]
pub struct OrderEntry {
    /// Derivative counts per ξ axis.
    pub alpha: Vec<usize>,
    /// Derivative counts per x axis.
    pub beta: Vec<usize>,
    /// Sup of the normalized derivative on each dyadic level `|ξᵢ| ∈ [2^ℓ, 2^{ℓ+1})`.
    pub per_level: Vec<f64>,
    pub constant: f64,
    /// max/min over the top three levels.
    pub drift: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct OrderReport {
    pub entries: Vec<OrderEntry>,
    pub pass: bool,
}

/// Top dyadic level sampled by [`check_order`].
pub const ORDER_TOP_LEVEL: u32 = 8;
/// Largest allowed max/min ratio of a constant over the top three levels.
pub const ORDER_DRIFT_LIMIT: f64 = 2.0;

fn multi_indices(n: usize, max: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0; n]];
    if max >= 1 {
        for a in 0..n {
            let mut v = vec![0; n];
            v[a] = 1;
            out.push(v);
        }
    }
    if max >= 2 {
        for a in 0..n {
            for b in a..n {
                let mut v = vec![0; n];
                v[a] += 1;
                v[b] += 1;
                out.push(v);
            }
        }
    }
    out
}

/// Central-difference derivative of `f` along the axes listed in `dirs`
/// (with repetition), each with its own step.
fn mixed_difference<F: Fn(&[f64]) -> Complex64>(f: &F, at: &[f64], dirs: &[(usize, f64)]) -> Complex64 {
    match dirs.split_first() {
        None => f(at),
        Some((&(axis, h), rest)) => {
            let mut p = at.to_vec();
            p[axis] = at[axis] + h;
            let up = mixed_difference(f, &p, rest);
            p[axis] = at[axis] - h;
            let down = mixed_difference(f, &p, rest);
            (up - down) / (2.0 * h)
        }
    }
}

/// Samples `σ` on every dyadic level and reports
/// `sup |∂^α_ξ ∂^β_x σ| / Πᵢ(1+|ξᵢ|)^{mᵢ−ρ|αᵢ|+δ|βᵢ|}` for `|α| ≤ 2`, `|β| ≤ 1`.
/// A constant passes when it is finite and its max/min over the top three
/// levels stays below [`ORDER_DRIFT_LIMIT`].
pub fn check_order(s: &SymbolSpec, samples: usize, seed: u64) -> Result<OrderReport> {
    let space = s.space();
    let n = space.n();
    let radius = s.support_radius().unwrap_or(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let levels = ORDER_TOP_LEVEL as usize + 1;
    // Points are shared by every (α, β) so constants are comparable.
    let mut points: Vec<Vec<(Vec<f64>, Vec<f64>)>> = Vec::with_capacity(levels);
    for l in 0..levels {
        let lo = (l as f64).exp2();
        let mut at_level = Vec::with_capacity(samples);
        for _ in 0..samples {
            let mut xi = vec![0.0; n];
            let mut x = vec![0.0; n];
            for i in 0..space.d() {
                let axes = space.factor_axes(i);
                let r = rng.gen_range(lo..2.0 * lo);
                let dir: Vec<f64> = loop {
                    let v: Vec<f64> = axes.clone().map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let nv = norm(&v);
                    if nv > 1e-3 && nv <= 1.0 {
                        break v.iter().map(|t| t / nv).collect();
                    }
                };
                for (k, a) in axes.clone().enumerate() {
                    xi[a] = r * dir[k];
                    x[a] = rng.gen_range(-radius..radius) / (axes.len() as f64).sqrt();
                }
            }
            at_level.push((x, xi));
        }
        points.push(at_level);
    }

    let mut entries = Vec::new();
    for alpha in multi_indices(n, 2) {
        for beta in multi_indices(n, 1) {
            let mut per_level = Vec::with_capacity(levels);
            for at_level in &points {
                let mut sup: f64 = 0.0;
                for (x, xi) in at_level {
                    let mut z = xi.clone();
                    z.extend_from_slice(x);
                    let mut dirs = Vec::new();
                    for (a, &c) in alpha.iter().enumerate() {
                        let i = space.factor_of_axis(a);
                        let scale = (1.0 + space.factor_norm(i, xi)).powf(s.rho);
                        dirs.extend(std::iter::repeat((a, 1e-3 * scale)).take(c));
                    }
                    for (a, &c) in beta.iter().enumerate() {
                        dirs.extend(std::iter::repeat((n + a, 1e-4 * radius)).take(c));
                    }
                    let f = |p: &[f64]| s.raw(&p[n..], &p[..n]);
                    let v = mixed_difference(&f, &z, &dirs).norm();
                    let mut w = 1.0;
                    for i in 0..space.d() {
                        let r = space.factor_axes(i);
                        let ai: usize = alpha[r.clone()].iter().sum();
                        let bi: usize = beta[r].iter().sum();
                        let e = s.order[i] - s.rho * ai as f64 + s.delta * bi as f64;
                        w *= (1.0 + space.factor_norm(i, xi)).powf(e);
                    }
                    sup = sup.max(v / w);
                }
                per_level.push(sup);
            }
            let constant = per_level.iter().copied().fold(0.0, f64::max);
            let top = &per_level[levels - 3..];
            let hi = top.iter().copied().fold(0.0, f64::max);
            let lo = top.iter().copied().fold(f64::INFINITY, f64::min);
            // Derivatives that vanish identically (ξ-independent symbols)
            // only leave rounding noise behind.
            let negligible = hi <= 1e-9 * per_level[0].max(1.0);
            let drift = if negligible { 1.0 } else { hi / lo };
            let pass = constant.is_finite() && drift < ORDER_DRIFT_LIMIT;
            entries.push(OrderEntry { alpha: alpha.clone(), beta: beta.clone(), per_level, constant, drift, pass });
        }
    }
    let pass = entries.iter().all(|e| e.pass);
    Ok(OrderReport { entries, pass })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sp(dims: &[usize]) -> ProductSpace {
        ProductSpace::new(dims).unwrap()
    }

    #[test]
    fn eval_examples() {
        let b = SymbolSpec::bump_const(sp(&[2]), 2.0).unwrap();
        let chi = bump(2.0 * 1.5 / 2.0);
        assert!((eval_symbol(&b, &[1.5, 0.0], &[7.0, 1.0]).unwrap().re - chi).abs() < 1e-15);
        assert_eq!(eval_symbol(&b, &[0.3, 0.2], &[7.0, 1.0]).unwrap().re, 1.0);
        assert_eq!(eval_symbol(&b, &[2.5, 0.0], &[7.0, 1.0]).unwrap().re, 0.0);

        let c = SymbolSpec::critical_order(sp(&[2]), 2.0).unwrap();
        assert_eq!(c.order, vec![-0.5]);
        let v = eval_symbol(&c, &[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert!((v.re - 26f64.powf(-0.25)).abs() < 1e-15);

        let r = SymbolSpec::rough_rho(sp(&[2]), 0.5, 2.0).unwrap();
        let v = eval_symbol(&r, &[0.0, 0.0], &[0.0, 4.0]).unwrap();
        assert!((v.re - 2f64.cos()).abs() < 1e-15);

        let bad = SymbolSpec::custom(sp(&[1]), vec![0.0], 1.0, 0.0, |_, _| Complex64::new(f64::INFINITY, 0.0)).unwrap();
        assert!(matches!(eval_symbol(&bad, &[0.0], &[0.0]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn factor_and_multiplier_forms_agree() {
        let s = SymbolSpec::bessel_power(sp(&[1, 2]), vec![-0.3, -0.7], Some(1.5))
            .unwrap()
            .product(&SymbolSpec::rough_rho(sp(&[1, 2]), 0.6, 3.0).unwrap())
            .unwrap();
        let x = [0.4, -0.5, 0.2];
        let xi = [3.0, -2.0, 5.0];
        let full = eval_symbol(&s, &x, &xi).unwrap().re;
        let f0 = s.factor_value(0, &x[..1], &xi[..1]).unwrap();
        let f1 = s.factor_value(1, &x[1..], &xi[1..]).unwrap();
        assert!((full - f0 * f1).abs() < 1e-14);
        assert!((full - s.cutoff(&x) * s.multiplier(&xi).unwrap()).abs() < 1e-14);
        assert_eq!(s.support_radius(), Some(1.5));
        let c = SymbolSpec::custom(sp(&[1]), vec![0.0], 1.0, 0.0, |_, _| Complex64::new(1.0, 0.0)).unwrap();
        assert!(matches!(c.factor_value(0, &[0.0], &[0.0]), Err(Error::NotFactorizable(_))));
        assert!(matches!(c.multiplier(&[0.0]), Err(Error::NotMultiplier(_))));
    }

    #[test]
    fn order_check_constant_of_bump() {
        let b = SymbolSpec::bump_const(sp(&[1]), 2.0).unwrap();
        let r = check_order(&b, 64, 1).unwrap();
        assert!(r.pass);
        assert!((r.entries[0].constant - 1.0).abs() < 1e-12);
    }

    #[test]
    fn order_check_accepts_declared_and_rejects_lowered() {
        let builtins = vec![
            SymbolSpec::bump_const(sp(&[2]), 2.0).unwrap(),
            SymbolSpec::critical_order(sp(&[2]), 2.0).unwrap(),
            SymbolSpec::bessel_power(sp(&[1]), vec![-1.0], Some(2.0)).unwrap(),
            SymbolSpec::rough_rho(sp(&[2]), 0.5, 2.0).unwrap(),
            SymbolSpec::critical_order(sp(&[1, 2]), 2.0).unwrap(),
        ];
        for s in builtins {
            let ok = check_order(&s, 96, 7).unwrap();
            assert!(ok.pass, "{} at declared order: {:?}", s.tag(), ok.entries.iter().filter(|e| !e.pass).collect::<Vec<_>>());
            let lowered = s.order.iter().map(|m| m - 1.0).collect();
            let s2 = s.clone().with_order(lowered).unwrap();
            assert!(!check_order(&s2, 96, 7).unwrap().pass, "{} lowered", s.tag());
        }
    }

    #[test]
    fn order_check_flags_misdeclared_growth() {
        let grow = SymbolSpec::custom(sp(&[2]), vec![0.0], 1.0, 0.0, |x, xi| {
            Complex64::new(bump(norm(x)) * (1.0 + norm(xi)), 0.0)
        })
        .unwrap();
        let r = check_order(&grow, 64, 3).unwrap();
        assert!(!r.pass);
        let c0 = &r.entries[0].per_level;
        assert!(c0[8] / c0[7] > 1.7);
    }

    #[test]
    fn product_closure() {
        let a = SymbolSpec::critical_order(sp(&[2]), 2.0).unwrap();
        let b = SymbolSpec::rough_rho(sp(&[2]), 0.5, 3.0).unwrap();
        let p = a.product(&b).unwrap();
        assert_eq!(p.order, vec![-0.5]);
        assert_eq!(p.rho, 0.5);
        assert!(check_order(&p, 96, 5).unwrap().pass);
    }

    #[test]
    fn multi_index_counts() {
        assert_eq!(multi_indices(2, 2).len(), 6);
        assert_eq!(multi_indices(3, 1).len(), 4);
    }
}
