//! Smooth bump, dyadic Littlewood–Paley pieces, direction grids on the
//! sphere and the normalized angular cutoffs built on them.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

fn glue(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else {
        (-1.0 / t).exp()
    }
}

/// `φ(t)`: 1 on `|t| ≤ 1`, 0 on `|t| ≥ 2`, smooth and monotone in between.
pub fn bump(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        1.0
    } else if t >= 2.0 {
        0.0
    } else {
        let a = glue(2.0 - t);
        a / (a + glue(t - 1.0))
    }
}

/// `1 - φ(3 - t)` on `[1,2]`; mirrors the transition about `t = 1.5`.
pub fn flipped_bump(t: f64) -> f64 {
    1.0 - bump(3.0 - t.abs())
}

/// Largest `|φ'|`, attained at the midpoint of the transition.
pub fn bump_slope_max() -> f64 {
    let h = 1e-6;
    (0..=2000)
        .map(|k| {
            let t = 1.0 + k as f64 / 2000.0;
            ((bump(t + h) - bump(t - h)) / (2.0 * h)).abs()
        })
        .fold(0.0, f64::max)
}

/// `φ_j(ξ)` as a function of `|ξ|`: `φ(|ξ|)` for `j = 0`, otherwise
/// `φ(2^{-j}|ξ|) − φ(2^{-j+1}|ξ|)`.
pub fn lp_weight(j: u32, norm: f64) -> f64 {
    let s = (-(j as f64)).exp2();
    if j == 0 {
        bump(norm)
    } else {
        bump(s * norm) - bump(2.0 * s * norm)
    }
}

/// The sum `Σ_{j ≤ J} φ_j = φ(2^{-J}|ξ|)`, used as the smooth truncation.
pub fn truncation_weight(top: u32, norm: f64) -> f64 {
    bump((-(top as f64)).exp2() * norm)
}

/// Dyadic partition with a top level `J`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DyadicPartition {
    pub top: u32,
}

impl DyadicPartition {
    pub fn new(top: u32) -> Self {
        Self { top }
    }

    pub fn weight(&self, j: u32, norm: f64) -> Result<f64> {
        if j > self.top {
            return Err(Error::LevelOutOfRange { level: j, max: self.top });
        }
        Ok(lp_weight(j, norm))
    }

    pub fn total(&self, norm: f64) -> f64 {
        truncation_weight(self.top, norm)
    }
}

/// Unit directions `ξ_j^ν` for one factor at one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngularGrid {
    pub dim: usize,
    pub level: u32,
    pub scale: f64,
    directions: Vec<[f64; 3]>,
}

/// Direction set at level `j`: `±1` on the line, equally spaced angles on the
/// circle, a Fibonacci spiral on the sphere. `scale` multiplies the nominal
/// spacing `2^{-j/2}`.
pub fn direction_grid(dim: usize, level: u32, scale: f64) -> Result<AngularGrid> {
    let width = scale * (-(level as f64) / 2.0).exp2();
    let directions = match dim {
        1 => vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
        2 => {
            let count = (2.0 * PI / width).ceil() as usize;
            (0..count)
                .map(|k| {
                    let a = 2.0 * PI * k as f64 / count as f64;
                    [a.cos(), a.sin(), 0.0]
                })
                .collect()
        }
        3 => {
            let count = (4.0 * PI / (width * width)).ceil() as usize;
            let golden = PI * (3.0 - 5f64.sqrt());
            (0..count)
                .map(|k| {
                    let z = 1.0 - (2.0 * k as f64 + 1.0) / count as f64;
                    let rho = (1.0 - z * z).max(0.0).sqrt();
                    let a = golden * k as f64;
                    [rho * a.cos(), rho * a.sin(), z]
                })
                .collect()
        }
        other => return Err(Error::UnsupportedDimension(other)),
    };
    Ok(AngularGrid { dim, level, scale, directions })
}

impl AngularGrid {
    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn direction(&self, nu: usize) -> &[f64] {
        &self.directions[nu][..self.dim]
    }

    pub fn directions(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.directions.iter().map(move |d| &d[..self.dim])
    }

    /// `2^{j/2}`, the inverse angular width.
    pub fn sharpness(&self) -> f64 {
        (self.level as f64 / 2.0).exp2() / self.scale
    }

    fn check(&self, nu: usize) -> Result<()> {
        if nu >= self.len() {
            return Err(Error::InvalidSector { level: self.level, nu, count: self.len() });
        }
        Ok(())
    }

    fn unit(&self, xi: &[f64]) -> Result<[f64; 3]> {
        let norm = xi.iter().map(|t| t * t).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::UndefinedDirection);
        }
        let mut u = [0.0; 3];
        for (a, &t) in xi.iter().enumerate() {
            u[a] = t / norm;
        }
        Ok(u)
    }

    fn raw(&self, nu: usize, u: &[f64; 3]) -> f64 {
        let d = &self.directions[nu];
        let dist = ((u[0] - d[0]).powi(2) + (u[1] - d[1]).powi(2) + (u[2] - d[2]).powi(2)).sqrt();
        bump(self.sharpness() * dist)
    }

    /// `Σ_ν φ_j^ν(ξ)`, the normalizing denominator.
    pub fn denominator(&self, xi: &[f64]) -> Result<f64> {
        let u = self.unit(xi)?;
        Ok((0..self.len()).map(|nu| self.raw(nu, &u)).sum())
    }

    /// `χ_j^ν(ξ)`. On the line this is the exact half-line indicator.
    pub fn angular_weight(&self, nu: usize, xi: &[f64]) -> Result<f64> {
        self.check(nu)?;
        if self.dim == 1 {
            if xi[0] == 0.0 {
                return Err(Error::UndefinedDirection);
            }
            let positive = xi[0] > 0.0;
            return Ok(if positive == (nu == 0) { 1.0 } else { 0.0 });
        }
        let u = self.unit(xi)?;
        let num = self.raw(nu, &u);
        if num == 0.0 {
            return Ok(0.0);
        }
        let den: f64 = (0..self.len()).map(|m| self.raw(m, &u)).sum();
        Ok(num / den)
    }

    /// All nonzero `(ν, χ_j^ν(ξ))` pairs at once.
    pub fn weights(&self, xi: &[f64]) -> Result<Vec<(usize, f64)>> {
        if self.dim == 1 {
            if xi[0] == 0.0 {
                return Err(Error::UndefinedDirection);
            }
            return Ok(vec![(if xi[0] > 0.0 { 0 } else { 1 }, 1.0)]);
        }
        let u = self.unit(xi)?;
        let raw: Vec<(usize, f64)> = (0..self.len())
            .map(|nu| (nu, self.raw(nu, &u)))
            .filter(|&(_, w)| w > 0.0)
            .collect();
        let den: f64 = raw.iter().map(|&(_, w)| w).sum();
        Ok(raw.into_iter().map(|(nu, w)| (nu, w / den)).collect())
    }

    /// `|ξ/|ξ| − ξ_j^ν| ≤ 2·2^{-j/2}` (on the line: the matching half-line).
    pub fn in_cone(&self, nu: usize, xi: &[f64]) -> Result<bool> {
        self.check(nu)?;
        if self.dim == 1 {
            return Ok(xi[0] != 0.0 && (xi[0] > 0.0) == (nu == 0));
        }
        let u = self.unit(xi)?;
        let d = &self.directions[nu];
        let dist = ((u[0] - d[0]).powi(2) + (u[1] - d[1]).powi(2) + (u[2] - d[2]).powi(2)).sqrt();
        Ok(self.sharpness() * dist <= 2.0)
    }

    /// Minimum pairwise chordal distance between directions.
    pub fn min_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for a in 0..self.len() {
            for b in a + 1..self.len() {
                let (p, q) = (&self.directions[a], &self.directions[b]);
                let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
                best = best.min(d);
            }
        }
        best
    }

    /// Plain-text table `index c1 [c2 [c3]]`, one direction per line.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (nu, d) in self.directions().enumerate() {
            out.push_str(&nu.to_string());
            for c in d {
                out.push_str(&format!(" {c:.17e}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Sector weight used inside operators, where the frequency origin can occur:
/// at `ξ = 0` every sector takes an equal share.
pub fn sector_share(grid: &AngularGrid, nu: usize, xi: &[f64]) -> Result<f64> {
    if xi.iter().all(|&t| t == 0.0) {
        grid.check(nu)?;
        return Ok(1.0 / grid.len() as f64);
    }
    grid.angular_weight(nu, xi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bump_examples() {
        assert_eq!(bump(0.7), 1.0);
        assert_eq!(bump(2.3), 0.0);
        let v = bump(1.5);
        assert!(v > 0.0 && v < 1.0);
        assert!((bump(1.5) + flipped_bump(1.5) - 1.0).abs() < 1e-15);
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bump_is_flat_at_the_joins() {
        // The glue has all derivatives vanishing at the endpoints, so finite
        // differences up to order 4 shrink with the step.
        for &t0 in &[1.0, 2.0] {
            for &h in &[1e-2, 5e-3] {
                let d4 = bump(t0 + 2.0 * h) - 4.0 * bump(t0 + h) + 6.0 * bump(t0)
                    - 4.0 * bump(t0 - h)
                    + bump(t0 - 2.0 * h);
                assert!((d4 / h.powi(4)).abs() < 1e-6, "t0={t0} h={h}");
            }
        }
    }

    #[test]
    fn lp_weight_examples() {
        for j in 1..8 {
            assert_eq!(lp_weight(j, (j as f64).exp2()), 1.0);
        }
        assert_eq!(lp_weight(1, 0.5), 0.0);
        let s: f64 = (0..=5).map(|j| lp_weight(j, 7.0)).sum();
        assert!((s - 1.0).abs() < 1e-15);
        assert!(DyadicPartition::new(3).weight(4, 1.0).is_err());
    }

    #[test]
    fn direction_counts() {
        assert_eq!(direction_grid(1, 9, 1.0).unwrap().len(), 2);
        assert_eq!(direction_grid(2, 4, 1.0).unwrap().len(), 26);
        assert_eq!(direction_grid(2, 0, 1.0).unwrap().len(), 7);
        assert!(matches!(direction_grid(4, 0, 1.0), Err(Error::UnsupportedDimension(4))));
        for j in 2..=10 {
            for dim in [2usize, 3] {
                if dim == 3 && j > 8 {
                    continue;
                }
                let g = direction_grid(dim, j, 1.0).unwrap();
                let c = g.len() as f64 / (j as f64 * (dim as f64 - 1.0) / 2.0).exp2();
                assert!(c > 1.0 && c < 20.0, "dim {dim} j {j}: {c}");
            }
        }
    }

    #[test]
    fn circle_and_sphere_grids_cover_and_separate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for dim in [2usize, 3] {
            for j in [0u32, 3, 6] {
                let g = direction_grid(dim, j, 1.0).unwrap();
                let w = (-(j as f64) / 2.0).exp2();
                assert!(g.min_separation() >= 0.5 * w, "dim {dim} j {j}");
                for _ in 0..2000 {
                    let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let n = v.iter().map(|t| t * t).sum::<f64>().sqrt();
                    if n < 1e-3 {
                        continue;
                    }
                    let best = g
                        .directions()
                        .map(|d| d.iter().zip(&v).map(|(a, b)| (a - b / n).powi(2)).sum::<f64>().sqrt())
                        .fold(f64::INFINITY, f64::min);
                    assert!(best <= w, "dim {dim} j {j}: {best} > {w}");
                    assert!(g.denominator(&v).unwrap() >= 1.0);
                }
            }
        }
    }

    #[test]
    fn angular_examples() {
        let g = direction_grid(1, 3, 1.0).unwrap();
        assert_eq!(g.angular_weight(0, &[3.0]).unwrap(), 1.0);
        assert_eq!(g.angular_weight(1, &[3.0]).unwrap(), 0.0);
        assert!(matches!(g.angular_weight(0, &[0.0]), Err(Error::UndefinedDirection)));

        // At j = 8 the angular step is 2π/101 ≈ 0.9953·2^{-4}, so the scaled
        // chord to each neighbour is just under 1 and the next one is past 2.
        let g = direction_grid(2, 8, 1.0).unwrap();
        assert_eq!(g.len(), 101);
        let d = g.direction(5).to_vec();
        let w = g.angular_weight(5, &[3.0 * d[0], 3.0 * d[1]]).unwrap();
        assert!((w - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(g.angular_weight(101, &d), Err(Error::InvalidSector { .. })));
        assert!(matches!(g.denominator(&[0.0, 0.0]), Err(Error::UndefinedDirection)));
    }

    #[test]
    fn sector_weights_partition_unity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for dim in 1..=3usize {
            for j in [0u32, 2, 5, 8] {
                let g = direction_grid(dim, j, 1.0).unwrap();
                for _ in 0..200 {
                    let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-50.0..50.0)).collect();
                    let s: f64 = g.weights(&v).unwrap().iter().map(|w| w.1).sum();
                    assert!((s - 1.0).abs() <= 1e-12);
                    for (nu, w) in g.weights(&v).unwrap() {
                        assert!(w > 0.0 && g.in_cone(nu, &v).unwrap());
                    }
                }
                let s: f64 = (0..g.len()).map(|nu| sector_share(&g, nu, &vec![0.0; dim]).unwrap()).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn direction_table_lines() {
        let g = direction_grid(2, 0, 1.0).unwrap();
        let t = g.to_table();
        assert_eq!(t.lines().count(), 7);
        assert!(t.starts_with("0 1.0"));
    }

    proptest! {
        #[test]
        fn radial_partition_of_unity(frac in 0.0f64..=1.0, top in 0u32..11) {
            let norm = frac * (top as f64).exp2();
            let s: f64 = (0..=top).map(|j| lp_weight(j, norm)).sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn lp_weight_support(norm in 0.0f64..4096.0, j in 1u32..11) {
            let lo = (j as f64 - 1.0).exp2();
            let hi = (j as f64 + 1.0).exp2();
            if norm < lo || norm > hi {
                prop_assert_eq!(lp_weight(j, norm), 0.0);
            }
            let w = lp_weight(j, norm);
            prop_assert!((0.0..=1.0).contains(&w));
        }

        #[test]
        fn angular_weight_vanishes_outside_cone(a in 0.0f64..6.3, j in 0u32..9, nu_seed in 0usize..1000) {
            let g = direction_grid(2, j, 1.0).unwrap();
            let nu = nu_seed % g.len();
            let xi = [a.cos(), a.sin()];
            if !g.in_cone(nu, &xi).unwrap() {
                prop_assert_eq!(g.angular_weight(nu, &xi).unwrap(), 0.0);
            }
        }
    }
}
