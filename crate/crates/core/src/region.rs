//! Influence rectangles `R_j^ν` and regions of influence `Qᵢ`, realized as
//! node masks on a factor grid. All measures are node count × cell volume.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::Serialize;

use crate::atom::{dyadic_index, RectangleAtom};
use crate::decomp::{direction_grid, AngularGrid};
use crate::error::{Error, Result};
use crate::lattice::{mask_field, FactorSet, LatticeGrid, SampledField};
use crate::phase::{FactorPhase, PhaseSpec};

/// Default influence constant.
pub const DEFAULT_C: f64 = 4.0;

/// `R_j^ν`: the `xᵢ` with `∇_ξΦᵢ(xᵢ, ξ_j^ν)` within `C·2^{-j}` of `ȳᵢ`
/// along `ξ_j^ν` and within `C·2^{-j/2}` across it.
#[derive(Debug, Clone, Serialize)]
pub struct InfluenceRectangle {
    pub factor: usize,
    pub level: u32,
    pub nu: usize,
    pub center: Vec<f64>,
    pub direction: Vec<f64>,
    pub c: f64,
}

impl InfluenceRectangle {
    pub fn long_halfwidth(&self) -> f64 {
        self.c * (-(self.level as f64)).exp2()
    }

    pub fn transverse_halfwidth(&self) -> f64 {
        self.c * (-(self.level as f64) / 2.0).exp2()
    }

    /// Volume of the box `(2C·2^{-j})·(2C·2^{-j/2})^{n−1}` in `∇_ξΦ`
    /// coordinates.
    pub fn nominal_volume(&self) -> f64 {
        let n = self.direction.len() as i32;
        2.0 * self.long_halfwidth() * (2.0 * self.transverse_halfwidth()).powi(n - 1)
    }

    /// Membership with a caller-provided buffer for the gradient.
    pub fn contains_with(&self, phase: &FactorPhase, x: &[f64], grad: &mut [f64]) -> bool {
        phase.grad_xi(x, &self.direction, grad);
        let mut along = 0.0;
        for (k, g) in grad.iter_mut().enumerate() {
            *g = self.center[k] - *g;
            along += *g * self.direction[k];
        }
        if along.abs() > self.long_halfwidth() {
            return false;
        }
        let across: f64 = grad.iter().zip(&self.direction).map(|(g, e)| (g - along * e).powi(2)).sum();
        across.sqrt() <= self.transverse_halfwidth()
    }

    pub fn contains(&self, phase: &FactorPhase, x: &[f64]) -> bool {
        let mut grad = vec![0.0; x.len()];
        self.contains_with(phase, x, &mut grad)
    }
}

/// A node set on a factor grid.
#[derive(Debug, Clone)]
pub struct RegionMask {
    pub grid: LatticeGrid,
    pub mask: Vec<bool>,
}

impl RegionMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn volume(&self) -> f64 {
        self.count() as f64 * self.grid.cell_volume()
    }

    pub fn is_subset(&self, other: &RegionMask) -> bool {
        self.mask.iter().zip(&other.mask).all(|(a, b)| !a || *b)
    }

    pub fn union_with(&mut self, other: &RegionMask) {
        self.mask.iter_mut().zip(&other.mask).for_each(|(a, b)| *a |= b);
    }

    pub fn to_field(&self) -> Result<SampledField> {
        mask_field(&self.grid, &self.mask)
    }
}

fn node_mask<F>(grid: &LatticeGrid, pred: F) -> Vec<bool>
where
    F: Fn(&[f64], &mut [f64]) -> bool + Sync,
{
    let n = grid.n();
    (0..grid.node_count())
        .into_par_iter()
        .map_init(
            || (vec![0.0; n], vec![0.0; n]),
            |(x, g), node| {
                grid.node_coords(node, x);
                pred(x, g)
            },
        )
        .collect()
}

fn check_factor(phase: &PhaseSpec, grid: &LatticeGrid, i: usize, center: &[f64]) -> Result<()> {
    let space = phase.space();
    if i >= space.d() {
        return Err(Error::InvalidSpace(format!("factor {i} out of range for d = {}", space.d())));
    }
    if grid.n() != space.dim(i) || center.len() != space.dim(i) {
        return Err(Error::GridMismatch(format!("factor {i} has dimension {}", space.dim(i))));
    }
    Ok(())
}

/// Mask of one rectangle on a grid of factor `i`.
#[allow(clippy::too_many_arguments)]
pub fn rectangle_mask(
    phase: &PhaseSpec,
    grid: &LatticeGrid,
    i: usize,
    center: &[f64],
    level: u32,
    nu: usize,
    c: f64,
    sector_scale: f64,
) -> Result<(InfluenceRectangle, RegionMask)> {
    check_factor(phase, grid, i, center)?;
    let angular = direction_grid(grid.n(), level, sector_scale)?;
    if nu >= angular.len() {
        return Err(Error::InvalidSector { level, nu, count: angular.len() });
    }
    let rect = InfluenceRectangle {
        factor: i,
        level,
        nu,
        center: center.to_vec(),
        direction: angular.direction(nu).to_vec(),
        c,
    };
    let fp = phase.factor(i);
    let mask = node_mask(grid, |x, g| rect.contains_with(fp, x, g));
    Ok((rect, RegionMask { grid: grid.clone(), mask }))
}

/// `R_j^ν` for the atom's center, on the atom grid's factor `i`.
pub fn influence_rectangle(
    phase: &PhaseSpec,
    atom: &RectangleAtom,
    i: usize,
    level: u32,
    nu: usize,
    c: f64,
) -> Result<(InfluenceRectangle, RegionMask)> {
    rectangle_mask(phase, &atom.grid().factor_grid(i), i, atom.center_of(i), level, nu, c, 1.0)
}

/// Per-level unions `∪_ν R_j^ν` for `j = 0..=top`, from which regions
/// for any base level are assembled.
#[derive(Debug, Clone)]
pub struct LevelMasks {
    pub factor: usize,
    pub center: Vec<f64>,
    pub c: f64,
    pub top: u32,
    pub sector_counts: Vec<usize>,
    masks: Vec<RegionMask>,
}

impl LevelMasks {
    pub fn build(
        phase: &PhaseSpec,
        grid: &LatticeGrid,
        i: usize,
        center: &[f64],
        c: f64,
        top: u32,
        sector_scale: f64,
    ) -> Result<Self> {
        check_factor(phase, grid, i, center)?;
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::InvalidSpace(format!("influence constant {c} must be positive")));
        }
        let fp = phase.factor(i);
        let mut masks = Vec::new();
        let mut sector_counts = Vec::new();
        for level in 0..=top {
            let angular: AngularGrid = direction_grid(grid.n(), level, sector_scale)?;
            let rects: Vec<InfluenceRectangle> = (0..angular.len())
                .map(|nu| InfluenceRectangle {
                    factor: i,
                    level,
                    nu,
                    center: center.to_vec(),
                    direction: angular.direction(nu).to_vec(),
                    c,
                })
                .collect();
            let mask = node_mask(grid, |x, g| rects.iter().any(|r| r.contains_with(fp, x, g)));
            sector_counts.push(angular.len());
            masks.push(RegionMask { grid: grid.clone(), mask });
        }
        Ok(Self { factor: i, center: center.to_vec(), c, top, sector_counts, masks })
    }

    pub fn level(&self, j: u32) -> &RegionMask {
        &self.masks[j as usize]
    }

    /// `∪_{k ≤ j ≤ top} ∪_ν R_j^ν`.
    pub fn union_from(&self, k: u32) -> RegionMask {
        let mut out = RegionMask { grid: self.masks[0].grid.clone(), mask: vec![false; self.masks[0].mask.len()] };
        for j in k..=self.top {
            out.union_with(&self.masks[j as usize]);
        }
        out
    }

    /// Region for side length `r`, with `2^{-k} ≤ r ≤ 2^{-k+1}`.
    pub fn region(&self, r: f64) -> Result<InfluenceRegion> {
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::InvalidAtom(format!("side length {r} ≥ 1 has no region of influence")));
        }
        let k = dyadic_index(r).expect("r in (0,1)");
        if k > self.top {
            return Err(Error::LevelOutOfRange { level: k, max: self.top });
        }
        let mask = self.union_from(k);
        let volume = mask.volume();
        let n = mask.grid.n();
        let members = (k..=self.top)
            .flat_map(|j| (0..self.sector_counts[j as usize]).map(move |nu| (j, nu)))
            .collect();
        let tail = tail_bound(n, self.c, self.top);
        Ok(InfluenceRegion {
            factor: self.factor,
            base_level: k,
            top: self.top,
            c: self.c,
            radius: r,
            members,
            volume,
            ratio: volume / r,
            tail_defect: tail / r,
            mask,
        })
    }
}

/// Sector count per level divided by `2^{j(n−1)/2}` for nominal spacing.
fn sector_density(n: usize) -> f64 {
    match n {
        1 => 2.0,
        2 => 2.0 * PI,
        _ => 4.0 * PI,
    }
}

/// `Σ_{j>J} (#sectors)·|R_j^ν| = κₙ·(2C)ⁿ·2^{-J}` in `∇_ξΦ` coordinates.
pub fn tail_bound(n: usize, c: f64, top: u32) -> f64 {
    sector_density(n) * (2.0 * c).powi(n as i32) * (-(top as f64)).exp2()
}

/// `Qᵢ` truncated at level `J`.
#[derive(Debug, Clone)]
pub struct InfluenceRegion {
    pub factor: usize,
    pub base_level: u32,
    pub top: u32,
    pub c: f64,
    pub radius: f64,
    /// `(j, ν)` of every rectangle in the union.
    pub members: Vec<(u32, usize)>,
    pub volume: f64,
    /// `|Qᵢ| / rᵢ`.
    pub ratio: f64,
    /// Bound on the measure omitted by truncating at `J`, relative to `rᵢ`.
    pub tail_defect: f64,
    pub mask: RegionMask,
}

/// `Qᵢ` for the atom's factor `i`, truncated at `top`.
pub fn influence_region(phase: &PhaseSpec, atom: &RectangleAtom, i: usize, c: f64, top: u32) -> Result<InfluenceRegion> {
    let r = atom.radii[i];
    if r >= 1.0 {
        return Err(Error::InvalidAtom(format!("side length {r} ≥ 1 has no region of influence")));
    }
    LevelMasks::build(phase, &atom.grid().factor_grid(i), i, atom.center_of(i), c, top, 1.0)?.region(r)
}

/// Mask of `Q_𝓘ᶜ = ⊗_{i∈𝓘} Qᵢᶜ` over the axes of `𝓘`, in the row-major
/// order that [`crate::lattice::mixed_norm_masked`] expects.
pub fn complement_mask(regions: &[&InfluenceRegion]) -> Result<Vec<bool>> {
    let mut sorted: Vec<&InfluenceRegion> = regions.to_vec();
    sorted.sort_by_key(|q| q.factor);
    if sorted.windows(2).any(|w| w[0].factor == w[1].factor) {
        return Err(Error::Partition("one region per factor".into()));
    }
    let sizes: Vec<usize> = sorted.iter().map(|q| q.mask.mask.len()).collect();
    let total: usize = sizes.iter().product();
    let mask: Vec<bool> = (0..total)
        .into_par_iter()
        .map(|mut o| {
            let mut outside = true;
            for (q, &s) in sorted.iter().zip(&sizes).rev() {
                outside &= !q.mask.mask[o % s];
                o /= s;
            }
            outside
        })
        .collect();
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyMask);
    }
    Ok(mask)
}

/// Factors of `𝓘` that a region list covers.
pub fn region_factors(regions: &[&InfluenceRegion]) -> FactorSet {
    FactorSet::from_indices(regions.iter().map(|q| q.factor))
}
