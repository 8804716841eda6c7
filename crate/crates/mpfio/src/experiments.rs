//! Experiment registry: per-experiment knobs, validation and execution.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use mpfio_core::atom::{make_tensor_atom, validate_atom, Profile};
use mpfio_core::decomp::{direction_grid, lp_weight, DyadicPartition};
use mpfio_core::evaluator::*;
use mpfio_core::lattice::{Exponent, FactorSet, LatticeGrid, ProductSpace, SampledField};
use mpfio_core::phase::{check_homogeneity, check_nondegeneracy, FactorPhase, PhaseSpec};
use mpfio_core::symbol::{check_order, SymbolSpec};
use mpfio_core::verify::*;
use mpfio_core::{Error, Result};

use crate::config::{ConfigError, LoadedConfig};

/// Registered experiment kinds in listing order.
pub const KINDS: &[(&str, &str)] = &[
    ("partition_identity", "dyadic and angular partitions of unity on random frequencies"),
    ("atom_validity", "size, support and cancellation of randomized rectangle atoms"),
    ("identity_oracle", "identity and grid-shift translation reproduce band-limited inputs"),
    ("decomposition_consistency", "dyadic pieces sum to T and sector pieces sum to each level"),
    ("factorized_check", "factorized path against the direct sum on random specs, with speedup"),
    ("l2_norm", "Krylov estimate of the L2 operator norm, dense oracle and refinement drift"),
    ("region_measure", "measure of the region of influence relative to the atom side"),
    ("majorization_sweep", "per-level mixed norms off the region of influence and their decay rate"),
    ("h1l1_sweep", "L1 norms of T applied to shrinking atoms and their growth rate"),
    ("sector_localization", "mass of a sector piece outside dilated influence rectangles"),
    ("bessel_decay", "radial decay exponent of the Bessel-potential kernel"),
    ("psi_bound_sweep", "sector maxima and difference quotients of the phase remainder"),
    ("symbol_order", "finite-difference symbol-class constants per dyadic level"),
    ("phase_check", "homogeneity and mixed-Hessian nondegeneracy of the phase"),
    ("evaluator_bench", "wall time of two evaluation paths on one input"),
];

pub fn describe(kind: &str) -> Option<&'static str> {
    KINDS.iter().find(|(k, _)| *k == kind).map(|(_, d)| *d)
}

/// Per-kind knobs with their defaults filled in.
#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum Knobs {
    Partition(PartitionKnobs),
    Atoms(AtomKnobs),
    Oracle(OracleKnobs),
    Decomposition(DecompositionKnobs),
    Factorized(FactorizedKnobs),
    Norm(NormKnobs),
    Region(RegionKnobs),
    Majorization(MajorizationKnobs),
    H1L1(H1L1Knobs),
    Localization(LocalizationKnobs),
    Bessel(BesselKnobs),
    Psi(PsiKnobs),
    Order(OrderKnobs),
    Phase(PhaseKnobs),
    Bench(BenchKnobs),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionKnobs {
    pub samples: usize,
    pub top: u32,
    pub max_level: u32,
    pub tolerance: f64,
}

impl Default for PartitionKnobs {
    fn default() -> Self {
        Self { samples: 10_000, top: 10, max_level: 8, tolerance: 1e-12 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AtomKnobs {
    pub count: usize,
}

impl Default for AtomKnobs {
    fn default() -> Self {
        Self { count: 100 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleKnobs {
    pub inputs: u64,
    pub band: Option<f64>,
    /// Translation by this many cells along every axis.
    pub shift_cells: i64,
    pub tolerance: f64,
}

impl Default for OracleKnobs {
    fn default() -> Self {
        Self { inputs: 3, band: None, shift_cells: 3, tolerance: 1e-10 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecompositionKnobs {
    pub inputs: u64,
    pub band: Option<f64>,
    pub top: Option<Vec<u32>>,
    /// Highest level whose sectors are summed; all levels when absent.
    pub sector_levels: Option<u32>,
    pub tolerance: f64,
}

impl Default for DecompositionKnobs {
    fn default() -> Self {
        Self { inputs: 10, band: None, top: None, sector_levels: None, tolerance: 1e-10 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FactorizedKnobs {
    pub specs: u64,
    pub tolerance: f64,
    pub bench_points: usize,
    pub min_speedup: f64,
}

impl Default for FactorizedKnobs {
    fn default() -> Self {
        Self { specs: 20, tolerance: 1e-10, bench_points: 64, min_speedup: 4.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormKnobs {
    pub iterations: usize,
    pub expected: Option<f64>,
    pub tolerance: f64,
    pub top: Option<Vec<u32>>,
    /// Number of point-doublings for the refinement check.
    pub refinements: u32,
    pub max_drift: f64,
}

impl Default for NormKnobs {
    fn default() -> Self {
        Self { iterations: 200, expected: None, tolerance: 1e-8, top: None, refinements: 0, max_drift: 1.5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionKnobs {
    pub factor: usize,
    pub influence_c: f64,
    pub top: Option<u32>,
    pub ks: Vec<u32>,
}

impl Default for RegionKnobs {
    fn default() -> Self {
        Self { factor: 0, influence_c: mpfio_core::region::DEFAULT_C, top: None, ks: vec![1, 2, 3, 4, 5] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MajorizationKnobs {
    /// Factors in `I`; every factor with side below 1 when absent.
    pub outer: Option<Vec<usize>>,
    /// Factors in `I₁` (levels above the atom scale); `I` when absent.
    pub i1: Option<Vec<usize>>,
    pub max_offset: u32,
    pub influence_c: f64,
    pub top: Option<Vec<u32>>,
    pub max_slope: f64,
}

impl Default for MajorizationKnobs {
    fn default() -> Self {
        Self { outer: None, i1: None, max_offset: 5, influence_c: mpfio_core::region::DEFAULT_C, top: None, max_slope: -0.8 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct H1L1Knobs {
    pub ks: Vec<u32>,
    pub order: Option<Vec<f64>>,
    /// Run one single-factor operator per factor and multiply the norms.
    pub tensor: bool,
    pub defect_limit: f64,
    pub top: Option<Vec<u32>>,
}

impl Default for H1L1Knobs {
    fn default() -> Self {
        Self { ks: (0..=5).collect(), order: None, tensor: false, defect_limit: H1L1_DEFECT_LIMIT, top: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalizationKnobs {
    pub level: u32,
    pub nu: usize,
    pub lambdas: Vec<f64>,
    pub max_fraction: f64,
    pub top: Option<u32>,
}

impl Default for LocalizationKnobs {
    fn default() -> Self {
        Self { level: 5, nu: 0, lambdas: vec![1.0, 2.0, 4.0, 8.0], max_fraction: 0.05, top: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BesselKnobs {
    pub n: usize,
    pub exponent: Option<f64>,
    pub points: Option<usize>,
    pub extent: Option<f64>,
    pub top: Option<u32>,
}

impl Default for BesselKnobs {
    fn default() -> Self {
        Self { n: 2, exponent: None, points: None, extent: None, top: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsiKnobs {
    pub factor: usize,
    pub levels: Vec<u32>,
    pub samples: usize,
}

impl Default for PsiKnobs {
    fn default() -> Self {
        Self { factor: 0, levels: (2..=8).collect(), samples: 16 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OrderKnobs {
    pub samples: usize,
}

impl Default for OrderKnobs {
    fn default() -> Self {
        Self { samples: 64 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseKnobs {
    pub samples: usize,
    pub scales: Vec<f64>,
    pub level: u32,
    pub min_det: f64,
    pub tolerance: f64,
}

impl Default for PhaseKnobs {
    fn default() -> Self {
        Self { samples: 200, scales: vec![0.5, 2.0, 10.0], level: 4, min_det: 0.1, tolerance: 1e-10 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchKnobs {
    pub band: Option<f64>,
    pub reference: String,
    pub fast: String,
}

impl Default for BenchKnobs {
    fn default() -> Self {
        Self { band: None, reference: "direct".into(), fast: "auto".into() }
    }
}

/// One validated experiment ready to run.
#[derive(Debug, Clone)]
pub struct Planned {
    pub id: String,
    pub kind: String,
    pub knobs: Knobs,
}

fn knobs<T: DeserializeOwned>(cfg: &LoadedConfig, section: &str, table: toml::Table) -> std::result::Result<T, ConfigError> {
    toml::Value::Table(table).try_into::<T>().map_err(|e| cfg.error(section, "", e.message().to_string()))
}

fn parse_method(name: &str) -> Option<Method> {
    match name {
        "direct" => Some(Method::Direct),
        "factorized" => Some(Method::Factorized),
        "spectral" => Some(Method::Spectral),
        "auto" => Some(Method::Auto),
        _ => None,
    }
}

/// Parses and validates every `[experiments.<id>]` table, in id order.
pub fn plan_all(cfg: &LoadedConfig) -> std::result::Result<Vec<Planned>, ConfigError> {
    // The base operator must build for any experiment that uses it.
    let grid = cfg.grid()?;
    cfg.phase()?;
    cfg.symbol()?;
    cfg.sector_scale()?;
    let mut out = Vec::new();
    for (id, table) in &cfg.config.experiments {
        out.push(plan(cfg, &grid, id, table.clone())?);
    }
    Ok(out)
}

fn check_levels(
    cfg: &LoadedConfig,
    section: &str,
    grid: &LatticeGrid,
    top: &Option<Vec<u32>>,
) -> std::result::Result<(), ConfigError> {
    if let Some(t) = top {
        let d = grid.space().d();
        if t.len() != d {
            return Err(cfg.error(section, "top", format!("{} entries for d = {d}", t.len())));
        }
        for (i, &j) in t.iter().enumerate() {
            let max = max_level(grid, i).map_err(|e| cfg.error(section, "top", e.to_string()))?;
            if j > max {
                return Err(cfg.error(section, "top", format!("factor {i}: level {j} exceeds {max} for this grid")));
            }
        }
    }
    Ok(())
}

fn plan(cfg: &LoadedConfig, grid: &LatticeGrid, id: &str, mut table: toml::Table) -> std::result::Result<Planned, ConfigError> {
    let section = format!("experiments.{id}");
    let kind = match table.remove("kind") {
        Some(toml::Value::String(k)) => k,
        Some(_) => return Err(cfg.error(&section, "kind", "must be a string")),
        None => id.to_string(),
    };
    if describe(&kind).is_none() {
        let key = if cfg.source.contains("kind") { "kind" } else { "" };
        return Err(cfg.error(&section, key, format!("unknown experiment kind '{kind}'; see list-experiments")));
    }
    let space = grid.space();
    let d = space.d();
    let factor_check = |i: usize| -> std::result::Result<(), ConfigError> {
        if i >= d {
            Err(cfg.error(&section, "factor", format!("factor {i} out of range for d = {d}")))
        } else {
            Ok(())
        }
    };
    let k = match kind.as_str() {
        "partition_identity" => Knobs::Partition(knobs(cfg, &section, table)?),
        "atom_validity" => Knobs::Atoms(knobs(cfg, &section, table)?),
        "identity_oracle" => {
            let k: OracleKnobs = knobs(cfg, &section, table)?;
            let h = grid.spacing(0);
            if (0..grid.n()).any(|a| (grid.spacing(a) - h).abs() > 1e-12 * h) {
                return Err(cfg.error("grid", "", "identity_oracle shifts by whole cells and needs equal spacing on every axis"));
            }
            Knobs::Oracle(k)
        }
        "decomposition_consistency" => {
            let k: DecompositionKnobs = knobs(cfg, &section, table)?;
            check_levels(cfg, &section, grid, &k.top)?;
            Knobs::Decomposition(k)
        }
        "factorized_check" => {
            let k: FactorizedKnobs = knobs(cfg, &section, table)?;
            if k.bench_points < 16 || k.bench_points % 2 != 0 {
                return Err(cfg.error(&section, "bench_points", "must be even and at least 16"));
            }
            Knobs::Factorized(k)
        }
        "l2_norm" => {
            let k: NormKnobs = knobs(cfg, &section, table)?;
            if k.iterations < 20 {
                return Err(cfg.error(&section, "iterations", "at least 20 iterations are needed"));
            }
            check_levels(cfg, &section, grid, &k.top)?;
            Knobs::Norm(k)
        }
        "region_measure" => {
            let k: RegionKnobs = knobs(cfg, &section, table)?;
            factor_check(k.factor)?;
            Knobs::Region(k)
        }
        "majorization_sweep" => {
            let k: MajorizationKnobs = knobs(cfg, &section, table)?;
            check_levels(cfg, &section, grid, &k.top)?;
            let a = cfg.atom_section(&format!("experiment '{id}'"))?;
            if a.radii.len() != d {
                return Err(cfg.error("atom", "radii", format!("{} entries for d = {d}", a.radii.len())));
            }
            for i in k.outer.iter().chain(k.i1.iter()).flatten() {
                factor_check(*i)?;
            }
            Knobs::Majorization(k)
        }
        "h1l1_sweep" => {
            let k: H1L1Knobs = knobs(cfg, &section, table)?;
            if let Some(o) = &k.order {
                if o.len() != d {
                    return Err(cfg.error(&section, "order", format!("{} entries for d = {d}", o.len())));
                }
            }
            check_levels(cfg, &section, grid, &k.top)?;
            if k.ks.len() < MIN_FIT_POINTS {
                return Err(cfg.error(&section, "ks", format!("at least {MIN_FIT_POINTS} sizes are needed for a fit")));
            }
            Knobs::H1L1(k)
        }
        "sector_localization" => {
            let k: LocalizationKnobs = knobs(cfg, &section, table)?;
            if d != 1 {
                return Err(cfg.error("space", "dims", "sector_localization runs on a single factor"));
            }
            if k.level < 2 {
                return Err(cfg.error(&section, "level", "level must be at least 2"));
            }
            Knobs::Localization(k)
        }
        "bessel_decay" => {
            let k: BesselKnobs = knobs(cfg, &section, table)?;
            if !(2..=3).contains(&k.n) {
                return Err(cfg.error(&section, "n", "n must be 2 or 3"));
            }
            Knobs::Bessel(k)
        }
        "psi_bound_sweep" => {
            let k: PsiKnobs = knobs(cfg, &section, table)?;
            factor_check(k.factor)?;
            Knobs::Psi(k)
        }
        "symbol_order" => Knobs::Order(knobs(cfg, &section, table)?),
        "phase_check" => Knobs::Phase(knobs(cfg, &section, table)?),
        "evaluator_bench" => {
            let k: BenchKnobs = knobs(cfg, &section, table)?;
            for (key, name) in [("reference", &k.reference), ("fast", &k.fast)] {
                if parse_method(name).is_none() {
                    return Err(cfg.error(&section, key, format!("unknown method '{name}' (direct, factorized, spectral, auto)")));
                }
            }
            Knobs::Bench(k)
        }
        _ => unreachable!("kind checked above"),
    };
    Ok(Planned { id: id.to_string(), kind, knobs: k })
}

fn cfg_err(e: ConfigError) -> Error {
    Error::InvalidSpace(e.to_string())
}

/// Report parameters: the experiment's knobs plus the configured problem.
pub fn params(cfg: &LoadedConfig, p: &Planned, seed: u64) -> Value {
    let c = &cfg.config;
    json!({
        "kind": p.kind,
        "knobs": p.knobs,
        "space": c.space,
        "grid": c.grid,
        "phase": c.phase,
        "symbol": c.symbol,
        "atom": c.atom,
        "decomp": c.decomp,
        "seed": seed,
    })
}

fn default_band(grid: &LatticeGrid) -> Result<f64> {
    let top = (0..grid.space().d()).map(|i| max_level(grid, i)).collect::<Result<Vec<_>>>()?;
    Ok(0.5 * (*top.iter().min().expect("d ≥ 1") as f64).exp2())
}

fn rel(a: &SampledField, b: &SampledField) -> Result<f64> {
    let d = a.sub(b)?.lp_norm(Exponent::Two)?;
    Ok(d / b.lp_norm(Exponent::Two)?.max(f64::MIN_POSITIVE))
}

const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Runs one planned experiment.
pub fn run(cfg: &LoadedConfig, p: &Planned, seed: u64) -> Result<ExperimentReport> {
    let params = params(cfg, p, seed);
    let id = p.id.as_str();
    let grid = || cfg.grid().map_err(cfg_err);
    let base_op = |top: &Option<Vec<u32>>| -> Result<OperatorSpec> {
        cfg.operator(cfg.symbol().map_err(cfg_err)?, grid()?, top.clone(), &format!("experiments.{id}")).map_err(cfg_err)
    };
    match &p.knobs {
        Knobs::Partition(k) => partition_identity(id, params, k, cfg.sector_scale().map_err(cfg_err)?, seed),
        Knobs::Atoms(k) => {
            let offset = cfg.config.atom.as_ref().map_or(0, |a| a.seed);
            atom_validity(id, params, k, seed.wrapping_add(offset))
        }
        Knobs::Oracle(k) => identity_oracle(id, params, k, &grid()?, seed),
        Knobs::Decomposition(k) => decomposition_consistency(id, params, k, &base_op(&k.top)?, seed),
        Knobs::Factorized(k) => factorized_check(id, params, k, seed),
        Knobs::Norm(k) => l2_norm(cfg, id, params, k, seed),
        Knobs::Region(k) => {
            let g = grid()?;
            let space = g.space().clone();
            let center = cfg.center().map_err(cfg_err)?;
            let top = match k.top {
                Some(t) => t,
                None => max_level(&g, k.factor)?,
            };
            let res = region_measure(
                &cfg.phase().map_err(cfg_err)?,
                &g.factor_grid(k.factor),
                k.factor,
                &center[space.factor_axes(k.factor)],
                k.influence_c,
                top,
                &k.ks,
            )?;
            Ok(res.report(id, params))
        }
        Knobs::Majorization(k) => {
            let op = base_op(&k.top)?;
            let atom = cfg.atom(&op.grid).map_err(cfg_err)?;
            let outer = match &k.outer {
                Some(o) => FactorSet::from_indices(o.iter().copied()),
                None => FactorSet::from_indices((0..op.d()).filter(|&i| atom.radii[i] < 1.0)),
            };
            let i1 = k.i1.as_ref().map(|v| FactorSet::from_indices(v.iter().copied())).unwrap_or(outer);
            let res = majorization_sweep(&op, &atom, outer, i1, k.max_offset, k.influence_c)?;
            let slope = (i1 == outer).then_some(k.max_slope);
            Ok(res.report(id, params, slope))
        }
        Knobs::H1L1(k) => {
            let g = grid()?;
            let factors = if k.tensor { tensor_factors(cfg, &g, k)? } else {
                let symbol = cfg.symbol_with_order(k.order.clone()).map_err(cfg_err)?;
                vec![cfg.operator(symbol, g, k.top.clone(), &format!("experiments.{id}")).map_err(cfg_err)?]
            };
            let res = h1l1_sweep(&factors, cfg.profile().map_err(cfg_err)?, &k.ks, k.defect_limit)?;
            Ok(res.report(id, params))
        }
        Knobs::Localization(k) => {
            let op = base_op(&k.top.map(|t| vec![t]))?;
            let atom = point_atom(&op.grid, &cfg.center().map_err(cfg_err)?, cfg.profile().map_err(cfg_err)?)?;
            let res = sector_localization(&op, &atom, k.level, k.nu, &k.lambdas)?;
            Ok(res.report(id, params, k.max_fraction))
        }
        Knobs::Bessel(k) => {
            let mut b = BesselParams::standard(k.n)?;
            if let Some(e) = k.exponent {
                b.exponent = e;
            }
            if let Some(pts) = k.points {
                b.points = pts;
            }
            if let Some(e) = k.extent {
                b.extent = e;
            }
            if let Some(t) = k.top {
                b.top = t;
            }
            Ok(bessel_decay(&b)?.report(id, params))
        }
        Knobs::Psi(k) => {
            let g = grid()?;
            let fg = g.factor_grid(k.factor);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs: Vec<Vec<f64>> = (0..k.samples)
                .map(|_| (0..fg.n()).map(|a| 0.9 * rng.gen_range(-fg.extent(a)..fg.extent(a))).collect())
                .collect();
            let res = psi_bound_sweep(&cfg.phase().map_err(cfg_err)?, k.factor, &k.levels, &xs)?;
            Ok(res.report(id, params))
        }
        Knobs::Order(k) => {
            let rep = check_order(&cfg.symbol().map_err(cfg_err)?, k.samples, seed)?;
            let mut r = ExperimentReport::new(id, params);
            let mut t = Table::new("constants", &["alpha", "beta", "constant", "drift", "pass"]);
            for e in &rep.entries {
                let idx = |v: &[usize]| v.iter().map(|a| a.to_string()).collect::<Vec<_>>().join("");
                t.push([idx(&e.alpha), idx(&e.beta), format!("{:e}", e.constant), format!("{:e}", e.drift), e.pass.to_string()]);
            }
            r.tables.push(t);
            r.scalar("max_drift", rep.entries.iter().map(|e| e.drift).fold(0.0, f64::max));
            r.check("order", rep.pass);
            Ok(r)
        }
        Knobs::Phase(k) => {
            let g = grid()?;
            let phase = cfg.phase().map_err(cfg_err)?;
            let homog = check_homogeneity(&phase, &g, k.samples, &k.scales, seed);
            let nd = check_nondegeneracy(&phase, &g, k.level, None)?;
            let mut r = ExperimentReport::new(id, params);
            r.scalar("homogeneity_defect", homog);
            r.scalar("min_abs_det", nd.min_abs_det);
            r.check("homogeneous", homog <= k.tolerance);
            r.check("nondegenerate", nd.passes(k.min_det));
            Ok(r)
        }
        Knobs::Bench(k) => {
            let op = base_op(&None)?;
            let band = match k.band {
                Some(b) => b,
                None => default_band(&op.grid)?,
            };
            let f = band_limited_field(&op.grid, band, seed)?;
            let reference = parse_method(&k.reference).expect("validated");
            let fast = parse_method(&k.fast).expect("validated");
            Ok(compare_methods(&op, &f, reference, fast)?.report(id, params))
        }
    }
}

fn partition_identity(id: &str, params: Value, k: &PartitionKnobs, scale: f64, seed: u64) -> Result<ExperimentReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let part = DyadicPartition::new(k.top);
    let radius = (k.top as f64).exp2();
    let mut dyadic: f64 = 0.0;
    for _ in 0..k.samples {
        let r = rng.gen_range(0.0..=radius);
        let s: f64 = (0..=k.top).map(|j| lp_weight(j, r)).sum();
        dyadic = dyadic.max((s - 1.0).abs()).max((part.total(r) - 1.0).abs());
    }
    // Angular sums, split evenly over dimensions 1..3 and levels 0..=max.
    let mut angular: f64 = 0.0;
    let combos: Vec<(usize, u32)> = (1..=3).flat_map(|n| (0..=k.max_level).map(move |j| (n, j))).collect();
    let per = k.samples.div_ceil(combos.len());
    for &(n, j) in &combos {
        let g = direction_grid(n, j, scale)?;
        for _ in 0..per {
            let xi: Vec<f64> = loop {
                let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-radius..radius)).collect();
                if v.iter().any(|&t| t != 0.0) {
                    break v;
                }
            };
            let s: f64 = g.weights(&xi)?.iter().map(|(_, w)| w).sum();
            angular = angular.max((s - 1.0).abs());
        }
    }
    let mut r = ExperimentReport::new(id, params);
    r.scalar("dyadic_defect", dyadic);
    r.scalar("angular_defect", angular);
    r.scalar("samples_per_identity", k.samples as f64);
    r.check("dyadic_sum", dyadic <= k.tolerance);
    r.check("angular_sum", angular <= k.tolerance);
    Ok(r)
}

fn atom_validity(id: &str, params: Value, k: &AtomKnobs, seed: u64) -> Result<ExperimentReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let profiles = [Profile::OddBump, Profile::TwoHump, Profile::TensorOdd];
    let (mut failures, mut worst_l2, mut worst_cancel, mut worst_support) = (0usize, 0.0f64, 0.0f64, 0.0f64);
    let mut t = Table::new("atoms", &["case", "dims", "radii", "profile", "l2_ratio", "cancel_defect", "valid"]);
    for case in 0..k.count {
        let d = rng.gen_range(1..=2usize);
        let dims: Vec<usize> = (0..d).map(|_| rng.gen_range(1..=2usize)).collect();
        let space = ProductSpace::new(&dims)?;
        let points = if space.n() >= 3 { 20 } else { 64 };
        let grid = LatticeGrid::uniform(space.clone(), 1.0, points)?;
        let radii: Vec<f64> = (0..d).map(|_| rng.gen_range(0.4..0.9)).collect();
        let center: Vec<f64> = (0..space.n()).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let profile = profiles[rng.gen_range(0..profiles.len())];
        let atom = make_tensor_atom(&grid, &center, &radii, profile)?;
        let rep = validate_atom(&atom)?;
        let ratio = rep.l2_norm / rep.l2_bound;
        let cancel = rep.cancel_defect.iter().copied().fold(0.0, f64::max);
        worst_l2 = worst_l2.max(ratio);
        worst_cancel = worst_cancel.max(cancel);
        worst_support = worst_support.max(rep.support_defect);
        if !rep.all_ok() {
            failures += 1;
        }
        let join = |v: Vec<String>| v.join("x");
        t.push([
            case.to_string(),
            join(dims.iter().map(|n| n.to_string()).collect()),
            join(radii.iter().map(|r| format!("{r:.6}")).collect()),
            profile.name().to_string(),
            format!("{ratio:e}"),
            format!("{cancel:e}"),
            rep.all_ok().to_string(),
        ]);
    }
    let mut r = ExperimentReport::new(id, params);
    r.tables.push(t);
    r.scalar("atoms", k.count as f64);
    r.scalar("failures", failures as f64);
    r.scalar("max_l2_ratio", worst_l2);
    r.scalar("max_cancel_defect", worst_cancel);
    r.scalar("max_support_defect", worst_support);
    r.check("all_valid", failures == 0);
    Ok(r)
}

/// `f` rolled by `cells` nodes along every axis: `g(x) = f(x + cells·h)`.
fn rolled(f: &SampledField, cells: i64) -> Result<SampledField> {
    let grid = f.grid();
    let strides = grid.strides();
    let mut idx = vec![0usize; grid.n()];
    let values = (0..grid.node_count())
        .map(|node| {
            grid.multi_index(node, &mut idx);
            let src: usize = idx
                .iter()
                .enumerate()
                .map(|(a, &m)| {
                    let p = grid.points(a) as i64;
                    (((m as i64 + cells) % p + p) % p) as usize * strides[a]
                })
                .sum();
            f.values()[src]
        })
        .collect();
    SampledField::new(grid.clone(), values)
}

fn identity_oracle(id: &str, params: Value, k: &OracleKnobs, grid: &LatticeGrid, seed: u64) -> Result<ExperimentReport> {
    let space = grid.space().clone();
    let levels = (0..space.d()).map(|i| max_level(grid, i)).collect::<Result<Vec<_>>>()?;
    let band = match k.band {
        Some(b) => b,
        None => default_band(grid)?,
    };
    let ident = OperatorSpec::new(SymbolSpec::unit(space.clone()), PhaseSpec::identity(space.clone()), grid.clone(), levels.clone())?;
    let a = k.shift_cells as f64 * grid.spacing(0);
    let shift = OperatorSpec::new(SymbolSpec::unit(space.clone()), PhaseSpec::translation(space, a)?, grid.clone(), levels)?;
    let direct_too = grid.node_count() <= 4096;
    let (mut e_id, mut e_tr) = (0.0f64, 0.0f64);
    for s in 0..k.inputs {
        let f = band_limited_field(grid, band, seed.wrapping_add(s))?;
        let sel = Selection::full(grid.space().d());
        let expected = rolled(&f, k.shift_cells)?;
        for m in [Method::Auto, Method::Direct] {
            if m == Method::Direct && !direct_too {
                continue;
            }
            e_id = e_id.max(rel(&apply_selected(&ident, &f, &sel, m)?, &f)?);
            e_tr = e_tr.max(rel(&apply_selected(&shift, &f, &sel, m)?, &expected)?);
        }
    }
    let mut r = ExperimentReport::new(id, params);
    r.scalar("band", band);
    r.scalar("shift", a);
    r.scalar("identity_error", e_id);
    r.scalar("translation_error", e_tr);
    r.check("identity", e_id <= k.tolerance);
    r.check("translation", e_tr <= k.tolerance);
    Ok(r)
}

fn decomposition_consistency(id: &str, params: Value, k: &DecompositionKnobs, op: &OperatorSpec, seed: u64) -> Result<ExperimentReport> {
    let band = match k.band {
        Some(b) => b,
        None => default_band(&op.grid)?,
    };
    let d = op.d();
    let (mut e_level, mut e_sector) = (0.0f64, 0.0f64);
    let mut pieces = 0usize;
    for s in 0..k.inputs {
        let f = band_limited_field(&op.grid, band, seed.wrapping_add(s))?;
        let full = apply_selected(op, &f, &Selection::full(d), Method::Auto)?;
        for i in 0..d {
            let mut sum = SampledField::zeros(op.grid.clone());
            for j in 0..=op.levels[i] {
                let tj = apply_partial(op, &f, &[(i, j)])?;
                if j <= k.sector_levels.unwrap_or(u32::MAX) {
                    let mut ss = SampledField::zeros(op.grid.clone());
                    for nu in 0..op.angular_grid(i, j)?.len() {
                        ss = ss.combine(ONE, &apply_sector(op, &f, &[(i, j, nu)])?, ONE)?;
                        pieces += 1;
                    }
                    e_sector = e_sector.max(rel(&ss, &tj)?);
                }
                sum = sum.combine(ONE, &tj, ONE)?;
            }
            e_level = e_level.max(rel(&sum, &full)?);
        }
    }
    let mut r = ExperimentReport::new(id, params);
    r.scalar("band", band);
    r.scalar("level_sum_error", e_level);
    r.scalar("sector_sum_error", e_sector);
    r.scalar("sector_pieces", pieces as f64);
    r.check("levels_sum_to_operator", e_level <= k.tolerance);
    r.check("sectors_sum_to_level", e_sector <= k.tolerance);
    Ok(r)
}

fn random_phase(rng: &mut ChaCha8Rng) -> FactorPhase {
    match rng.gen_range(0..4) {
        0 => FactorPhase::Identity,
        1 => FactorPhase::Translation { a: rng.gen_range(-0.5..0.5) },
        2 => FactorPhase::Halfwave,
        _ => FactorPhase::Perturbed { eps: rng.gen_range(0.02..0.2) },
    }
}

fn random_symbol(space: &ProductSpace, rng: &mut ChaCha8Rng) -> Result<SymbolSpec> {
    let radius = rng.gen_range(0.6..1.5);
    match rng.gen_range(0..4) {
        0 => SymbolSpec::critical_order(space.clone(), radius),
        1 => SymbolSpec::bump_const(space.clone(), radius),
        2 => SymbolSpec::rough_rho(space.clone(), rng.gen_range(0.5..1.0), radius),
        _ => {
            let m = (0..space.d()).map(|_| rng.gen_range(-1.0..0.5)).collect();
            SymbolSpec::bessel_power(space.clone(), m, Some(radius))
        }
    }
}

/// Random factorizable operator on dims `(1,1)` (even `case`) or `(2,1)`.
pub fn random_factorizable_spec(case: u64, rng: &mut ChaCha8Rng) -> Result<OperatorSpec> {
    let (dims, points): (Vec<usize>, Vec<usize>) =
        if case % 2 == 0 { (vec![1, 1], vec![32, 24]) } else { (vec![2, 1], vec![16, 12, 24]) };
    let space = ProductSpace::new(&dims)?;
    let extent: Vec<f64> = points.iter().map(|_| rng.gen_range(0.8..1.4)).collect();
    let grid = LatticeGrid::make(space.clone(), &extent, &points)?;
    let phase = PhaseSpec::new(space.clone(), (0..2).map(|_| random_phase(rng)).collect())?;
    let symbol = random_symbol(&space, rng)?;
    let levels = (0..2).map(|i| Ok(rng.gen_range(0..=max_level(&grid, i)?))).collect::<Result<Vec<u32>>>()?;
    OperatorSpec::new(symbol, phase, grid, levels)
}

fn factorized_check(id: &str, params: Value, k: &FactorizedKnobs, seed: u64) -> Result<ExperimentReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut t = Table::new("specs", &["case", "dims", "phase", "symbol", "levels", "relative_difference"]);
    for case in 0..k.specs {
        let op = random_factorizable_spec(case, &mut rng)?;
        let f = band_limited_field(&op.grid, 1.5, seed.wrapping_add(case))?;
        let e = rel(&apply_factorized(&op, &f)?, &apply(&op, &f)?)?;
        worst = worst.max(e);
        let dims = op.grid.space().dims().iter().map(|n| n.to_string()).collect::<Vec<_>>().join("x");
        let levels = op.levels.iter().map(|j| j.to_string()).collect::<Vec<_>>().join("x");
        t.push([case.to_string(), dims, op.phase.name(), op.symbol.tag().to_string(), levels, format!("{e:e}")]);
    }
    // Timing on a (1,1) grid with `bench_points` per axis.
    let space = ProductSpace::new(&[1, 1])?;
    let grid = LatticeGrid::uniform(space.clone(), 1.0, k.bench_points)?;
    let levels = (0..2).map(|i| max_level(&grid, i)).collect::<Result<Vec<_>>>()?;
    let op = OperatorSpec::new(SymbolSpec::critical_order(space.clone(), 1.2)?, PhaseSpec::halfwave(space), grid.clone(), levels)?;
    let f = band_limited_field(&grid, default_band(&grid)?, seed)?;
    let bench = compare_methods(&op, &f, Method::Direct, Method::Factorized)?;
    let mut r = bench.report(id, params);
    r.tables.push(t);
    r.scalar("specs", k.specs as f64);
    r.scalar("max_relative_difference", worst);
    r.check("specs_agree", worst <= k.tolerance);
    r.check("speedup", bench.speedup >= k.min_speedup);
    Ok(r)
}

fn l2_norm(cfg: &LoadedConfig, id: &str, params: Value, k: &NormKnobs, seed: u64) -> Result<ExperimentReport> {
    let grid = cfg.grid().map_err(cfg_err)?;
    let symbol = cfg.symbol().map_err(cfg_err)?;
    let section = format!("experiments.{id}");
    let op = cfg.operator(symbol.clone(), grid.clone(), k.top.clone(), &section).map_err(cfg_err)?;
    let sel = Selection::full(op.d());
    let est = l2_norm_estimate(&op, &sel, k.iterations, seed)?;
    let mut r = est.report(id, params, k.expected, k.tolerance);
    if k.refinements > 0 {
        let mut norms = vec![est.norm];
        let mut t = Table::new("refinement", &["points", "norm", "iterations"]);
        t.push([grid.point_counts().iter().map(|p| p.to_string()).collect::<Vec<_>>().join("x"), format!("{:e}", est.norm), est.iterations.to_string()]);
        for s in 1..=k.refinements {
            let points: Vec<usize> = grid.point_counts().iter().map(|p| p << s).collect();
            let g = LatticeGrid::make(grid.space().clone(), grid.extents(), &points)?;
            let op = cfg.operator(symbol.clone(), g, k.top.clone(), &section).map_err(cfg_err)?;
            let e = l2_norm_estimate(&op, &sel, k.iterations, seed)?;
            t.push([points.iter().map(|p| p.to_string()).collect::<Vec<_>>().join("x"), format!("{:e}", e.norm), e.iterations.to_string()]);
            norms.push(e.norm);
        }
        let max = norms.iter().copied().fold(0.0, f64::max);
        let min = norms.iter().copied().fold(f64::INFINITY, f64::min);
        let drift = max / min;
        r.tables.push(t);
        r.scalar("refinement_drift", drift);
        r.check("refinement_stable", drift <= k.max_drift);
    }
    Ok(r)
}

/// One single-factor operator per factor of the configured space.
fn tensor_factors(cfg: &LoadedConfig, grid: &LatticeGrid, k: &H1L1Knobs) -> Result<Vec<OperatorSpec>> {
    let space = grid.space();
    let phase = cfg.phase().map_err(cfg_err)?;
    (0..space.d())
        .map(|i| {
            let sub = ProductSpace::new(&[space.dim(i)])?;
            let fg = grid.factor_grid(i);
            let fg = LatticeGrid::make(sub.clone(), fg.extents(), fg.point_counts())?;
            let order = k.order.as_ref().map(|o| vec![o[i]]);
            let symbol = cfg.symbol_on(sub.clone(), order).map_err(cfg_err)?;
            let ph = PhaseSpec::new(sub, vec![phase.factor(i).clone()])?;
            let level = match &k.top {
                Some(t) => t[i],
                None => max_level(&fg, 0)?,
            };
            OperatorSpec::new(symbol, ph, fg, vec![level])?.with_sector_scale(cfg.sector_scale().map_err(cfg_err)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(extra: &str) -> LoadedConfig {
        LoadedConfig::parse(&format!("[space]\ndims = [1, 1]\n[grid]\nextent = 1.0\npoints = 16\n{extra}")).unwrap()
    }

    #[test]
    fn registry_is_unique_and_described() {
        let mut names: Vec<&str> = KINDS.iter().map(|k| k.0).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), KINDS.len());
        assert!(KINDS.len() >= 6);
        assert!(describe("h1l1_sweep").is_some());
        assert!(describe("nope").is_none());
    }

    #[test]
    fn kind_defaults_to_the_id() {
        let c = cfg("[experiments.l2_norm]\n[experiments.extra]\nkind = \"l2_norm\"\niterations = 30\n");
        let p = plan_all(&c).unwrap();
        assert_eq!(p.len(), 2);
        assert!(p.iter().all(|p| p.kind == "l2_norm"));
        match &p[0].knobs {
            Knobs::Norm(k) => assert_eq!(k.iterations, 30),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_experiments_name_their_section() {
        for (body, field) in [
            ("[experiments.bogus]\n", "experiments.bogus"),
            ("[experiments.l2_norm]\niterations = 5\n", "experiments.l2_norm.iterations"),
            ("[experiments.l2_norm]\ntop = [9, 0]\n", "experiments.l2_norm.top"),
            ("[experiments.h1l1_sweep]\nks = [0, 1]\n", "experiments.h1l1_sweep.ks"),
            ("[experiments.sector_localization]\n", "space.dims"),
            ("[experiments.evaluator_bench]\nfast = \"magic\"\n", "experiments.evaluator_bench.fast"),
            ("[experiments.region_measure]\nfactor = 2\n", "experiments.region_measure.factor"),
        ] {
            let e = plan_all(&cfg(body)).unwrap_err();
            assert_eq!(e.field, field, "{body}: {e}");
        }
    }

    #[test]
    fn majorization_requires_an_atom() {
        let e = plan_all(&cfg("[experiments.majorization_sweep]\n")).unwrap_err();
        assert!(e.field.starts_with("atom"), "{e}");
    }

    #[test]
    fn sector_spacing_scale_reaches_the_operator() {
        let e = plan_all(&cfg("[decomp]\nsector_spacing_scale = 0.0\n")).unwrap_err();
        assert_eq!(e.field, "decomp.sector_spacing_scale");
        let c = LoadedConfig::parse(
            "[space]\ndims = [2]\n[grid]\nextent = 1.0\npoints = 32\n[decomp]\nsector_spacing_scale = 2.0\n",
        )
        .unwrap();
        let op = c.operator(c.symbol().unwrap(), c.grid().unwrap(), None, "x").unwrap();
        assert_eq!(op.sector_scale, 2.0);
        assert_eq!(op.angular_grid(0, 3).unwrap().len(), direction_grid(2, 3, 2.0).unwrap().len());
    }

    #[test]
    fn rolled_field_matches_shifted_samples() {
        let grid = LatticeGrid::uniform(ProductSpace::new(&[1, 1]).unwrap(), 1.0, 8).unwrap();
        let f = SampledField::from_fn(grid.clone(), |x| Complex64::new(x[0] + 10.0 * x[1], 0.0));
        let g = rolled(&f, 3).unwrap();
        let h = grid.spacing(0);
        // Node (1, 2) reads node (4, 5).
        let node = grid.strides()[0] + 2 * grid.strides()[1];
        let expected = (grid.coord(0, 1) + 3.0 * h) + 10.0 * (grid.coord(1, 2) + 3.0 * h);
        assert!((g.values()[node].re - expected).abs() < 1e-12);
        // Wraps around: node (6, 0) reads node (1, 3).
        let node = 6 * grid.strides()[0];
        let expected = grid.coord(0, 1) + 10.0 * grid.coord(1, 3);
        assert!((g.values()[node].re - expected).abs() < 1e-12);
    }

    #[test]
    fn params_record_knobs_and_seed() {
        let c = cfg("[experiments.atom_validity]\ncount = 3\n");
        let p = &plan_all(&c).unwrap()[0];
        let v = params(&c, p, 42);
        assert_eq!(v["knobs"]["count"], 3);
        assert_eq!(v["seed"], 42);
        assert_eq!(v["kind"], "atom_validity");
    }

    #[test]
    fn random_specs_are_factorizable() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for case in 0..6 {
            let op = random_factorizable_spec(case, &mut rng).unwrap();
            assert_eq!(op.d(), 2);
            assert!(op.symbol.is_factorizable());
        }
    }
}
