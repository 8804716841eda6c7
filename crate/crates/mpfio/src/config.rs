//! TOML experiment configuration and its validation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mpfio_core::atom::{make_tensor_atom, Profile, RectangleAtom};
use mpfio_core::evaluator::{max_level, OperatorSpec};
use mpfio_core::lattice::{LatticeGrid, ProductSpace};
use mpfio_core::phase::{FactorPhase, PhaseSpec};
use mpfio_core::symbol::SymbolSpec;

/// A diagnostic pointing at a config field and, when it can be found, the
/// line that sets it.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: field `{}`: {}", self.field, self.message),
            None => write!(f, "field `{}`: {}", self.field, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Scalar or one value per axis.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(untagged)]
pub enum PerAxis<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> PerAxis<T> {
    pub fn expand(&self, n: usize) -> Option<Vec<T>> {
        match self {
            PerAxis::One(v) => Some(vec![v.clone(); n]),
            PerAxis::Many(v) if v.len() == n => Some(v.clone()),
            PerAxis::Many(_) => None,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSection {
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub extent: PerAxis<f64>,
    pub points: PerAxis<usize>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSection {
    /// Tag applied to every factor; `factors` lists one tag per factor.
    pub tag: Option<String>,
    pub factors: Option<Vec<String>>,
    #[serde(default = "default_shift")]
    pub shift: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_shift() -> f64 {
    0.5
}

fn default_eps() -> f64 {
    0.1
}

impl Default for PhaseSection {
    fn default() -> Self {
        Self { tag: Some("identity".into()), factors: None, shift: default_shift(), eps: default_eps() }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SymbolSection {
    pub tag: String,
    pub radius: Option<f64>,
    /// Exponents `mᵢ` for the Bessel-power family; declared order for the
    /// others.
    pub order: Option<Vec<f64>>,
    pub rho: Option<f64>,
}

impl Default for SymbolSection {
    fn default() -> Self {
        Self { tag: "unit".into(), radius: None, order: None, rho: None }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AtomSection {
    #[serde(default = "default_profile")]
    pub profile: String,
    pub radii: Vec<f64>,
    pub center: Option<Vec<f64>>,
    /// Offset for the randomized atom family, added to the run seed.
    #[serde(default)]
    pub seed: u64,
}

fn default_profile() -> String {
    "odd-bump".into()
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DecompSection {
    /// Angular spacing of the sector directions in units of `2^{-j/2}`.
    #[serde(default = "default_sector_scale")]
    pub sector_spacing_scale: f64,
}

fn default_sector_scale() -> f64 {
    1.0
}

impl Default for DecompSection {
    fn default() -> Self {
        Self { sector_spacing_scale: default_sector_scale() }
    }
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub space: SpaceSection,
    pub grid: GridSection,
    #[serde(default)]
    pub phase: PhaseSection,
    #[serde(default)]
    pub symbol: SymbolSection,
    pub atom: Option<AtomSection>,
    #[serde(default)]
    pub decomp: DecompSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub experiments: BTreeMap<String, toml::Table>,
}

/// Config text plus the parsed document, kept together so diagnostics can
/// point at lines.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub source: String,
    pub config: ExperimentConfig,
}

impl LoadedConfig {
    pub fn parse(source: &str) -> Result<Self, ConfigError> {
        let config: ExperimentConfig = toml::from_str(source).map_err(|e| {
            let line = e.span().map(|s| source[..s.start].lines().count().max(1));
            ConfigError { field: "<document>".into(), line, message: e.message().to_string() }
        })?;
        Ok(Self { source: source.to_string(), config })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let source = std::fs::read_to_string(path).map_err(|e| ConfigError {
            field: "<file>".into(),
            line: None,
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        Self::parse(&source)
    }

    /// Error for `section.key`, located in the source when possible.
    pub fn error(&self, section: &str, key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError {
            field: if key.is_empty() { section.to_string() } else { format!("{section}.{key}") },
            line: locate(&self.source, section, key),
            message: message.into(),
        }
    }

    pub fn space(&self) -> Result<ProductSpace, ConfigError> {
        ProductSpace::new(&self.config.space.dims).map_err(|e| self.error("space", "dims", e.to_string()))
    }

    pub fn grid(&self) -> Result<LatticeGrid, ConfigError> {
        let space = self.space()?;
        let n = space.n();
        let extent = self
            .config
            .grid
            .extent
            .expand(n)
            .ok_or_else(|| self.error("grid", "extent", format!("need 1 or {n} entries")))?;
        let points = self
            .config
            .grid
            .points
            .expand(n)
            .ok_or_else(|| self.error("grid", "points", format!("need 1 or {n} entries")))?;
        if let Some(a) = points.iter().position(|&p| p % 2 != 0) {
            return Err(self.error("grid", "points", format!("axis {a}: {} points is odd; counts must be even", points[a])));
        }
        LatticeGrid::make(space, &extent, &points).map_err(|e| {
            let key = if e.to_string().contains("extent") { "extent" } else { "points" };
            self.error("grid", key, e.to_string())
        })
    }

    pub fn phase(&self) -> Result<PhaseSpec, ConfigError> {
        let space = self.space()?;
        let p = &self.config.phase;
        let tags: Vec<String> = match (&p.tag, &p.factors) {
            (Some(_), Some(_)) => return Err(self.error("phase", "factors", "give either `tag` or `factors`, not both")),
            (Some(t), None) => vec![t.clone(); space.d()],
            (None, Some(f)) if f.len() == space.d() => f.clone(),
            (None, Some(f)) => {
                return Err(self.error("phase", "factors", format!("{} entries for d = {}", f.len(), space.d())));
            }
            (None, None) => vec!["identity".into(); space.d()],
        };
        let key = if p.factors.is_some() { "factors" } else { "tag" };
        let factors = tags
            .iter()
            .map(|t| match t.as_str() {
                "identity" => Ok(FactorPhase::Identity),
                "translation" => Ok(FactorPhase::Translation { a: p.shift }),
                "halfwave" => Ok(FactorPhase::Halfwave),
                "perturbed" => Ok(FactorPhase::Perturbed { eps: p.eps }),
                other => Err(self.error(
                    "phase",
                    key,
                    format!("unknown phase '{other}' (identity, translation, halfwave, perturbed)"),
                )),
            })
            .collect::<Result<Vec<_>, _>>()?;
        PhaseSpec::new(space, factors).map_err(|e| self.error("phase", key, e.to_string()))
    }

    /// The configured symbol, with `order` replacing the exponents when
    /// given.
    pub fn symbol(&self) -> Result<SymbolSpec, ConfigError> {
        self.symbol_with_order(self.config.symbol.order.clone())
    }

    pub fn symbol_with_order(&self, order: Option<Vec<f64>>) -> Result<SymbolSpec, ConfigError> {
        self.symbol_on(self.space()?, order)
    }

    /// The configured symbol family built on `space`, which may be a single
    /// factor of the configured space.
    pub fn symbol_on(&self, space: ProductSpace, order: Option<Vec<f64>>) -> Result<SymbolSpec, ConfigError> {
        let s = &self.config.symbol;
        let d = space.d();
        if let Some(o) = &order {
            if o.len() != d {
                return Err(self.error("symbol", "order", format!("{} entries for d = {d}", o.len())));
            }
        }
        let radius = |default: f64| s.radius.unwrap_or(default);
        let err = |e: mpfio_core::Error| self.error("symbol", "", e.to_string());
        let base = match s.tag.as_str() {
            "unit" => Ok(SymbolSpec::unit(space.clone())),
            "bump_const" => SymbolSpec::bump_const(space.clone(), radius(1.0)).map_err(err),
            "critical_order" | "bessel_power" => {
                let m = match (&order, s.tag.as_str()) {
                    (Some(m), _) => m.clone(),
                    (None, "critical_order") => mpfio_core::symbol::critical_exponents(&space),
                    (None, _) => return Err(self.error("symbol", "order", "bessel_power needs `order`")),
                };
                if s.tag == "critical_order" && order.is_none() {
                    SymbolSpec::critical_order(space.clone(), radius(1.0)).map_err(err)
                } else {
                    SymbolSpec::bessel_power(space.clone(), m, s.radius).map_err(err)
                }
            }
            "rough_rho" => SymbolSpec::rough_rho(space.clone(), s.rho.unwrap_or(0.75), radius(1.0)).map_err(err),
            other => Err(self.error(
                "symbol",
                "tag",
                format!("unknown symbol '{other}' (unit, bump_const, critical_order, bessel_power, rough_rho)"),
            )),
        }?;
        match (&order, s.tag.as_str()) {
            (Some(o), "unit" | "bump_const" | "rough_rho") => base.with_order(o.clone()).map_err(err),
            _ => Ok(base),
        }
    }

    /// Operator on `grid` with per-factor levels (`None` uses the largest
    /// level the grid resolves).
    pub fn operator(&self, symbol: SymbolSpec, grid: LatticeGrid, levels: Option<Vec<u32>>, section: &str) -> Result<OperatorSpec, ConfigError> {
        let phase = self.phase()?;
        let levels = match levels {
            Some(l) => l,
            None => (0..grid.space().d())
                .map(|i| max_level(&grid, i))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| self.error("grid", "points", e.to_string()))?,
        };
        OperatorSpec::new(symbol, phase, grid, levels)
            .map_err(|e| self.error(section, "top", e.to_string()))?
            .with_sector_scale(self.sector_scale()?)
            .map_err(|e| self.error("decomp", "sector_spacing_scale", e.to_string()))
    }

    pub fn sector_scale(&self) -> Result<f64, ConfigError> {
        let s = self.config.decomp.sector_spacing_scale;
        if s.is_finite() && s > 0.0 {
            Ok(s)
        } else {
            Err(self.error("decomp", "sector_spacing_scale", "must be positive"))
        }
    }

    pub fn profile(&self) -> Result<Profile, ConfigError> {
        let name = self.config.atom.as_ref().map(|a| a.profile.as_str()).unwrap_or("odd-bump");
        Profile::parse(name)
            .ok_or_else(|| self.error("atom", "profile", format!("unknown profile '{name}' (odd-bump, two-hump, tensor-odd, flat)")))
    }

    pub fn atom_section(&self, needed_by: &str) -> Result<&AtomSection, ConfigError> {
        self.config
            .atom
            .as_ref()
            .ok_or_else(|| self.error("atom", "", format!("section [atom] is required by {needed_by}")))
    }

    /// Atom center, defaulting to the origin.
    pub fn center(&self) -> Result<Vec<f64>, ConfigError> {
        let n = self.space()?.n();
        match self.config.atom.as_ref().and_then(|a| a.center.clone()) {
            Some(c) if c.len() == n => Ok(c),
            Some(c) => Err(self.error("atom", "center", format!("{} entries for {n} axes", c.len()))),
            None => Ok(vec![0.0; n]),
        }
    }

    pub fn atom(&self, grid: &LatticeGrid) -> Result<RectangleAtom, ConfigError> {
        let a = self.atom_section("this command")?;
        let d = grid.space().d();
        if a.radii.len() != d {
            return Err(self.error("atom", "radii", format!("{} entries for d = {d}", a.radii.len())));
        }
        make_tensor_atom(grid, &self.center()?, &a.radii, self.profile()?)
            .map_err(|e| self.error("atom", "radii", e.to_string()))
    }
}

/// Line (1-based) of `key = …` inside `[section]`, or of the section header
/// when `key` is empty.
pub fn locate(source: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (no, raw) in source.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            current = line.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if key.is_empty() && current == section {
                return Some(no + 1);
            }
            continue;
        }
        if current == section && !key.is_empty() {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(no + 1);
                }
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "[space]\ndims = [2]\n\n[grid]\nextent = 1.0\npoints = 32\n\n[phase]\ntag = \"halfwave\"\n\n[symbol]\ntag = \"critical_order\"\nradius = 1.2\n";

    #[test]
    fn parses_and_builds() {
        let c = LoadedConfig::parse(BASE).unwrap();
        let g = c.grid().unwrap();
        assert_eq!(g.point_counts(), &[32, 32]);
        let op = c.operator(c.symbol().unwrap(), g, None, "grid").unwrap();
        assert_eq!(op.levels, vec![2]);
        assert_eq!(op.phase.name(), PhaseSpec::halfwave(c.space().unwrap()).name());
    }

    #[test]
    fn odd_points_name_the_field_and_line() {
        let src = BASE.replace("points = 32", "points = 33");
        let e = LoadedConfig::parse(&src).unwrap().grid().unwrap_err();
        assert_eq!(e.field, "grid.points");
        assert_eq!(e.line, Some(6));
        assert!(e.to_string().contains("odd"), "{e}");
    }

    #[test]
    fn syntax_errors_carry_a_line() {
        let src = BASE.replace("extent = 1.0", "extent = ");
        let e = LoadedConfig::parse(&src).unwrap_err();
        assert_eq!(e.line, Some(5), "{e}");
    }

    #[test]
    fn unknown_keys_and_tags_are_rejected() {
        assert!(LoadedConfig::parse(&format!("{BASE}colour = 3\n")).is_err());
        let c = LoadedConfig::parse(&BASE.replace("\"halfwave\"", "\"spiral\"")).unwrap();
        assert_eq!(c.phase().unwrap_err().field, "phase.tag");
    }

    #[test]
    fn order_override_replaces_exponents() {
        let c = LoadedConfig::parse(BASE).unwrap();
        let s = c.symbol_with_order(Some(vec![0.0])).unwrap();
        assert_eq!(s.order, vec![0.0]);
        assert_eq!(c.symbol().unwrap().order, vec![-0.5]);
    }

    #[test]
    fn per_axis_values() {
        assert_eq!(PerAxis::One(3).expand(2), Some(vec![3, 3]));
        assert_eq!(PerAxis::Many(vec![1, 2]).expand(2), Some(vec![1, 2]));
        assert_eq!(PerAxis::Many(vec![1]).expand(2), None);
    }

    #[test]
    fn locate_finds_section_keys() {
        let src = "[a]\nx = 1\n[b]\nx = 2\n";
        assert_eq!(locate(src, "b", "x"), Some(4));
        assert_eq!(locate(src, "b", ""), Some(3));
        assert_eq!(locate(src, "c", "x"), None);
    }
}
