//! Experiment configuration: a TOML file with one section per pipeline stage.
//!
//! Everything is validated up front by [`ExperimentConfig::validate`], which
//! names the offending key, so no stage starts computing on a bad config.
//! Randomness is derived from the single root `seed` through named streams
//! ([`ExperimentConfig::stream_seed`]).
//!
//! ```toml
//! seed = 7
//! output = "out"
//!
//! [grid]
//! dim = 2
//! points = 64
//! extent = 1.0
//!
//! [model]
//! kind = "gaussian"
//! count = 32
//! length_scale = 0.2
//! cutoff_radius = 0.6
//! taper_width = 0.2
//!
//! [forward]
//! orders = [1, 2]
//!
//! [reconstruct]
//! directions = 256
//! radii = 64
//! output_points = 16
//! epsilons = [0.4, 0.3]
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;

use crate::correlation_data::OffsetGrid;
use crate::error::{Error, Result};
use crate::field_models::{
    sample_finite_rank_field, sample_gaussian_field, CoefficientLaw, Ensemble, FieldModel, KernelKind, Mode, PotentialGrid,
};
use crate::grid::{Geometry, Grid};
use crate::phantoms;
use crate::reconstruction::{SinogramSpec, SphereQuadrature};

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    pub grid: GridConfig,
    pub model: ModelConfig,
    /// Second ensemble for law comparison; without it the model is compared with itself.
    pub reference: Option<ModelConfig>,
    pub forward: Option<ForwardConfig>,
    pub reconstruct: Option<ReconstructConfig>,
    pub laws: Option<LawsConfig>,
    pub wave: Option<WaveConfig>,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dim: usize,
    pub points: usize,
    pub extent: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Gaussian,
    FiniteRank,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelName {
    SquaredExponential,
    Matern52,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub count: usize,
    #[serde(default = "default_kernel")]
    pub kernel: KernelName,
    #[serde(default = "one")]
    pub length_scale: f64,
    #[serde(default = "one")]
    pub variance: f64,
    /// Constant mean before tapering.
    #[serde(default)]
    pub mean: f64,
    pub cutoff_radius: f64,
    pub taper_width: f64,
    #[serde(default)]
    pub modes: Vec<ModeConfig>,
}

fn default_kernel() -> KernelName {
    KernelName::SquaredExponential
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeConfig {
    pub shape: ShapeConfig,
    pub law: LawConfig,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ShapeConfig {
    /// Tapered Gaussian bump.
    Gaussian { center: Vec<f64>, width: f64, #[serde(default = "one")] amplitude: f64 },
    /// Polynomial bump `(1 - |x-c|²/r²)⁴₊`.
    Bump { center: Vec<f64>, radius: f64, #[serde(default = "one")] amplitude: f64 },
    /// Anti-aliased indicator of a centred ball.
    Disk { radius: f64 },
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LawConfig {
    Rademacher,
    Uniform { lo: f64, hi: f64 },
    Constant { value: f64 },
    Normal { mean: f64, std: f64 },
    StudentT { dof: f64 },
    Cauchy { scale: f64 },
}

impl LawConfig {
    pub fn law(&self) -> CoefficientLaw {
        match *self {
            LawConfig::Rademacher => CoefficientLaw::Rademacher,
            LawConfig::Uniform { lo, hi } => CoefficientLaw::Uniform { lo, hi },
            LawConfig::Constant { value } => CoefficientLaw::Constant(value),
            LawConfig::Normal { mean, std } => CoefficientLaw::Normal { mean, std },
            LawConfig::StudentT { dof } => CoefficientLaw::StudentT { dof },
            LawConfig::Cauchy { scale } => CoefficientLaw::Cauchy { scale },
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForwardConfig {
    pub orders: Vec<usize>,
    #[serde(default = "default_offset_points")]
    pub offset_points: usize,
    /// Half-width of the offset grids; defaults to the data support radius
    /// widened by the largest mollifier width, plus a margin.
    pub offset_extent: Option<f64>,
    /// Realisations used for the data; defaults to the whole ensemble.
    pub samples: Option<usize>,
}

fn default_offset_points() -> usize {
    64
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructConfig {
    pub directions: usize,
    pub radii: usize,
    /// Defaults to `(R + ε_max)·√k`.
    pub r_max: Option<f64>,
    pub output_points: usize,
    /// Defaults to the data support radius `R`.
    pub output_extent: Option<f64>,
    /// Strictly decreasing mollifier widths.
    pub epsilons: Vec<f64>,
    /// Batch count for the Monte-Carlo noise floor; 0 skips it.
    #[serde(default)]
    pub noise_batches: usize,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LawsConfig {
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    /// Size of the cosine basis, lowest total degree first.
    #[serde(default = "default_basis")]
    pub basis_functions: usize,
    /// Basis functions used per tensor slot.
    #[serde(default = "default_j_max")]
    pub j_max: usize,
    /// Probe points for the Gaussian law estimate; empty uses a default set.
    #[serde(default)]
    pub probes: Vec<Vec<f64>>,
    #[serde(default = "default_resamples")]
    pub resamples: usize,
    /// Exponent `a` of the exponential moment `E exp(a‖V‖)`.
    #[serde(default = "default_exp_a")]
    pub exp_a: f64,
}

fn default_k_max() -> usize {
    4
}
fn default_basis() -> usize {
    4
}
fn default_j_max() -> usize {
    2
}
fn default_resamples() -> usize {
    10_000
}
fn default_exp_a() -> f64 {
    0.1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WavePotential {
    Zero,
    Box,
    Bump,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveConfig {
    pub potential: WavePotential,
    #[serde(default = "default_wave_amp")]
    pub amplitude: f64,
    /// Box half-width or bump radius.
    #[serde(default = "default_wave_width")]
    pub width: f64,
    #[serde(default = "default_wave_points")]
    pub points: usize,
    #[serde(default = "default_wave_extent")]
    pub extent: f64,
    /// Strictly decreasing pulse widths.
    pub pulse_widths: Vec<f64>,
    #[serde(default = "default_cells")]
    pub cells_per_width: usize,
    /// Time step over space step for the recorded trace run.
    #[serde(default = "one")]
    pub courant: f64,
    #[serde(default = "default_direction")]
    pub direction: i8,
}

fn default_wave_amp() -> f64 {
    0.1
}
fn default_wave_width() -> f64 {
    0.5
}
fn default_wave_points() -> usize {
    4001
}
fn default_wave_extent() -> f64 {
    2.0
}
fn default_cells() -> usize {
    8
}
fn default_direction() -> i8 {
    1
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(key, format!("must be positive and finite, got {v}")))
    }
}

fn nonzero(key: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(Error::config(key, "must be positive"))
    } else {
        Ok(())
    }
}

/// Re-labels a module error with the config key it came from.
fn at(key: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Config { .. } | Error::NyquistViolation { .. } | Error::CflViolation { .. } => e,
        other => Error::config(key, other.to_string()),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config("<file>", e.message().to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        ExperimentConfig::parse(&text)
    }

    /// Seed of the named random stream.
    pub fn stream_seed(&self, name: &str) -> u64 {
        stream_seed(self.seed, name)
    }

    pub fn geometry(&self) -> Result<Geometry> {
        let g = self.grid;
        nonzero("grid.dim", g.dim)?;
        positive("grid.extent", g.extent)?;
        if g.points < 2 {
            return Err(Error::config("grid.points", "need at least two points per axis"));
        }
        Geometry::new(g.dim, g.extent, g.points).map_err(at("grid"))
    }

    /// Checks every section against the preconditions of the stage that reads it.
    pub fn validate(&self) -> Result<()> {
        let g = self.geometry()?;
        self.model.build(g, "model")?;
        if let Some(r) = &self.reference {
            r.build(g, "reference")?;
        }
        if let Some(f) = &self.forward {
            if f.orders.is_empty() {
                return Err(Error::config("forward.orders", "list at least one order"));
            }
            for &k in &f.orders {
                if k == 0 || k > 4 {
                    return Err(Error::config("forward.orders", format!("order {k} outside 1..=4")));
                }
            }
            if f.orders.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::config("forward.orders", "must be strictly increasing"));
            }
            if f.offset_points < 2 {
                return Err(Error::config("forward.offset_points", "need at least two points"));
            }
            if let Some(e) = f.offset_extent {
                positive("forward.offset_extent", e)?;
            }
            if let Some(s) = f.samples {
                nonzero("forward.samples", s)?;
                if s > self.model.count {
                    return Err(Error::config("forward.samples", format!("exceeds model.count = {}", self.model.count)));
                }
            }
            self.offsets()?;
        }
        if let Some(r) = &self.reconstruct {
            let Some(f) = &self.forward else {
                return Err(Error::config("reconstruct", "needs a [forward] section"));
            };
            if g.dim < 2 {
                return Err(Error::config("grid.dim", "reconstruction needs dimension >= 2"));
            }
            nonzero("reconstruct.directions", r.directions)?;
            if r.radii < 2 || !r.radii.is_power_of_two() {
                return Err(Error::config("reconstruct.radii", "must be a power of two >= 2"));
            }
            if r.output_points < 2 {
                return Err(Error::config("reconstruct.output_points", "need at least two points"));
            }
            if r.epsilons.is_empty() {
                return Err(Error::config("reconstruct.epsilons", "list at least one width"));
            }
            for &e in &r.epsilons {
                positive("reconstruct.epsilons", e)?;
            }
            if r.epsilons.windows(2).any(|w| w[1] >= w[0]) {
                return Err(Error::config("reconstruct.epsilons", "must be strictly decreasing"));
            }
            if r.noise_batches == 1 {
                return Err(Error::config("reconstruct.noise_batches", "use 0 (off) or at least 2"));
            }
            if r.noise_batches > self.forward_samples() {
                return Err(Error::config("reconstruct.noise_batches", "exceeds the number of realisations"));
            }
            if let Some(v) = r.r_max {
                positive("reconstruct.r_max", v)?;
            }
            if let Some(v) = r.output_extent {
                positive("reconstruct.output_extent", v)?;
            }
            for &k in &f.orders {
                let spec = self.sinogram_spec(k)?;
                let out = self.output_geometry(k)?;
                let dr = 2.0 * spec.r_max / spec.n_r as f64;
                if dr > 0.5 * out.spacing() * (1.0 + 1e-9) {
                    return Err(Error::NyquistViolation { dr, half_h: 0.5 * out.spacing() });
                }
                if out.extent > spec.r_max {
                    return Err(Error::config("reconstruct.output_extent", format!("exceeds r_max = {}", spec.r_max)));
                }
            }
        }
        if let Some(l) = &self.laws {
            nonzero("laws.k_max", l.k_max)?;
            if l.k_max > 6 {
                return Err(Error::config("laws.k_max", "at most 6"));
            }
            nonzero("laws.basis_functions", l.basis_functions)?;
            nonzero("laws.j_max", l.j_max)?;
            if l.j_max > l.basis_functions {
                return Err(Error::config("laws.j_max", "exceeds laws.basis_functions"));
            }
            if l.basis_functions > g.points {
                return Err(Error::config("laws.basis_functions", "exceeds grid.points"));
            }
            nonzero("laws.resamples", l.resamples)?;
            if !(l.exp_a.is_finite() && l.exp_a >= 0.0) {
                return Err(Error::config("laws.exp_a", "must be finite and non-negative"));
            }
            for p in &l.probes {
                if p.len() != g.dim || p.iter().any(|c| !c.is_finite()) {
                    return Err(Error::config("laws.probes", format!("each probe needs {} finite coordinates", g.dim)));
                }
            }
            if let Some(r) = &self.reference {
                if r.count < 2 {
                    return Err(Error::config("reference.count", "law comparison needs at least two realisations"));
                }
            }
            if self.model.count < 2 {
                return Err(Error::config("model.count", "law comparison needs at least two realisations"));
            }
        }
        if let Some(w) = &self.wave {
            w.validate()?;
        }
        Ok(())
    }

    /// Radius containing the support of every multilinear realisation.
    pub fn data_support(&self) -> Result<f64> {
        let g = self.geometry()?;
        let mut r = self.model.support_radius();
        if let Some(m) = &self.reference {
            r = r.max(m.support_radius());
        }
        Ok(r + g.spacing() * (g.dim as f64).sqrt())
    }

    /// Support of the data after mollifying at the widest configured `ε`.
    pub fn mollified_support(&self) -> Result<f64> {
        let eps = self.reconstruct.as_ref().and_then(|r| r.epsilons.first().copied()).unwrap_or(0.0);
        Ok(self.data_support()? + eps.max(0.0))
    }

    pub fn forward_samples(&self) -> usize {
        self.forward.as_ref().and_then(|f| f.samples).unwrap_or(self.model.count)
    }

    pub fn offsets(&self) -> Result<OffsetGrid> {
        let f = self.forward.as_ref().ok_or_else(|| Error::config("forward", "section missing"))?;
        let support = self.data_support()?;
        let extent = f.offset_extent.unwrap_or(self.mollified_support()? + 0.01);
        if extent < support {
            return Err(Error::config("forward.offset_extent", format!("must cover the support radius {support:.4}")));
        }
        OffsetGrid::new(extent, f.offset_points).map_err(at("forward.offset_points"))
    }

    pub fn sinogram_spec(&self, k: usize) -> Result<SinogramSpec> {
        let r = self.reconstruct.as_ref().ok_or_else(|| Error::config("reconstruct", "section missing"))?;
        let n = self.grid.dim;
        let r_max = r.r_max.unwrap_or(self.mollified_support()? * (k as f64).sqrt());
        let dirs = SphereQuadrature::for_dimension(n * k, r.directions).map_err(at("reconstruct.directions"))?;
        Ok(SinogramSpec::new(r_max, r.radii, dirs))
    }

    pub fn output_geometry(&self, k: usize) -> Result<Geometry> {
        let r = self.reconstruct.as_ref().ok_or_else(|| Error::config("reconstruct", "section missing"))?;
        let extent = r.output_extent.unwrap_or(self.data_support()?);
        Geometry::new(self.grid.dim * k, extent, r.output_points).map_err(at("reconstruct.output_points"))
    }

    pub fn sample_model(&self, which: &ModelConfig, stream: &str) -> Result<Ensemble> {
        let g = self.geometry()?;
        which.sample(g, stream, self.stream_seed(stream))
    }
}

impl ModelConfig {
    pub fn support_radius(&self) -> f64 {
        self.cutoff_radius + self.taper_width
    }

    /// Builds and validates the field model; `section` names the table in errors.
    pub fn build(&self, g: Geometry, section: &str) -> Result<FieldModel> {
        let key = |k: &str| format!("{section}.{k}");
        nonzero(&key("count"), self.count)?;
        positive(&key("cutoff_radius"), self.cutoff_radius)?;
        positive(&key("taper_width"), self.taper_width)?;
        if self.support_radius() >= g.extent {
            return Err(Error::config(
                key("cutoff_radius"),
                format!("cutoff_radius + taper_width = {} must stay inside grid.extent = {}", self.support_radius(), g.extent),
            ));
        }
        match self.kind {
            ModelKind::Gaussian => {
                positive(&key("length_scale"), self.length_scale)?;
                if !(self.variance >= 0.0 && self.variance.is_finite()) {
                    return Err(Error::config(key("variance"), "must be non-negative"));
                }
                if !self.mean.is_finite() {
                    return Err(Error::config(key("mean"), "must be finite"));
                }
                if !self.modes.is_empty() {
                    return Err(Error::config(key("modes"), "only finite-rank models take modes"));
                }
                if g.spacing() > self.length_scale / 4.0 {
                    return Err(Error::config(
                        key("length_scale"),
                        format!("grid spacing {} exceeds length_scale / 4; refine grid.points", g.spacing()),
                    ));
                }
                let kernel = match self.kernel {
                    KernelName::SquaredExponential => KernelKind::SquaredExponential,
                    KernelName::Matern52 => KernelKind::Matern52,
                };
                FieldModel::gaussian(Grid::from_fn(g, |_| self.mean), kernel, self.length_scale, self.variance, self.cutoff_radius, self.taper_width)
                    .map_err(|e| Error::config(section, e.to_string()))
            }
            ModelKind::FiniteRank => {
                if self.modes.is_empty() {
                    return Err(Error::config(key("modes"), "finite-rank model needs at least one mode"));
                }
                let modes = self
                    .modes
                    .iter()
                    .enumerate()
                    .map(|(i, m)| {
                        let mkey = format!("{section}.modes[{i}]");
                        m.law.law().validate().map_err(|e| Error::config(format!("{mkey}.law"), e.to_string()))?;
                        let shape = m.shape.build(g).map_err(|e| Error::config(format!("{mkey}.shape"), e.to_string()))?;
                        Ok(Mode { shape: shape.grid().clone(), law: m.law.law() })
                    })
                    .collect::<Result<Vec<_>>>()?;
                FieldModel::finite_rank(g, modes, self.cutoff_radius, self.taper_width).map_err(|e| Error::config(key("modes"), e.to_string()))
            }
        }
    }

    pub fn sample(&self, g: Geometry, section: &str, seed: u64) -> Result<Ensemble> {
        let model = self.build(g, section)?;
        match self.kind {
            ModelKind::Gaussian => sample_gaussian_field(&model, seed, self.count),
            ModelKind::FiniteRank => sample_finite_rank_field(&model, seed, self.count),
        }
    }

    /// The model alone, for re-attaching to realisations loaded from disk.
    pub fn model(&self, g: Geometry, section: &str) -> Result<Arc<FieldModel>> {
        Ok(Arc::new(self.build(g, section)?))
    }
}

impl ShapeConfig {
    pub fn build(&self, g: Geometry) -> Result<PotentialGrid> {
        let check_center = |c: &[f64]| {
            if c.len() != g.dim || c.iter().any(|v| !v.is_finite()) {
                Err(Error::param("center", format!("needs {} finite coordinates", g.dim)))
            } else {
                Ok(())
            }
        };
        match self {
            ShapeConfig::Gaussian { center, width, amplitude } => {
                check_center(center)?;
                positive("width", *width)?;
                phantoms::tapered_gaussian(g, center, *width, *amplitude)
            }
            ShapeConfig::Bump { center, radius, amplitude } => {
                check_center(center)?;
                positive("radius", *radius)?;
                phantoms::smooth_bump(g, center, *radius, *amplitude)
            }
            ShapeConfig::Disk { radius } => {
                positive("radius", *radius)?;
                phantoms::disk_indicator(g, *radius, 4)
            }
        }
    }
}

impl WaveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude.is_finite()) {
            return Err(Error::config("wave.amplitude", "must be finite"));
        }
        positive("wave.width", self.width)?;
        positive("wave.extent", self.extent)?;
        if self.points < 3 {
            return Err(Error::config("wave.points", "need at least three points"));
        }
        if self.width >= 0.5 * self.extent {
            return Err(Error::config("wave.width", "potential must sit well inside the grid"));
        }
        if self.pulse_widths.len() < 2 {
            return Err(Error::config("wave.pulse_widths", "need at least two widths"));
        }
        for &w in &self.pulse_widths {
            positive("wave.pulse_widths", w)?;
        }
        if self.pulse_widths.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::config("wave.pulse_widths", "must be strictly decreasing"));
        }
        if self.cells_per_width < 4 {
            return Err(Error::config("wave.cells_per_width", "pulse must span at least four cells"));
        }
        if !(self.courant > 0.0 && self.courant.is_finite()) {
            return Err(Error::config("wave.courant", "must be positive"));
        }
        if self.courant > 1.0 {
            return Err(Error::config("wave.courant", format!("{} violates the CFL condition (must be at most 1)", self.courant)));
        }
        if self.direction != 1 && self.direction != -1 {
            return Err(Error::config("wave.direction", "must be 1 or -1"));
        }
        Ok(())
    }

    pub fn potential(&self) -> Result<PotentialGrid> {
        let g = Geometry::new(1, self.extent, self.points).map_err(at("wave.points"))?;
        match self.potential {
            WavePotential::Zero => PotentialGrid::zeros(g, self.width),
            WavePotential::Box => phantoms::box_1d(g, self.width, self.amplitude),
            WavePotential::Bump => phantoms::smooth_bump(g, &[0.0], self.width, self.amplitude),
        }
    }
}

/// Seed of the stream `name` under `root`.
pub fn stream_seed(root: u64, name: &str) -> u64 {
    crate::numeric::named_seed(root, name)
}
