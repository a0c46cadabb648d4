//! Pipeline stages. Each reads its inputs from the output directory, writes
//! its own files there and is fully determined by the config.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use corrtomo::config::{ExperimentConfig, KernelName, ModelConfig, ModelKind};
use corrtomo::correlation_data::{synthesize_many, DataSource, MollifiedSource, Mollifier};
use corrtomo::field_models::Ensemble;
use corrtomo::formats::{self, Manifest};
use corrtomo::law_recovery::{self, GridBasis};
use corrtomo::moment::MomentGrid;
use corrtomo::reconstruction::{self, assemble_sinogram, fbp_invert, sinogram_tuples, sweep_from_moments};
use corrtomo::wave::{self, PulseSpec, WaveGrid};
use corrtomo::{Error, Result};
use log::info;

const ENSEMBLE: &str = "ensemble";
const REFERENCE: &str = "reference";

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    formats::write_atomic(path, text.as_bytes())
}

fn model_keys(m: &ModelConfig) -> Manifest {
    let mut man = Manifest::new();
    let kind = match m.kind {
        ModelKind::Gaussian => "gaussian",
        ModelKind::FiniteRank => "finite-rank",
    };
    man.set("model.kind", kind)
        .set("model.count", m.count)
        .set("model.cutoff_radius", m.cutoff_radius)
        .set("model.taper_width", m.taper_width);
    if m.modes.is_empty() {
        let kernel = match m.kernel {
            KernelName::SquaredExponential => "squared-exponential",
            KernelName::Matern52 => "matern52",
        };
        man.set("model.kernel", kernel)
            .set("model.length_scale", m.length_scale)
            .set("model.variance", m.variance)
            .set("model.mean", m.mean);
    } else {
        man.set("model.modes", m.modes.len());
    }
    man
}

pub fn synth(cfg: &ExperimentConfig) -> Result<()> {
    let mut jobs: Vec<(&ModelConfig, &str)> = vec![(&cfg.model, ENSEMBLE)];
    if let Some(r) = &cfg.reference {
        jobs.push((r, REFERENCE));
    }
    for (model, name) in jobs {
        let ens = cfg.sample_model(model, name)?;
        let dir = cfg.output.join(name);
        // stale realisations from a larger earlier run would shadow the manifest
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        formats::write_ensemble(&dir, &ens, &model_keys(model))?;
        info!("wrote {} realisations to {}", ens.count(), dir.display());
    }
    Ok(())
}

/// Loads an ensemble written by [`synth`], checking it matches the config.
fn load_ensemble(cfg: &ExperimentConfig, model: &ModelConfig, name: &str) -> Result<Ensemble> {
    let dir = cfg.output.join(name);
    if !dir.join("manifest.txt").is_file() {
        return Err(Error::config(name, format!("no ensemble at {}; run `synth` first", dir.display())));
    }
    let man = formats::read_ensemble_manifest(&dir)?;
    let g = cfg.geometry()?;
    let stale = man.parse_value::<u64>("seed")? != cfg.stream_seed(name)
        || man.parse_value::<usize>("count")? != model.count
        || man.parse_value::<usize>("points_per_axis")? != g.points
        || man.parse_value::<usize>("dim")? != g.dim;
    if stale {
        return Err(Error::config(name, format!("{} was written with a different config; rerun `synth`", dir.display())));
    }
    formats::read_ensemble(&dir, model.model(g, name)?)
}

fn data_dir(cfg: &ExperimentConfig, k: usize) -> PathBuf {
    cfg.output.join("data").join(format!("k{k}"))
}

fn orders(cfg: &ExperimentConfig) -> Result<&[usize]> {
    cfg.forward.as_ref().map(|f| f.orders.as_slice()).ok_or_else(|| Error::config("forward", "section missing"))
}

pub fn forward(cfg: &ExperimentConfig) -> Result<()> {
    let ens = load_ensemble(cfg, &cfg.model, ENSEMBLE)?;
    let offsets = cfg.offsets()?;
    let n = cfg.grid.dim;
    for &k in orders(cfg)? {
        let spec = cfg.sinogram_spec(k)?;
        let tuples = sinogram_tuples(&spec, n)?;
        info!("order {k}: synthesising {} data sets from {} realisations", tuples.len(), cfg.forward_samples());
        let sets: Vec<Arc<_>> = synthesize_many(&ens, &tuples, offsets, cfg.forward_samples())?.into_iter().map(Arc::new).collect();
        let dir = data_dir(cfg, k);
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        formats::write_bank(&dir, &sets)?;
        if k <= 2 {
            if let Some(first) = sets.first() {
                formats::write_dataset_csv(first, create(&dir.join("data_00000.csv"))?)?;
            }
        }
    }
    Ok(())
}

fn moment_path(cfg: &ExperimentConfig, k: usize, i: usize) -> PathBuf {
    cfg.output.join("moments").join(format!("m{k}_e{i}.mtg"))
}

fn write_images(cfg: &ExperimentConfig, m: &MomentGrid, stem: &str) -> Result<()> {
    let d = m.grid.dim();
    if d < 2 {
        return Ok(());
    }
    // M¹ slice through the origin; M^k with the later points pinned at the origin
    let slice = formats::moment_slice(m, &vec![0.0; d - 2])?;
    let dir = cfg.output.join("images");
    formats::write_pgm(&dir.join(format!("{stem}.pgm")), &slice)?;
    let mut out = create(&dir.join(format!("{stem}.csv")))?;
    formats::write_grid_csv(&slice, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn reconstruct(cfg: &ExperimentConfig) -> Result<()> {
    let rc = cfg.reconstruct.as_ref().ok_or_else(|| Error::config("reconstruct", "section missing"))?;
    let n = cfg.grid.dim;
    let mut summary = String::from("k,epsilon,value_at_origin,max_abs\n");
    for &k in orders(cfg)? {
        let dir = data_dir(cfg, k);
        if !dir.join("manifest.txt").is_file() {
            return Err(Error::config("forward", format!("no data at {}; run `forward` first", dir.display())));
        }
        let bank = formats::read_bank(&dir)?;
        if bank.order() != k || bank.dim() != n {
            return Err(Error::config("forward", format!("data in {} does not match order {k}", dir.display())));
        }
        let spec = cfg.sinogram_spec(k)?;
        let out = cfg.output_geometry(k)?;
        let mut moments = Vec::new();
        let mut skipped = Vec::new();
        for (i, &eps) in rc.epsilons.iter().enumerate() {
            if eps < 2.0 * out.spacing() {
                info!("order {k}: skipping epsilon {eps}, below twice the output spacing");
                skipped.push(eps);
                continue;
            }
            let src = MollifiedSource { inner: &bank, mollifier: Mollifier::new(eps, n)? };
            let sino = assemble_sinogram(&src, &spec)?;
            formats::write_sinogram(&cfg.output.join("sinograms").join(format!("s{k}_e{i}.mts")), &sino)?;
            let mut m = fbp_invert(&sino, &out)?;
            m.epsilon = eps;
            formats::write_moment(&moment_path(cfg, k, i), &m)?;
            write_images(cfg, &m, &format!("m{k}_e{i}"))?;
            let origin = m.evaluate(&vec![0.0; out.dim]);
            summary.push_str(&format!("{k},{eps:.6e},{origin:.8e},{:.8e}\n", m.grid.max_abs()));
            moments.push(m);
        }
        let noise = if rc.noise_batches >= 2 && !moments.is_empty() {
            let ens = load_ensemble(cfg, &cfg.model, ENSEMBLE)?;
            let eps = moments.last().map(|m| m.epsilon).unwrap_or(rc.epsilons[0]);
            let floor = reconstruction::noise_floor(&ens, k, cfg.forward_samples(), cfg.offsets()?, rc.noise_batches, eps, &spec, &out)?;
            Some(floor.pairings)
        } else {
            None
        };
        let report = sweep_from_moments(moments, skipped, bank.support_radius(), noise.as_deref());
        write_text(&cfg.output.join("reports").join(format!("sweep_k{k}.txt")), &report.to_text())?;
    }
    write_text(&cfg.output.join("reports").join("reconstruct.csv"), &summary)
}

/// Probes for the Gaussian law: the origin and points at 30% of the support
/// radius along the first axes and diagonal, at most six.
fn default_probes(dim: usize, radius: f64) -> Vec<Vec<f64>> {
    let a = 0.3 * radius;
    let mut out = vec![vec![0.0; dim]];
    for axis in 0..dim.min(2) {
        for s in [1.0, -1.0] {
            let mut p = vec![0.0; dim];
            p[axis] = s * a;
            out.push(p);
        }
    }
    if dim >= 2 {
        let mut p = vec![0.0; dim];
        p[0] = a / 2f64.sqrt();
        p[1] = a / 2f64.sqrt();
        out.push(p);
    }
    out.truncate(6);
    out
}

/// Finest stored reconstruction of order `k`, if any.
fn finest_moment(cfg: &ExperimentConfig, k: usize) -> Result<Option<MomentGrid>> {
    let Some(rc) = &cfg.reconstruct else { return Ok(None) };
    for i in (0..rc.epsilons.len()).rev() {
        let p = moment_path(cfg, k, i);
        if p.is_file() {
            return Ok(Some(formats::read_moment(&p)?));
        }
    }
    Ok(None)
}

pub fn laws(cfg: &ExperimentConfig) -> Result<()> {
    let lc = cfg.laws.as_ref().ok_or_else(|| Error::config("laws", "section missing"))?;
    let a = load_ensemble(cfg, &cfg.model, ENSEMBLE)?;
    let b = match &cfg.reference {
        Some(r) => load_ensemble(cfg, r, REFERENCE)?,
        None => a.clone(),
    };
    if !a.geometry().approx_eq(b.geometry()) {
        return Err(Error::config("reference", "ensembles live on different grids"));
    }
    let basis = GridBasis::dct(*a.geometry(), lc.basis_functions)?;
    let cmp = law_recovery::compare_laws(&a, &b, lc.k_max, &basis, lc.j_max)?;
    let reports = cfg.output.join("reports");
    let mut text = cmp.to_text();
    if lc.exp_a > 0.0 {
        for (name, e) in [(ENSEMBLE, &a), (REFERENCE, &b)] {
            let est = law_recovery::exp_moment_estimate(e, lc.exp_a)?;
            text.push_str(&format!(
                "exp moment {name}: E exp({} |V|) = {:.6e} +- {:.2e}{}\n",
                est.a,
                est.mean,
                est.stderr,
                if est.overflow { " (overflow)" } else { "" }
            ));
        }
    }
    let mut csv = create(&reports.join("laws.csv"))?;
    cmp.write_csv(&mut csv)?;
    csv.flush()?;

    match (finest_moment(cfg, 1)?, finest_moment(cfg, 2)?) {
        (Some(m1), Some(m2)) => {
            let probes = if lc.probes.is_empty() { default_probes(cfg.grid.dim, m1.support_radius) } else { lc.probes.clone() };
            let est = law_recovery::gaussian_law_from_moments(&m1, &m2, &probes)?;
            let dir = cfg.output.join("law");
            formats::write_grid(&dir.join("gaussian_mean.mtg"), &est.mean)?;
            let mut out = create(&dir.join("covariance.csv"))?;
            est.write_matrix_csv(&mut out)?;
            out.flush()?;
            let check = law_recovery::resampling_check(&est, lc.resamples, cfg.stream_seed("laws.resample"))?;
            text.push_str(&format!(
                "gaussian law at {} probes: clipped mass {:.3e}{}; resampling max z {:.2}\n",
                probes.len(),
                est.clipped_mass,
                if est.unreliable { " (unreliable)" } else { "" },
                check.max_z
            ));
        }
        _ => text.push_str("gaussian law: skipped, reconstructions of M1 and M2 not found\n"),
    }
    write_text(&reports.join("laws.txt"), &text)
}

pub fn validate_wave(cfg: &ExperimentConfig) -> Result<()> {
    let wc = cfg.wave.as_ref().ok_or_else(|| Error::config("wave", "section missing"))?;
    let p = wc.potential()?;
    let sweep = wave::jump_sweep(&p, &wc.pulse_widths, wc.cells_per_width, wc.direction)?;
    let mut text = sweep.to_text();
    let agree = sweep.relative_error() <= 0.02 || (sweep.target == 0.0 && sweep.extrapolated.abs() <= 1e-12);
    text.push_str(&format!("agreement within 2%: {}\n", if agree { "yes" } else { "no" }));
    write_text(&cfg.output.join("reports").join("wave.txt"), &text)?;

    let width = *wc.pulse_widths.last().expect("validated non-empty");
    let pulse = PulseSpec::new(width, wc.direction)?;
    let grid = WaveGrid::for_potential(&p, &pulse, width / wc.cells_per_width as f64, wc.courant)?;
    let field = wave::fdtd_solve(&p, &pulse, &grid)?;
    let mut out = create(&cfg.output.join("wave").join("trace.csv"))?;
    field.write_trace_csv(&mut out, WaveGrid::default_detector(&p, &pulse))?;
    out.flush()?;
    Ok(())
}

pub fn all(cfg: &ExperimentConfig) -> Result<()> {
    synth(cfg)?;
    if cfg.forward.is_some() {
        forward(cfg)?;
    }
    if cfg.reconstruct.is_some() {
        reconstruct(cfg)?;
    }
    if cfg.laws.is_some() {
        laws(cfg)?;
    }
    if cfg.wave.is_some() {
        validate_wave(cfg)?;
    }
    Ok(())
}
