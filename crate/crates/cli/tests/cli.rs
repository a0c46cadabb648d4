use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use tempfile::TempDir;

const GAUSSIAN: &str = r#"
seed = 5
[grid]
dim = 2
points = 40
extent = 1.0
[model]
kind = "gaussian"
count = 6
length_scale = 0.3
cutoff_radius = 0.5
taper_width = 0.2
[forward]
orders = [1, 2]
offset_points = 24
[reconstruct]
directions = 32
radii = 64
output_points = 8
epsilons = [0.6, 0.45]
"#;

fn disk(law: &str) -> String {
    format!(
        r#"
seed = 1
[grid]
dim = 2
points = 128
extent = 1.0
[model]
kind = "finite-rank"
count = 1
cutoff_radius = 0.7
taper_width = 0.1
modes = [{{ shape = {{ kind = "disk", radius = 0.6 }}, law = {law} }}]
[forward]
orders = [1]
offset_points = 129
offset_extent = 0.9
[reconstruct]
directions = 256
radii = 128
r_max = 0.9
output_points = 64
output_extent = 0.9
epsilons = [0.12]
"#
    )
}

const WAVE: &str = r#"
[wave]
potential = "box"
amplitude = 0.1
width = 0.5
pulse_widths = [0.08, 0.04]
"#;

struct Run {
    code: i32,
    stderr: String,
}

fn setup(config: &str) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("experiment.toml");
    fs::write(&path, config).unwrap();
    (dir, path)
}

fn run(config: &Path, out: &Path, args: &[&str]) -> Run {
    let o = Command::new(env!("CARGO_BIN_EXE_corrtomo"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    Run { code: o.status.code().unwrap_or(-1), stderr: String::from_utf8_lossy(&o.stderr).into_owned() }
}

fn checksums(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn csv_rows(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect()
}

#[test]
fn synth_writes_every_realisation_and_reruns_identically() {
    let (dir, cfg) = setup(GAUSSIAN);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run(&cfg, &a, &["synth"]).code, 0);
    let files = fs::read_dir(a.join("ensemble")).unwrap().count();
    assert_eq!(files, 6 + 1);
    assert_eq!(run(&cfg, &b, &["synth", "--threads", "1"]).code, 0);
    assert_eq!(checksums(&a), checksums(&b));
    let c = dir.path().join("c");
    assert_eq!(run(&cfg, &c, &["synth", "--seed", "6"]).code, 0);
    assert_ne!(checksums(&a), checksums(&c));
}

#[test]
fn validation_failures_exit_with_two_and_name_the_key() {
    let (dir, cfg) = setup(&GAUSSIAN.replace("count = 6", "count = 0"));
    let r = run(&cfg, &dir.path().join("o"), &["synth"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("model.count"), "{}", r.stderr);
    assert!(!dir.path().join("o").exists());

    let (dir, cfg) = setup(&GAUSSIAN.replace("radii = 64", "radii = 16"));
    let r = run(&cfg, &dir.path().join("o"), &["reconstruct"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("Nyquist"), "{}", r.stderr);

    let (dir, cfg) = setup(&format!("{GAUSSIAN}{}", WAVE.replace("width = 0.5", "width = 0.5\ncourant = 1.5")));
    let r = run(&cfg, &dir.path().join("o"), &["validate-wave"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("wave.courant"), "{}", r.stderr);

    let (dir, cfg) = setup(&format!("{GAUSSIAN}speed = 3\n"));
    assert_eq!(run(&cfg, &dir.path().join("o"), &["synth"]).code, 2);
}

#[test]
fn missing_inputs_are_validation_errors_and_io_failures_exit_one() {
    let (dir, cfg) = setup(GAUSSIAN);
    let r = run(&cfg, &dir.path().join("o"), &["forward"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("synth"), "{}", r.stderr);
    let r = run(&dir.path().join("missing.toml"), &dir.path().join("o"), &["synth"]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("missing.toml"), "{}", r.stderr);
    // output path blocked by a regular file
    let blocker = dir.path().join("blocker");
    fs::write(&blocker, b"x").unwrap();
    assert_eq!(run(&cfg, &blocker, &["synth"]).code, 1);
}

#[test]
fn corrupt_data_files_are_rejected() {
    let (dir, cfg) = setup(GAUSSIAN);
    let out = dir.path().join("o");
    assert_eq!(run(&cfg, &out, &["synth"]).code, 0);
    assert_eq!(run(&cfg, &out, &["forward"]).code, 0);
    let f = out.join("data/k1/data_00003.mtd");
    let bytes = fs::read(&f).unwrap();
    fs::write(&f, &bytes[..bytes.len() / 2]).unwrap();
    let r = run(&cfg, &out, &["reconstruct"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("dataset"), "{}", r.stderr);
}

#[test]
fn zero_ensemble_gives_zero_data_and_zero_moments() {
    let (dir, cfg) = setup(&disk("{ kind = \"constant\", value = 0.0 }").replace("points = 128", "points = 64"));
    let out = dir.path().join("o");
    assert_eq!(run(&cfg, &out, &["all"]).code, 0);
    let rows = csv_rows(&out.join("data/k1/data_00000.csv"));
    assert!(rows.iter().all(|r| r[1] == 0.0 && r[2] == 0.0));
    let summary = csv_rows(&out.join("reports/reconstruct.csv"));
    assert!(summary.iter().all(|r| r[2] == 0.0 && r[3] == 0.0));
}

#[test]
fn disk_data_matches_chords_and_reconstruction_plateau() {
    let (dir, cfg) = setup(&disk("{ kind = \"constant\", value = 1.0 }"));
    let out = dir.path().join("o");
    let r = run(&cfg, &out, &["all"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    // first-order data are half the chord length 2√(r² - y²)
    for row in csv_rows(&out.join("data/k1/data_00000.csv")) {
        let y: f64 = row[0];
        if y.abs() < 0.5 {
            let chord = (0.36 - y * y).sqrt();
            assert!((row[1] - chord).abs() < 5e-3 * chord, "y = {y}: {} vs {chord}", row[1]);
        }
    }
    let summary = csv_rows(&out.join("reports/reconstruct.csv"));
    assert!((summary[0][2] - 1.0).abs() < 0.05, "plateau {}", summary[0][2]);
    let pgm = fs::read(out.join("images/m1_e0.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n64 64\n255\n"));
    assert_eq!(pgm.len(), 13 + 64 * 64);
    assert_eq!(csv_rows(&out.join("images/m1_e0.csv")).len(), 64 * 64);
}

#[test]
fn identical_ensembles_are_indistinguishable() {
    let cfg_text = format!("{GAUSSIAN}[laws]\nk_max = 3\n");
    let (dir, cfg) = setup(&cfg_text);
    let out = dir.path().join("o");
    assert_eq!(run(&cfg, &out, &["synth"]).code, 0);
    assert_eq!(run(&cfg, &out, &["laws"]).code, 0);
    let report = fs::read_to_string(out.join("reports/laws.txt")).unwrap();
    assert!(report.contains("indistinguishable up to k = 3"), "{report}");
    assert!(report.contains("1,0.000000e0"), "{report}");
    assert!(report.contains("gaussian law: skipped"));
}

#[test]
fn rademacher_and_gaussian_coefficients_split_at_fourth_order() {
    let model = |section: &str, law: &str| {
        format!(
            "[{section}]\nkind = \"finite-rank\"\ncount = 3000\ncutoff_radius = 0.6\ntaper_width = 0.2\n\
             modes = [{{ shape = {{ kind = \"bump\", center = [0.1, 0.0], radius = 0.4 }}, law = {law} }}]\n"
        )
    };
    let text = format!(
        "seed = 3\n[grid]\ndim = 2\npoints = 24\nextent = 1.0\n{}{}[laws]\nk_max = 4\nbasis_functions = 3\nj_max = 2\n",
        model("model", "{ kind = \"rademacher\" }"),
        model("reference", "{ kind = \"normal\", mean = 0.0, std = 1.0 }")
    );
    let (dir, cfg) = setup(&text);
    let out = dir.path().join("o");
    assert_eq!(run(&cfg, &out, &["synth"]).code, 0);
    let r = run(&cfg, &out, &["laws"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let report = fs::read_to_string(out.join("reports/laws.txt")).unwrap();
    assert!(report.contains("distinguished at k = 4"), "{report}");
}

#[test]
fn wave_validation_reports_agreement() {
    let (dir, cfg) = setup(&format!("{GAUSSIAN}{WAVE}"));
    let out = dir.path().join("o");
    assert_eq!(run(&cfg, &out, &["validate-wave"]).code, 0);
    let report = fs::read_to_string(out.join("reports/wave.txt")).unwrap();
    assert!(report.contains("agreement within 2%: yes"), "{report}");
    assert!(out.join("wave/trace.csv").is_file());

    let (dir, cfg) = setup(&format!("{GAUSSIAN}{}", WAVE.replace("\"box\"", "\"zero\"")));
    let out = dir.path().join("o");
    assert_eq!(run(&cfg, &out, &["validate-wave"]).code, 0);
    let report = fs::read_to_string(out.join("reports/wave.txt")).unwrap();
    assert!(report.contains("extrapolated plateau 0.0000000000e0"), "{report}");
}
