//! On-disk formats: binary grids, data sets and sinograms, key=value
//! manifests, grayscale images and CSV tables.
//!
//! All binary formats are little-endian: an 8-byte magic, a fixed header of
//! `u64` counts and `f64` parameters, then raw `f64` arrays. Decoders work on
//! byte slices and check every length against the remaining input before
//! allocating, so truncated or hostile files fail with [`Error::Format`].

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::correlation_data::{DataBank, DataSet, DirectionTuple, OffsetGrid};
use crate::error::{Error, Result};
use crate::field_models::{Ensemble, FieldModel, PotentialGrid};
use crate::grid::{Geometry, Grid};
use crate::moment::MomentGrid;
use crate::reconstruction::{Sinogram, SphereQuadrature};
use crate::xray::Direction;

pub const GRID_MAGIC: &[u8; 8] = b"MTGRID01";
pub const DATA_MAGIC: &[u8; 8] = b"MTDATA01";
pub const SINO_MAGIC: &[u8; 8] = b"MTSINO01";

/// Upper bound on any count read from a header.
const MAX_COUNT: u64 = 1 << 32;

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
    format: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], magic: &[u8; 8], format: &'static str) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != magic {
            return Err(Error::format(format, "bad magic"));
        }
        let mut cur = Cursor::new(bytes);
        cur.set_position(8);
        Ok(Reader { cur, format })
    }

    fn remaining(&self) -> usize {
        self.cur.get_ref().len() - self.cur.position() as usize
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let v = self.cur.read_u64::<LittleEndian>().map_err(|_| Error::format(self.format, format!("truncated at {what}")))?;
        if v > MAX_COUNT {
            return Err(Error::format(self.format, format!("{what} = {v} is implausibly large")));
        }
        Ok(v)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let v = self.cur.read_f64::<LittleEndian>().map_err(|_| Error::format(self.format, format!("truncated at {what}")))?;
        if !v.is_finite() {
            return Err(Error::format(self.format, format!("{what} is not finite")));
        }
        Ok(v)
    }

    fn array(&mut self, len: usize, what: &str) -> Result<Vec<f64>> {
        if len.checked_mul(8).is_none_or(|b| b > self.remaining()) {
            return Err(Error::format(self.format, format!("{what}: need {len} values, file too short")));
        }
        let mut out = vec![0.0; len];
        self.cur
            .read_f64_into::<LittleEndian>(&mut out)
            .map_err(|_| Error::format(self.format, format!("truncated in {what}")))?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(self.format, format!("{what} contains non-finite values")));
        }
        Ok(out)
    }

    fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::format(self.format, format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

fn geometry_checked(dim: u64, points: u64, extent: f64, format: &'static str) -> Result<Geometry> {
    Geometry::new(dim as usize, extent, points as usize).map_err(|e| Error::format(format, e.to_string()))
}

pub fn encode_grid(grid: &Grid) -> Vec<u8> {
    let g = grid.geometry();
    let mut out = Vec::with_capacity(32 + 8 * grid.values().len());
    out.extend_from_slice(GRID_MAGIC);
    out.write_u64::<LittleEndian>(g.dim as u64).expect("vec write");
    out.write_u64::<LittleEndian>(g.points as u64).expect("vec write");
    out.write_f64::<LittleEndian>(g.extent).expect("vec write");
    for v in grid.values() {
        out.write_f64::<LittleEndian>(*v).expect("vec write");
    }
    out
}

pub fn decode_grid(bytes: &[u8]) -> Result<Grid> {
    let mut r = Reader::new(bytes, GRID_MAGIC, "grid")?;
    let dim = r.u64("dim")?;
    let points = r.u64("points_per_axis")?;
    let extent = r.f64("extent")?;
    let g = geometry_checked(dim, points, extent, "grid")?;
    let values = r.array(g.len(), "values")?;
    r.finish()?;
    Grid::from_values(g, values)
}

pub fn write_grid(path: &Path, grid: &Grid) -> Result<()> {
    write_atomic(path, &encode_grid(grid))
}

pub fn read_grid(path: &Path) -> Result<Grid> {
    decode_grid(&fs::read(path)?)
}

/// Writes through a temporary file and renames, so readers never see partial output.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Plain-text `key = value` lines; `#` starts a comment. Order is preserved.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Self {
        Manifest::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &'static str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::format("manifest", format!("missing key `{key}`")))
    }

    pub fn parse_value<T: std::str::FromStr>(&self, key: &'static str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse().map_err(|_| Error::format("manifest", format!("key `{key}`: cannot parse `{raw}`")))
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::format("manifest", format!("line {}: expected key = value", lineno + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(Error::format("manifest", format!("line {}: bad key `{k}`", lineno + 1)));
            }
            if m.get(k).is_some() {
                return Err(Error::format("manifest", format!("line {}: duplicate key `{k}`", lineno + 1)));
            }
            m.entries.push((k.to_string(), v.to_string()));
        }
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Manifest::parse(&fs::read_to_string(path)?)
    }
}

fn manifest_path(grid_path: &Path) -> PathBuf {
    let mut s = grid_path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

/// Moment map: grid file plus `<file>.manifest` carrying k, n, ε, support.
pub fn write_moment(path: &Path, m: &MomentGrid) -> Result<()> {
    write_grid(path, &m.grid)?;
    let mut man = Manifest::new();
    man.set("kind", "moment")
        .set("order", m.order)
        .set("slot_dim", m.slot_dim)
        .set("epsilon", format!("{:e}", m.epsilon))
        .set("support_radius", format!("{:e}", m.support_radius));
    man.write(&manifest_path(path))
}

pub fn read_moment(path: &Path) -> Result<MomentGrid> {
    let grid = read_grid(path)?;
    let man = Manifest::read(&manifest_path(path))?;
    if man.get("kind") != Some("moment") {
        return Err(Error::format("manifest", "not a moment manifest"));
    }
    MomentGrid::new(
        grid,
        man.parse_value("order")?,
        man.parse_value("slot_dim")?,
        man.parse_value("epsilon")?,
        man.parse_value("support_radius")?,
    )
}

/// Header: magic, k, n, k·n direction components, per-slot (extent, points),
/// count, seed, support radius; then values and standard errors.
pub fn encode_dataset(d: &DataSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 16 * d.values.len());
    out.extend_from_slice(DATA_MAGIC);
    let w = &mut out;
    w.write_u64::<LittleEndian>(d.order() as u64).expect("vec write");
    w.write_u64::<LittleEndian>(d.dim() as u64).expect("vec write");
    for t in d.tuple.directions() {
        for c in t.as_slice() {
            w.write_f64::<LittleEndian>(*c).expect("vec write");
        }
    }
    for g in &d.offsets {
        w.write_f64::<LittleEndian>(g.extent).expect("vec write");
        w.write_u64::<LittleEndian>(g.points as u64).expect("vec write");
    }
    w.write_u64::<LittleEndian>(d.count).expect("vec write");
    w.write_u64::<LittleEndian>(d.seed).expect("vec write");
    w.write_f64::<LittleEndian>(d.support_radius).expect("vec write");
    for v in d.values.iter().chain(&d.stderr) {
        w.write_f64::<LittleEndian>(*v).expect("vec write");
    }
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<DataSet> {
    const F: &str = "dataset";
    let mut r = Reader::new(bytes, DATA_MAGIC, F)?;
    let k = r.u64("k")? as usize;
    let n = r.u64("n")? as usize;
    if k == 0 || n < 2 || k > 16 || n > 16 {
        return Err(Error::format(F, format!("unsupported k = {k}, n = {n}")));
    }
    let comps = r.array(k * n, "directions")?;
    let dirs = comps
        .chunks(n)
        .map(|c| Direction::new(c.to_vec()))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::format(F, e.to_string()))?;
    let tuple = DirectionTuple::new(dirs).map_err(|e| Error::format(F, e.to_string()))?;
    let mut offsets = Vec::with_capacity(k);
    let mut len: usize = 1;
    for _ in 0..k {
        let extent = r.f64("offset extent")?;
        let points = r.u64("offset points")? as usize;
        let g = OffsetGrid::new(extent, points).map_err(|e| Error::format(F, e.to_string()))?;
        len = points
            .checked_pow((n - 1) as u32)
            .and_then(|p| len.checked_mul(p))
            .ok_or_else(|| Error::format(F, "data set too large"))?;
        offsets.push(g);
    }
    let count = r.u64("count")?;
    let seed = r.cur.read_u64::<LittleEndian>().map_err(|_| Error::format(F, "truncated at seed"))?;
    let support = r.f64("support_radius")?;
    let values = r.array(len, "values")?;
    let stderr = r.array(len, "standard errors")?;
    r.finish()?;
    DataSet::new(tuple, offsets, values, stderr, count, seed, support).map_err(|e| Error::format(F, e.to_string()))
}

pub fn write_dataset(path: &Path, d: &DataSet) -> Result<()> {
    write_atomic(path, &encode_dataset(d))
}

pub fn read_dataset(path: &Path) -> Result<DataSet> {
    decode_dataset(&fs::read(path)?)
}

/// CSV rows `y{slot}_{axis}…,value,stderr`, one per stored offset; meant for `k ≤ 2`.
pub fn write_dataset_csv<W: Write>(d: &DataSet, mut out: W) -> Result<()> {
    let axes = d.dim() - 1;
    let mut header = Vec::new();
    for j in 0..d.order() {
        for a in 0..axes {
            header.push(format!("y{j}_{a}"));
        }
    }
    writeln!(out, "{},value,stderr", header.join(","))?;
    let sizes: Vec<usize> = d.offsets.iter().flat_map(|g| std::iter::repeat_n(g.points, axes)).collect();
    let grids: Vec<&OffsetGrid> = d.offsets.iter().flat_map(|g| std::iter::repeat_n(g, axes)).collect();
    let mut idx = vec![0usize; sizes.len()];
    for (flat, (v, e)) in d.values.iter().zip(&d.stderr).enumerate() {
        let mut rem = flat;
        for a in (0..sizes.len()).rev() {
            idx[a] = rem % sizes[a];
            rem /= sizes[a];
        }
        let coords: Vec<String> = idx.iter().zip(&grids).map(|(i, g)| format!("{:.8e}", g.coord(*i))).collect();
        writeln!(out, "{},{v:.12e},{e:.6e}", coords.join(","))?;
    }
    Ok(())
}

/// A directory of data set files `data_NNNNN.mtd` with a manifest.
pub fn write_bank(dir: &Path, sets: &[Arc<DataSet>]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut man = Manifest::new();
    man.set("kind", "dataset-bank").set("sets", sets.len());
    if let Some(first) = sets.first() {
        man.set("order", first.order()).set("slot_dim", first.dim()).set("count", first.count).set("seed", first.seed);
    }
    for (i, s) in sets.iter().enumerate() {
        write_dataset(&dir.join(format!("data_{i:05}.mtd")), s)?;
    }
    man.write(&dir.join("manifest.txt"))
}

pub fn read_bank(dir: &Path) -> Result<DataBank> {
    let man = Manifest::read(&dir.join("manifest.txt"))?;
    if man.get("kind") != Some("dataset-bank") {
        return Err(Error::format("manifest", "not a data set bank"));
    }
    let sets: usize = man.parse_value("sets")?;
    let mut bank = DataBank::new();
    for i in 0..sets {
        bank.insert(read_dataset(&dir.join(format!("data_{i:05}.mtd")))?)?;
    }
    Ok(bank)
}

/// Header: magic, d, k, N_r, r_max, support radius, N_η, then per direction
/// its `d` components and weight, then the `N_r × N_η` values.
pub fn encode_sinogram(s: &Sinogram) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(SINO_MAGIC);
    let w = &mut out;
    w.write_u64::<LittleEndian>(s.dim() as u64).expect("vec write");
    w.write_u64::<LittleEndian>(s.order as u64).expect("vec write");
    w.write_u64::<LittleEndian>(s.n_r as u64).expect("vec write");
    w.write_f64::<LittleEndian>(s.r_max).expect("vec write");
    w.write_f64::<LittleEndian>(s.support_radius).expect("vec write");
    w.write_u64::<LittleEndian>(s.directions.count() as u64).expect("vec write");
    for m in 0..s.directions.count() {
        for c in s.directions.point(m) {
            w.write_f64::<LittleEndian>(*c).expect("vec write");
        }
        w.write_f64::<LittleEndian>(s.directions.weights[m]).expect("vec write");
    }
    for v in &s.values {
        w.write_f64::<LittleEndian>(*v).expect("vec write");
    }
    out
}

pub fn decode_sinogram(bytes: &[u8]) -> Result<Sinogram> {
    const F: &str = "sinogram";
    let mut r = Reader::new(bytes, SINO_MAGIC, F)?;
    let d = r.u64("d")? as usize;
    let k = r.u64("k")? as usize;
    let n_r = r.u64("N_r")? as usize;
    let r_max = r.f64("r_max")?;
    let support = r.f64("support_radius")?;
    let n_eta = r.u64("N_eta")? as usize;
    if d == 0 || k == 0 || !d.is_multiple_of(k) || d > 64 {
        return Err(Error::format(F, format!("d = {d} is not a multiple of k = {k}")));
    }
    if n_r < 2 || !n_r.is_power_of_two() || n_eta == 0 {
        return Err(Error::format(F, "N_r must be a power of two and N_eta positive"));
    }
    let table = r.array(n_eta.checked_mul(d + 1).ok_or_else(|| Error::format(F, "table too large"))?, "direction table")?;
    let mut points = Vec::with_capacity(n_eta * d);
    let mut weights = Vec::with_capacity(n_eta);
    for row in table.chunks(d + 1) {
        points.extend_from_slice(&row[..d]);
        weights.push(row[d]);
    }
    let directions = SphereQuadrature::from_points(d, points, weights).map_err(|e| Error::format(F, e.to_string()))?;
    let values = r.array(n_r.checked_mul(n_eta).ok_or_else(|| Error::format(F, "too many values"))?, "values")?;
    r.finish()?;
    if !(r_max > 0.0) || !(support >= 0.0) {
        return Err(Error::format(F, "r_max must be positive"));
    }
    Ok(Sinogram { order: k, slot_dim: d / k, r_max, n_r, directions, values, support_radius: support, truncations: 0 })
}

pub fn write_sinogram(path: &Path, s: &Sinogram) -> Result<()> {
    write_atomic(path, &encode_sinogram(s))
}

pub fn read_sinogram(path: &Path) -> Result<Sinogram> {
    decode_sinogram(&fs::read(path)?)
}

/// Ensemble directory: `sample_NNNNN.mtg` per realisation plus `manifest.txt`
/// with the extra model keys given by the caller.
pub fn write_ensemble(dir: &Path, e: &Ensemble, model_keys: &Manifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut man = Manifest::new();
    man.set("kind", "ensemble").set("seed", e.seed).set("count", e.count());
    let g = e.geometry();
    man.set("dim", g.dim).set("points_per_axis", g.points).set("extent", format!("{:e}", g.extent));
    man.set("support_radius", format!("{:e}", e.support_radius()));
    for (k, v) in model_keys.entries() {
        man.set(k, v);
    }
    for (i, s) in e.samples.iter().enumerate() {
        write_grid(&dir.join(format!("sample_{i:05}.mtg")), s.grid())?;
    }
    man.write(&dir.join("manifest.txt"))
}

pub fn read_ensemble_manifest(dir: &Path) -> Result<Manifest> {
    let man = Manifest::read(&dir.join("manifest.txt"))?;
    if man.get("kind") != Some("ensemble") {
        return Err(Error::format("manifest", "not an ensemble manifest"));
    }
    Ok(man)
}

/// Loads the realisations written by [`write_ensemble`], attaching `model`.
pub fn read_ensemble(dir: &Path, model: Arc<FieldModel>) -> Result<Ensemble> {
    let man = read_ensemble_manifest(dir)?;
    let count: usize = man.parse_value("count")?;
    let seed: u64 = man.parse_value("seed")?;
    let support: f64 = man.parse_value("support_radius")?;
    let samples = (0..count)
        .map(|i| PotentialGrid::new(read_grid(&dir.join(format!("sample_{i:05}.mtg")))?, support))
        .collect::<Result<Vec<_>>>()?;
    Ensemble::from_samples(model, seed, samples)
}

/// Binary PGM (P5) of a 2D grid, linearly scaled from `lo` (black) to `hi`
/// (white). Rows run along the first axis, top row at its largest coordinate.
pub fn encode_pgm(grid: &Grid, lo: f64, hi: f64) -> Result<Vec<u8>> {
    if grid.dim() != 2 {
        return Err(Error::param("image", "grayscale images need a 2D slice"));
    }
    let p = grid.points();
    let mut out = format!("P5\n{p} {p}\n255\n").into_bytes();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let v = grid.values();
    for row in (0..p).rev() {
        for col in 0..p {
            let x = ((v[row * p + col] - lo) / span).clamp(0.0, 1.0);
            out.push((x * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn write_pgm(path: &Path, grid: &Grid) -> Result<()> {
    let (lo, hi) = grid.values().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    write_atomic(path, &encode_pgm(grid, lo, hi)?)
}

/// `x0,…,value` rows for every node.
pub fn write_grid_csv<W: Write>(grid: &Grid, mut out: W) -> Result<()> {
    let g = grid.geometry();
    let header: Vec<String> = (0..g.dim).map(|a| format!("x{a}")).collect();
    writeln!(out, "{},value", header.join(","))?;
    let mut x = vec![0.0; g.dim];
    for (i, v) in grid.values().iter().enumerate() {
        g.node(i, &mut x);
        let coords: Vec<String> = x.iter().map(|c| format!("{c:.8e}")).collect();
        writeln!(out, "{},{:.12e}", coords.join(","), v)?;
    }
    Ok(())
}

/// 2D slice of a moment map: the first two axes vary, the rest sit at the
/// node nearest `fixed` (one value per remaining axis).
pub fn moment_slice(m: &MomentGrid, fixed: &[f64]) -> Result<Grid> {
    let g = *m.grid.geometry();
    if g.dim < 2 || fixed.len() != g.dim - 2 {
        return Err(Error::param("slice", format!("need {} fixed coordinates", g.dim.saturating_sub(2))));
    }
    let h = g.spacing();
    let idx: Vec<usize> = fixed.iter().map(|c| (((c + g.extent) / h).round().max(0.0) as usize).min(g.points - 1)).collect();
    let mut tail = 0usize;
    for i in &idx {
        tail = tail * g.points + i;
    }
    let stride = g.points.pow((g.dim - 2) as u32);
    let slice = Geometry::new(2, g.extent, g.points)?;
    let values = (0..slice.len()).map(|j| m.grid.values()[j * stride + tail]).collect();
    Grid::from_values(slice, values)
}

/// Reads a whole file into memory with a size cap.
pub fn read_capped(path: &Path, cap: u64) -> Result<Vec<u8>> {
    let f = fs::File::open(path)?;
    let mut buf = Vec::new();
    f.take(cap + 1).read_to_end(&mut buf)?;
    if buf.len() as u64 > cap {
        return Err(Error::format("file", format!("{} exceeds {cap} bytes", path.display())));
    }
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_grid() -> Grid {
        Grid::from_fn(Geometry::new(2, 1.5, 5).unwrap(), |x| x[0] - 2.0 * x[1])
    }

    #[test]
    fn grid_round_trip_and_layout() {
        let g = sample_grid();
        let bytes = encode_grid(&g);
        assert_eq!(&bytes[..8], b"MTGRID01");
        assert_eq!(bytes.len(), 32 + 8 * 25);
        assert_eq!(decode_grid(&bytes).unwrap(), g);
    }

    #[test]
    fn corrupt_grids_are_rejected() {
        let bytes = encode_grid(&sample_grid());
        assert!(matches!(decode_grid(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_grid(&extra).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_grid(&bad).is_err());
        let mut huge = bytes.clone();
        huge[16..24].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode_grid(&huge).is_err());
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let mut m = Manifest::new();
        m.set("seed", 7).set("model", "gaussian").set("seed", 8);
        let back = Manifest::parse(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.parse_value::<u64>("seed").unwrap(), 8);
        assert!(Manifest::parse("a = 1\na = 2").is_err());
        assert!(Manifest::parse("no equals sign").is_err());
        assert!(Manifest::parse("# comment\n\n x = y z ").unwrap().get("x") == Some("y z"));
    }

    #[test]
    fn dataset_round_trip() {
        let tuple = DirectionTuple::new(vec![Direction::planar(0.3), Direction::planar(1.1)]).unwrap();
        let offsets = vec![OffsetGrid::new(1.0, 4).unwrap(), OffsetGrid::new(0.5, 3).unwrap()];
        let values: Vec<f64> = (0..12).map(|i| i as f64 * 0.5).collect();
        let stderr: Vec<f64> = (0..12).map(|i| i as f64 * 0.01).collect();
        let d = DataSet::new(tuple, offsets, values, stderr, 99, 1234, 0.8).unwrap();
        let back = decode_dataset(&encode_dataset(&d)).unwrap();
        let mut csv = Vec::new();
        write_dataset_csv(&d, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 13);
        assert!(text.starts_with("y0_0,y1_0,value,stderr\n-1.00000000e0,-5.00000000e-1,0.0"));
        assert_eq!(back.values, d.values);
        assert_eq!(back.stderr, d.stderr);
        assert_eq!(back.tuple.key(), d.tuple.key());
        assert_eq!((back.count, back.seed, back.support_radius), (99, 1234, 0.8));
        let bytes = encode_dataset(&d);
        assert!(decode_dataset(&bytes[..bytes.len() - 8]).is_err());
    }

    #[test]
    fn sinogram_round_trip() {
        let s = Sinogram::from_fn(1, 2, 1.0, 8, SphereQuadrature::circle(6), 0.7, |r, e| r * e[0]).unwrap();
        let back = decode_sinogram(&encode_sinogram(&s)).unwrap();
        assert_eq!(back.values, s.values);
        assert_eq!(back.directions, s.directions);
        assert_eq!((back.order, back.slot_dim, back.n_r), (1, 2, 8));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = MomentGrid::new(sample_grid(), 1, 2, 0.25, 1.0).unwrap();
        let path = dir.path().join("m1.mtg");
        write_moment(&path, &m).unwrap();
        let back = read_moment(&path).unwrap();
        assert_eq!(back.grid, m.grid);
        assert_eq!(back.epsilon, 0.25);
        write_pgm(&dir.path().join("m1.pgm"), &m.grid).unwrap();
        let pgm = fs::read(dir.path().join("m1.pgm")).unwrap();
        assert!(pgm.starts_with(b"P5\n5 5\n255\n"));
        assert_eq!(pgm.len(), 11 + 25);
    }

    #[test]
    fn slices_pick_the_nearest_plane() {
        let g = Geometry::new(4, 1.0, 3).unwrap();
        let m = MomentGrid::new(Grid::from_fn(g, |x| x[0] + 10.0 * x[3]), 2, 2, 0.0, 1.0).unwrap();
        let s = moment_slice(&m, &[0.0, 1.0]).unwrap();
        assert_eq!(s.values()[0], -1.0 + 10.0);
    }
}
