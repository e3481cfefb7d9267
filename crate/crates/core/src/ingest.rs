//! Cohorts of per-ROI time series: loading, synthesis, view slicing and
//! stratified splitting.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Number of personal-characteristic values per patient: age, gender,
/// handedness, IQ measure, verbal IQ, performance IQ, full4 IQ.
pub const PCD_LEN: usize = 7;

pub const DEFAULT_MIN_WINDOW: usize = 30;

/// `T x R` matrix of finite samples, one row per timepoint.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiTimeSeries {
    values: Matrix,
}

impl RoiTimeSeries {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.ncols() < 2 {
            return Err(Error::invalid(format!(
                "time series needs at least 2 ROIs, got {}",
                values.ncols()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            let (r, c) = (k % values.nrows(), k / values.nrows());
            return Err(Error::NonFinite(format!(
                "time series value at row {r}, column {c}"
            )));
        }
        Ok(Self { values })
    }

    pub fn timepoints(&self) -> usize {
        self.values.nrows()
    }

    pub fn rois(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    pub series: RoiTimeSeries,
    pub pcd: [f64; PCD_LEN],
    pub label: u8,
    pub site: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    patients: Vec<PatientRecord>,
    roi_count: usize,
}

impl Cohort {
    /// Validates shared ROI count, unique ids and binary labels.
    pub fn new(patients: Vec<PatientRecord>) -> Result<Self> {
        let first = patients.first().ok_or(Error::EmptyCohort)?;
        let roi_count = first.series.rois();
        let mut seen = HashSet::new();
        for p in &patients {
            if !seen.insert(p.id.as_str()) {
                return Err(Error::Patient {
                    patient: p.id.clone(),
                    message: "duplicate id".into(),
                });
            }
            if p.series.rois() != roi_count {
                return Err(Error::Patient {
                    patient: p.id.clone(),
                    message: format!("has {} ROIs, cohort has {roi_count}", p.series.rois()),
                });
            }
            if p.label > 1 {
                return Err(Error::Patient {
                    patient: p.id.clone(),
                    message: format!("label {} not in {{0,1}}", p.label),
                });
            }
        }
        Ok(Self {
            patients,
            roi_count,
        })
    }

    pub fn patients(&self) -> &[PatientRecord] {
        &self.patients
    }

    pub fn roi_count(&self) -> usize {
        self.roi_count
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.patients.iter().map(|p| p.label).collect()
    }

    pub fn indices_in(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.patients[i].split == split)
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    csv: PathBuf,
    pcd: Vec<f64>,
    label: i64,
    site: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    roi_count: usize,
    patients: Vec<ManifestEntry>,
}

/// Parses a headerless CSV of `T` rows by `roi_count` columns.
pub fn read_series_csv(path: &Path, roi_count: usize, patient: &str) -> Result<RoiTimeSeries> {
    let fail = |message: String| Error::Patient {
        patient: patient.to_string(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| fail(format!("{}: {e}", path.display())))?;
    let mut data = Vec::new();
    let mut rows = 0;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| fail(format!("{} row {row}: {e}", path.display())))?;
        if record.len() != roi_count {
            return Err(fail(format!(
                "{} row {row}: ragged row with {} columns, expected {roi_count}",
                path.display(),
                record.len()
            )));
        }
        for (col, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                fail(format!(
                    "{} row {row}, column {col}: cannot parse `{field}`",
                    path.display()
                ))
            })?;
            if !v.is_finite() {
                return Err(fail(format!(
                    "{} row {row}, column {col}: non-finite value `{field}`",
                    path.display()
                )));
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(fail(format!("{}: no rows", path.display())));
    }
    RoiTimeSeries::new(Matrix::from_row_slice(rows, roi_count, &data)).map_err(|e| fail(e.to_string()))
}

/// Loads a cohort manifest. CSV paths are resolved relative to the manifest.
pub fn load_cohort(manifest_path: &Path) -> Result<Cohort> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: manifest_path.to_path_buf(),
        message: e.to_string(),
    })?;
    if manifest.patients.is_empty() {
        return Err(Error::EmptyCohort);
    }
    if manifest.roi_count < 2 {
        return Err(Error::Manifest {
            path: manifest_path.to_path_buf(),
            message: format!("roi_count {} < 2", manifest.roi_count),
        });
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    let mut patients = Vec::with_capacity(manifest.patients.len());
    for entry in manifest.patients {
        let fail = |message: String| Error::Patient {
            patient: entry.id.clone(),
            message,
        };
        if !seen.insert(entry.id.clone()) {
            return Err(fail("duplicate id".into()));
        }
        let pcd: [f64; PCD_LEN] = entry
            .pcd
            .as_slice()
            .try_into()
            .map_err(|_| fail(format!("pcd has {} values, expected {PCD_LEN}", entry.pcd.len())))?;
        if pcd.iter().any(|v| !v.is_finite()) {
            return Err(fail("non-finite pcd value".into()));
        }
        let label = match entry.label {
            0 => 0,
            1 => 1,
            other => return Err(fail(format!("label {other} not in {{0,1}}"))),
        };
        let csv_path = base.join(&entry.csv);
        if !csv_path.exists() {
            return Err(fail(format!("missing file {}", csv_path.display())));
        }
        let series = read_series_csv(&csv_path, manifest.roi_count, &entry.id)?;
        patients.push(PatientRecord {
            id: entry.id,
            series,
            pcd,
            label,
            site: entry.site,
            split: Split::Unassigned,
        });
    }
    Cohort::new(patients)
}

/// Writes `manifest.json` plus one CSV per patient into `dir`.
pub fn save_cohort(cohort: &Cohort, dir: &Path) -> Result<PathBuf> {
    let series_dir = dir.join("series");
    std::fs::create_dir_all(&series_dir).map_err(|e| Error::io(&series_dir, e))?;
    let mut entries = Vec::with_capacity(cohort.len());
    for p in cohort.patients() {
        let rel = PathBuf::from("series").join(format!("{}.csv", p.id));
        let path = dir.join(&rel);
        let mut text = String::new();
        let v = p.series.values();
        for r in 0..v.nrows() {
            let row: Vec<String> = (0..v.ncols()).map(|c| format!("{}", v[(r, c)])).collect();
            text.push_str(&row.join(","));
            text.push('\n');
        }
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestEntry {
            id: p.id.clone(),
            csv: rel,
            pcd: p.pcd.to_vec(),
            label: p.label as i64,
            site: p.site.clone(),
        });
    }
    let manifest = Manifest {
        roi_count: cohort.roi_count(),
        patients: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Cuts `series` into `n_views` consecutive equal-length blocks starting at
/// t = 0. Trailing timepoints that do not fill a block are dropped.
pub fn slice_views(
    series: &RoiTimeSeries,
    n_views: usize,
    min_window: usize,
) -> Result<Vec<RoiTimeSeries>> {
    if n_views < 2 {
        return Err(Error::invalid(format!("n_views {n_views} < 2")));
    }
    let window = series.timepoints() / n_views;
    if window < min_window {
        return Err(Error::WindowTooShort {
            window,
            min: min_window,
        });
    }
    Ok((0..n_views)
        .map(|v| RoiTimeSeries {
            values: series.values.rows(v * window, window).into_owned(),
        })
        .collect())
}

/// Parameters of the synthetic cohort generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub patients: usize,
    pub rois: usize,
    pub timepoints: usize,
    pub sites: usize,
    /// Fraction of patients in class 1.
    pub class_ratio: f64,
    /// Number of latent subtypes for class 0 and class 1.
    pub subtypes: [usize; 2],
    /// Standard deviation of i.i.d. additive noise, relative to unit ROI variance.
    pub noise: f64,
    /// Probability that an off-diagonal precision entry is non-zero.
    pub edge_density: f64,
    /// Class-1 shift of the PCD means, in PCD standard deviations.
    pub pcd_shift: f64,
    /// Share of each PCD field's variance coming from one common latent.
    pub pcd_correlation: f64,
    /// Scale of the class- and subtype-specific precision patterns added to
    /// a pattern shared by everyone.
    pub class_effect: f64,
    /// Scale of each patient's own sparse precision perturbation.
    pub individual: f64,
    /// Scale of a sparse precision pattern shared within each site.
    pub site_effect: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            patients: 120,
            rois: 16,
            timepoints: 400,
            sites: 3,
            class_ratio: 0.5,
            subtypes: [6, 6],
            noise: 0.5,
            edge_density: 0.2,
            pcd_shift: 0.5,
            pcd_correlation: 1.0,
            class_effect: 1.0,
            individual: 0.3,
            site_effect: 0.0,
        }
    }
}

/// Ground truth behind a synthetic cohort.
#[derive(Debug, Clone)]
pub struct SynthTruth {
    /// Subtype of each patient within its class.
    pub subtype: Vec<usize>,
    /// Correlation template per class, per subtype.
    pub templates: [Vec<Matrix>; 2],
}

const PCD_MEAN: [f64; PCD_LEN] = [11.0, 0.5, 0.8, 1.0, 105.0, 105.0, 105.0];
const PCD_SD: [f64; PCD_LEN] = [2.5, 0.5, 0.3, 0.5, 14.0, 14.0, 14.0];
const PCD_SHIFT_SIGN: [f64; PCD_LEN] = [-1.0, 1.0, -1.0, 1.0, -1.0, -1.0, -1.0];

/// Class-shifted Gaussian PCD. Every field loads on one shared latent with
/// weight `sqrt(corr)`, so PCD alone only weakly tells patients apart.
fn synth_pcd(rng: &mut ChaCha8Rng, label: u8, shift: f64, corr: f64) -> [f64; PCD_LEN] {
    let shift = if label == 1 { shift } else { 0.0 };
    let shared: f64 = rng.sample(StandardNormal);
    let mut pcd = [0.0; PCD_LEN];
    for k in 0..PCD_LEN {
        let own: f64 = rng.sample(StandardNormal);
        let z = corr.sqrt() * shared + (1.0 - corr).sqrt() * own;
        pcd[k] = PCD_MEAN[k] + PCD_SD[k] * PCD_SHIFT_SIGN[k] * (shift + z);
    }
    pcd
}

fn random_offdiag(rng: &mut ChaCha8Rng, r: usize, density: f64) -> Matrix {
    let mut m = Matrix::zeros(r, r);
    for i in 0..r {
        for j in (i + 1)..r {
            if rng.random::<f64>() < density {
                let mag = rng.random_range(0.4..1.0);
                let w = if rng.random::<bool>() { mag } else { -mag };
                m[(i, j)] = w;
                m[(j, i)] = w;
            }
        }
    }
    m
}

/// Correlation matrix of the Gaussian whose precision has the given
/// off-diagonal part, made strictly diagonally dominant.
fn template_from_offdiag(offdiag: &Matrix) -> Matrix {
    let r = offdiag.nrows();
    let mut precision = offdiag.clone();
    for i in 0..r {
        let row: f64 = (0..r).filter(|&j| j != i).map(|j| offdiag[(i, j)].abs()).sum();
        precision[(i, i)] = row + 0.5;
    }
    let cov = precision
        .cholesky()
        .expect("diagonally dominant precision is positive definite")
        .inverse();
    let d = DMatrix::from_fn(r, r, |i, j| cov[(i, j)] / (cov[(i, i)] * cov[(j, j)]).sqrt());
    (&d + d.transpose()) * 0.5
}

/// Generates a cohort as a pure function of `(spec, seed)`.
pub fn synth_cohort(spec: &SynthSpec, seed: u64) -> Result<Cohort> {
    synth_cohort_with_truth(spec, seed).map(|(c, _)| c)
}

pub fn synth_cohort_with_truth(spec: &SynthSpec, seed: u64) -> Result<(Cohort, SynthTruth)> {
    if spec.patients < 4 {
        return Err(Error::invalid(format!("synthetic cohort needs P >= 4, got {}", spec.patients)));
    }
    if spec.rois < 2 {
        return Err(Error::invalid(format!("synthetic cohort needs R >= 2, got {}", spec.rois)));
    }
    if !(spec.class_ratio > 0.0 && spec.class_ratio < 1.0) {
        return Err(Error::invalid(format!("class ratio {} not in (0,1)", spec.class_ratio)));
    }
    if spec.sites == 0 || spec.subtypes.contains(&0) || spec.timepoints < 2 {
        return Err(Error::invalid("sites, subtypes and timepoints must be positive"));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite())
        || !(spec.individual >= 0.0 && spec.individual.is_finite())
        || !(spec.class_effect >= 0.0 && spec.class_effect.is_finite())
        || !(spec.site_effect >= 0.0 && spec.site_effect.is_finite())
        || !(0.0..=1.0).contains(&spec.edge_density)
        || !(0.0..=1.0).contains(&spec.pcd_correlation)
    {
        return Err(Error::invalid(
            "noise and the class, site and individual effects must be >= 0, edge density and pcd correlation in [0,1]",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = spec.rois;

    // Each subtype adds its own sparse edges on top of a class-wide pattern.
    let shared = random_offdiag(&mut rng, r, spec.edge_density);
    let mut offdiags: [Vec<Matrix>; 2] = [Vec::new(), Vec::new()];
    for (class, slot) in offdiags.iter_mut().enumerate() {
        let base = &shared + random_offdiag(&mut rng, r, spec.edge_density) * spec.class_effect;
        for _ in 0..spec.subtypes[class] {
            let extra = random_offdiag(&mut rng, r, spec.edge_density * 0.5) * spec.class_effect;
            let mut off = &base + &extra;
            off.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
            slot.push(off);
        }
    }
    let templates: [Vec<Matrix>; 2] =
        std::array::from_fn(|c| offdiags[c].iter().map(template_from_offdiag).collect());

    let n1 = ((spec.patients as f64) * spec.class_ratio).round() as usize;
    let n1 = n1.clamp(1, spec.patients - 1);
    let mut labels: Vec<u8> = (0..spec.patients).map(|i| u8::from(i < n1)).collect();
    labels.shuffle(&mut rng);
    // Acquisition differences shared by everyone scanned at a site.
    let site_patterns: Vec<Matrix> = (0..spec.sites)
        .map(|_| random_offdiag(&mut rng, r, spec.edge_density) * spec.site_effect)
        .collect();

    let mut per_class_count = [0usize; 2];
    let mut subtype = Vec::with_capacity(spec.patients);
    let mut patients = Vec::with_capacity(spec.patients);
    for (i, &label) in labels.iter().enumerate() {
        let class = label as usize;
        let s = per_class_count[class] % spec.subtypes[class];
        per_class_count[class] += 1;
        subtype.push(s);

        let mut off = &offdiags[class][s] + &site_patterns[i % spec.sites];
        if spec.individual > 0.0 {
            off += random_offdiag(&mut rng, r, spec.edge_density) * spec.individual;
        }
        let own = template_from_offdiag(&off);
        let l = own.cholesky().expect("correlation template is PD").l();
        let z = Matrix::from_fn(spec.timepoints, r, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut x = z * l.transpose();
        if spec.noise > 0.0 {
            x.iter_mut()
                .for_each(|v| *v += spec.noise * rng.sample::<f64, _>(StandardNormal));
        }
        let pcd = synth_pcd(&mut rng, label, spec.pcd_shift, spec.pcd_correlation);
        patients.push(PatientRecord {
            id: format!("sub-{i:04}"),
            series: RoiTimeSeries::new(x)?,
            pcd,
            label,
            site: format!("site{}", i % spec.sites),
            split: Split::Unassigned,
        });
    }
    let cohort = Cohort::new(patients)?;
    Ok((cohort, SynthTruth { subtype, templates }))
}

/// Largest-remainder apportionment of `n` items over the three ratios;
/// remainder ties go to the earlier split.
fn apportion(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: [usize; 3] = [0; 3];
    for k in 0..3 {
        counts[k] = (exact[k] + 1e-9).floor() as usize;
    }
    let mut left = n - counts.iter().sum::<usize>().min(n);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - counts[a] as f64;
        let rb = exact[b] - counts[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if ratios[k] > 0.0 {
            counts[k] += 1;
            left -= 1;
        }
    }
    counts
}

/// Integer counts per (cell, split) whose row sums are the cell sizes, each
/// entry being the floor or ceiling of its exact quota. Among those, picks
/// the table closest to the split `totals`, then the one rounding up the
/// largest remainders. Cells are labels, so there are at most two rows and
/// the search is exhaustive.
fn controlled_round(sizes: &[usize], ratios: [f64; 3], totals: [usize; 3]) -> Vec<[usize; 3]> {
    let mut floors = Vec::with_capacity(sizes.len());
    let mut free = Vec::new();
    for (c, &n) in sizes.iter().enumerate() {
        let mut row = [0; 3];
        for k in 0..3 {
            let exact = ratios[k] * n as f64;
            row[k] = (exact + 1e-9).floor() as usize;
            let rem = exact - row[k] as f64;
            if rem > 1e-9 {
                free.push((c, k, rem));
            }
        }
        floors.push(row);
    }
    assert!(free.len() < 24, "too many cells for exhaustive rounding");
    let mut best: Option<((usize, f64), Vec<[usize; 3]>)> = None;
    for mask in 0u32..(1 << free.len()) {
        let mut counts = floors.clone();
        let mut gain = 0.0;
        for (bit, &(c, k, rem)) in free.iter().enumerate() {
            if mask & (1 << bit) != 0 {
                counts[c][k] += 1;
                gain += rem;
            }
        }
        if counts.iter().zip(sizes).any(|(row, &n)| row.iter().sum::<usize>() != n) {
            continue;
        }
        let deviation: usize = (0..3)
            .map(|k| counts.iter().map(|r| r[k]).sum::<usize>().abs_diff(totals[k]))
            .sum();
        let better = match &best {
            None => true,
            Some(((d, g), _)) => deviation < *d || (deviation == *d && gain > *g + 1e-12),
        };
        if better {
            best = Some(((deviation, gain), counts));
        }
    }
    best.map(|(_, c)| c).unwrap_or(floors)
}

/// Assigns train/val/test within every site, stratified by label so each
/// (site, label) cell follows `ratios` up to rounding. Deterministic in `seed`.
pub fn split_cohort(cohort: &Cohort, ratios: [f64; 3], seed: u64) -> Result<Cohort> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let mut sites: BTreeMap<&str, BTreeMap<u8, Vec<usize>>> = BTreeMap::new();
    for (i, p) in cohort.patients().iter().enumerate() {
        sites
            .entry(p.site.as_str())
            .or_default()
            .entry(p.label)
            .or_default()
            .push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = cohort.clone();
    for (site, cells) in sites {
        let sizes: Vec<usize> = cells.values().map(Vec::len).collect();
        let totals = apportion(sizes.iter().sum(), ratios);
        let all_counts = controlled_round(&sizes, ratios, totals);
        for ((label, members), mut counts) in cells.into_iter().zip(all_counts) {
            let n = members.len();
            if counts[0] == 0 && ratios[0] > 0.0 && n >= 1 {
                let donor = if counts[1] >= counts[2] { 1 } else { 2 };
                counts[donor] -= 1;
                counts[0] = 1;
            }
            if counts[0] == 0 && n >= 3 {
                return Err(Error::Split(format!(
                    "cell (site {site}, label {label}) with {n} patients has no training patient"
                )));
            }
            let mut members = members;
            members.shuffle(&mut rng);
            for (k, &idx) in members.iter().enumerate() {
                out.patients[idx].split = if k < counts[0] {
                    Split::Train
                } else if k < counts[0] + counts[1] {
                    Split::Val
                } else {
                    Split::Test
                };
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(t: usize, r: usize) -> RoiTimeSeries {
        RoiTimeSeries::new(Matrix::from_fn(t, r, |i, j| (i * r + j) as f64)).unwrap()
    }

    #[test]
    fn slices_are_consecutive_blocks() {
        let s = ramp(200, 3);
        let views = slice_views(&s, 2, 30).unwrap();
        assert_eq!(views.len(), 2);
        assert_eq!(views[0].values(), &s.values().rows(0, 100).into_owned());
        assert_eq!(views[1].values(), &s.values().rows(100, 100).into_owned());
    }

    #[test]
    fn remainder_row_is_dropped() {
        let s = ramp(201, 3);
        let views = slice_views(&s, 2, 30).unwrap();
        assert!(views.iter().all(|v| v.timepoints() == 100));
        assert_eq!(views[1].values()[(99, 0)], s.values()[(199, 0)]);
    }

    #[test]
    fn short_window_rejected() {
        let s = ramp(50, 3);
        assert!(matches!(
            slice_views(&s, 2, 30),
            Err(Error::WindowTooShort { window: 25, min: 30 })
        ));
    }

    #[test]
    fn synth_is_deterministic() {
        let spec = SynthSpec {
            patients: 4,
            rois: 8,
            timepoints: 200,
            ..Default::default()
        };
        let a = synth_cohort(&spec, 7).unwrap();
        let b = synth_cohort(&spec, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_cohort(&spec, 8).unwrap());
        assert_eq!(a.len(), 4);
        assert_eq!(a.roi_count(), 8);
    }

    #[test]
    fn synth_rejects_bad_specs() {
        let small = SynthSpec { patients: 3, ..Default::default() };
        assert!(synth_cohort(&small, 0).is_err());
        let narrow = SynthSpec { rois: 1, ..Default::default() };
        assert!(synth_cohort(&narrow, 0).is_err());
        let ratio = SynthSpec { class_ratio: 1.0, ..Default::default() };
        assert!(synth_cohort(&ratio, 0).is_err());
    }

    #[test]
    fn apportion_seven_one_two() {
        assert_eq!(apportion(10, [0.7, 0.1, 0.2]), [7, 1, 2]);
        assert_eq!(apportion(20, [0.7, 0.1, 0.2]), [14, 2, 4]);
        assert_eq!(apportion(5, [1.0, 0.0, 0.0]), [5, 0, 0]);
    }

    fn toy_cohort(cells: &[(&str, u8, usize)]) -> Cohort {
        let mut patients = Vec::new();
        for &(site, label, n) in cells {
            for _ in 0..n {
                patients.push(PatientRecord {
                    id: format!("p{}", patients.len()),
                    series: ramp(60, 2),
                    pcd: [0.0; PCD_LEN],
                    label,
                    site: site.to_string(),
                    split: Split::Unassigned,
                });
            }
        }
        Cohort::new(patients).unwrap()
    }

    fn cell_counts(c: &Cohort, site: &str, label: u8) -> [usize; 3] {
        let mut counts = [0; 3];
        for p in c.patients().iter().filter(|p| p.site == site && p.label == label) {
            match p.split {
                Split::Train => counts[0] += 1,
                Split::Val => counts[1] += 1,
                Split::Test => counts[2] += 1,
                Split::Unassigned => panic!("unassigned"),
            }
        }
        counts
    }

    #[test]
    fn ten_patients_split_seven_one_two() {
        let c = toy_cohort(&[("a", 0, 5), ("a", 1, 5)]);
        let s = split_cohort(&c, [0.7, 0.1, 0.2], 1).unwrap();
        let (a, b) = (cell_counts(&s, "a", 0), cell_counts(&s, "a", 1));
        let total: Vec<usize> = (0..3).map(|k| a[k] + b[k]).collect();
        assert_eq!(total, vec![7, 1, 2]);
    }

    #[test]
    fn degenerate_ratio_all_train() {
        let c = toy_cohort(&[("a", 0, 4), ("b", 1, 3)]);
        let s = split_cohort(&c, [1.0, 0.0, 0.0], 3).unwrap();
        assert!(s.patients().iter().all(|p| p.split == Split::Train));
    }

    #[test]
    fn stratified_per_cell() {
        let c = toy_cohort(&[("a", 0, 10), ("a", 1, 10), ("b", 0, 10), ("b", 1, 10)]);
        let s = split_cohort(&c, [0.7, 0.1, 0.2], 42).unwrap();
        for site in ["a", "b"] {
            for label in [0, 1] {
                assert_eq!(cell_counts(&s, site, label), [7, 1, 2]);
            }
        }
        assert_eq!(s, split_cohort(&c, [0.7, 0.1, 0.2], 42).unwrap());
    }

    #[test]
    fn no_train_ratio_errors_on_big_cells() {
        let c = toy_cohort(&[("a", 0, 4)]);
        assert!(matches!(
            split_cohort(&c, [0.0, 0.5, 0.5], 0),
            Err(Error::Split(_))
        ));
        assert!(split_cohort(&c, [0.5, 0.5, 0.1], 0).is_err());
    }

    proptest! {
        #[test]
        fn split_counts_track_ratios(n0 in 1usize..30, n1 in 1usize..30, seed in 0u64..1000) {
            let c = toy_cohort(&[("a", 0, n0), ("a", 1, n1)]);
            let ratios = [0.7, 0.1, 0.2];
            let s = split_cohort(&c, ratios, seed).unwrap();
            for (label, n) in [(0u8, n0), (1u8, n1)] {
                let counts = cell_counts(&s, "a", label);
                prop_assert_eq!(counts.iter().sum::<usize>(), n);
                prop_assert!(counts[0] >= 1);
                for k in 0..3 {
                    prop_assert!((counts[k] as f64 - ratios[k] * n as f64).abs() <= 1.0 + 1e-9);
                }
            }
            // train-split label ratio matches the cohort's up to rounding
            let train = s.indices_in(Split::Train);
            let pos = train.iter().filter(|&&i| s.patients()[i].label == 1).count();
            let frac_train = pos as f64 / train.len() as f64;
            let frac_all = n1 as f64 / (n0 + n1) as f64;
            prop_assert!((frac_train - frac_all).abs() <= 1.0 / train.len() as f64 + 1e-12);
        }

        #[test]
        fn views_are_disjoint_prefix(t in 60usize..400, n_views in 2usize..4) {
            let s = ramp(t, 2);
            let views = slice_views(&s, n_views, 20).unwrap();
            let w = t / n_views;
            for (v, view) in views.iter().enumerate() {
                prop_assert_eq!(view.timepoints(), w);
                // first column of the ramp encodes the source row
                prop_assert_eq!(view.values()[(0, 0)] as usize, v * w * 2);
            }
        }
    }
}
