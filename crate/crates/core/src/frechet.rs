//! Feature files, Gaussian moment fitting, the Fréchet distance between two
//! fitted Gaussians (FID), and the greedy leave-one-out FID filter.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::anno::Loaded;
use crate::error::{Error, Result};
use crate::report;

pub const FET_MAGIC: &[u8; 6] = b"FETv1\n";

/// Eigenvalue floor below which a covariance counts as singular.
pub const SINGULAR_EIGENVALUE: f64 = 1e-10;
/// Diagonal jitter added to both covariances when either is singular.
pub const SINGULAR_JITTER: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub image_id: String,
    pub vector: Vec<f64>,
}

/// Per-image embedding vectors sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    dim: usize,
    records: Vec<FeatureRecord>,
}

impl FeatureSet {
    pub fn new(dim: usize, records: Vec<FeatureRecord>) -> Result<Self> {
        for r in &records {
            if r.vector.len() != dim {
                return Err(Error::DimensionMismatch(dim, r.vector.len()));
            }
            if !r.vector.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("feature vector"));
            }
        }
        Ok(Self { dim, records })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn with_records(&self, records: Vec<FeatureRecord>) -> Self {
        Self {
            dim: self.dim,
            records,
        }
    }

    pub fn to_fet_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(14 + self.records.len() * (8 + 4 * self.dim));
        out.extend_from_slice(FET_MAGIC);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.image_id.len() as u32).to_le_bytes());
            out.extend_from_slice(r.image_id.as_bytes());
            for &v in &r.vector {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.image_id);
            for v in &r.vector {
                out.push_str(", ");
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>, format: FeatureFormat) -> Result<()> {
        let path = path.as_ref();
        let bytes = match format {
            FeatureFormat::Fet => self.to_fet_bytes(),
            FeatureFormat::Csv => self.to_csv_string().into_bytes(),
        };
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureFormat {
    #[default]
    Fet,
    Csv,
}

fn duplicate_warnings(records: &[FeatureRecord]) -> Vec<String> {
    let mut seen = HashSet::new();
    records
        .iter()
        .filter(|r| !seen.insert(r.image_id.as_str()))
        .map(|r| format!("duplicate image_id {:?}", r.image_id))
        .collect()
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Schema(format!("feature file truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Decodes the little-endian `FETv1` binary format.
pub fn parse_fet(bytes: &[u8]) -> Result<Loaded<FeatureSet>> {
    let mut rd = ByteReader { bytes, pos: 0 };
    if rd.take(FET_MAGIC.len())? != FET_MAGIC {
        return Err(Error::Schema("missing FETv1 magic".into()));
    }
    let n = rd.u32()? as usize;
    let dim = rd.u32()? as usize;
    let mut records = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let len = rd.u32()? as usize;
        let image_id = std::str::from_utf8(rd.take(len)?)
            .map_err(|_| Error::Schema("image id is not UTF-8".into()))?
            .to_owned();
        let vector = (0..dim)
            .map(|_| rd.f32().map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        records.push(FeatureRecord { image_id, vector });
    }
    if rd.pos != bytes.len() {
        return Err(Error::Schema(format!(
            "{} trailing bytes after the last record",
            bytes.len() - rd.pos
        )));
    }
    let warnings = duplicate_warnings(&records);
    Ok(Loaded {
        value: FeatureSet::new(dim, records)?,
        warnings,
    })
}

/// Parses `image_id, v0, v1, ...` lines. A first line whose second field is
/// not numeric is treated as a header.
pub fn parse_feature_csv(text: &str) -> Result<Loaded<FeatureSet>> {
    let mut records = Vec::new();
    let mut dim = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let image_id = fields.next().unwrap_or_default().to_owned();
        let values: std::result::Result<Vec<f64>, _> = fields.map(str::parse::<f64>).collect();
        let vector = match values {
            Ok(v) => v,
            Err(_) if lineno == 0 => continue,
            Err(e) => return Err(Error::Schema(format!("line {}: {e}", lineno + 1))),
        };
        match dim {
            None => dim = Some(vector.len()),
            Some(d) if d != vector.len() => return Err(Error::DimensionMismatch(d, vector.len())),
            Some(_) => {}
        }
        records.push(FeatureRecord { image_id, vector });
    }
    let warnings = duplicate_warnings(&records);
    Ok(Loaded {
        value: FeatureSet::new(dim.unwrap_or(0), records)?,
        warnings,
    })
}

pub fn load_features(path: impl AsRef<Path>, format: FeatureFormat) -> Result<Loaded<FeatureSet>> {
    let path = path.as_ref();
    match format {
        FeatureFormat::Fet => parse_fet(&fs::read(path).map_err(|e| Error::io(path, e))?),
        FeatureFormat::Csv => {
            parse_feature_csv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
        }
    }
}

/// Sample mean and unbiased (n - 1) covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Moments of the same sample with `x` removed, by rank-one downdate.
    /// Needs `n >= 3` so the result still has an unbiased covariance.
    pub fn without(&self, x: &[f64]) -> Result<GaussianStats> {
        if self.n < 3 {
            return Err(Error::InsufficientSamples {
                needed: 3,
                got: self.n,
            });
        }
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch(self.dim(), x.len()));
        }
        let n = self.n as f64;
        let x = DVector::from_column_slice(x);
        let delta = &x - &self.mean;
        let mean = (&self.mean * n - &x) / (n - 1.0);
        let scatter = &self.cov * (n - 1.0) - (&delta * delta.transpose()) * (n / (n - 1.0));
        let mut cov = scatter / (n - 2.0);
        symmetrize(&mut cov);
        Ok(GaussianStats {
            mean,
            cov,
            n: self.n - 1,
        })
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

pub fn fit_stats(fs: &FeatureSet) -> Result<GaussianStats> {
    fit_vectors(fs.dim, fs.records.iter().map(|r| r.vector.as_slice()))
}

fn fit_vectors<'a>(dim: usize, vectors: impl Iterator<Item = &'a [f64]> + Clone) -> Result<GaussianStats> {
    let n = vectors.clone().count();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let mut mean = DVector::zeros(dim);
    for v in vectors.clone() {
        mean += DVector::from_column_slice(v);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for v in vectors {
        let d = DVector::from_column_slice(v) - &mean;
        cov.ger(1.0, &d, &d, 1.0);
    }
    cov /= (n - 1) as f64;
    symmetrize(&mut cov);
    Ok(GaussianStats { mean, cov, n })
}

fn eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let dim = m.nrows();
    SymmetricEigen::try_new(m, f64::EPSILON, 100 * dim.max(10))
        .ok_or_else(|| Error::Eigen(format!("no convergence for a {dim}x{dim} matrix")))
}

fn negative_tolerance(eigenvalues: &DVector<f64>) -> f64 {
    1e-9 * eigenvalues.amax().max(1.0)
}

/// Eigenvalues clamped to zero within tolerance; below it is an error.
fn clamp_psd(eigenvalues: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let tol = negative_tolerance(eigenvalues);
    if let Some(&bad) = eigenvalues.iter().find(|&&l| l < -tol) {
        return Err(Error::Eigen(format!(
            "{what} has negative eigenvalue {bad:e} (tolerance {tol:e})"
        )));
    }
    Ok(eigenvalues.map(|l| l.max(0.0)))
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = eigen(m.clone())?;
    let roots = clamp_psd(&eig.eigenvalues, "covariance")?.map(f64::sqrt);
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&roots) * v.transpose())
}

fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    Ok(eigen(m.clone())?.eigenvalues.min())
}

/// Squared Fréchet distance between two Gaussians:
/// `|mu_a - mu_b|^2 + tr(S_a) + tr(S_b) - 2 tr sqrt(S_a^(1/2) S_b S_a^(1/2))`.
///
/// When either covariance has an eigenvalue below [`SINGULAR_EIGENVALUE`],
/// [`SINGULAR_JITTER`] is added to the diagonal of both. The result is
/// clamped at zero.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(a.dim(), b.dim()));
    }
    for s in [a, b] {
        if !s.mean.iter().chain(s.cov.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("gaussian statistics"));
        }
    }

    let (mut cov_a, mut cov_b) = (a.cov.clone(), b.cov.clone());
    if min_eigenvalue(&cov_a)? < SINGULAR_EIGENVALUE || min_eigenvalue(&cov_b)? < SINGULAR_EIGENVALUE {
        let jitter = DMatrix::identity(a.dim(), a.dim()) * SINGULAR_JITTER;
        cov_a += &jitter;
        cov_b += &jitter;
    }

    let root_a = psd_sqrt(&cov_a)?;
    let mut inner = &root_a * &cov_b * &root_a;
    symmetrize(&mut inner);
    let inner_eig = eigen(inner)?;
    let tr_sqrt: f64 = clamp_psd(&inner_eig.eigenvalues, "covariance product")?
        .iter()
        .map(|l| l.sqrt())
        .sum();

    let mean_term = (&a.mean - &b.mean).norm_squared();
    let d2 = mean_term + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    Ok(d2.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FidFilterOptions {
    /// Number of passes over the generated records; the filter also stops
    /// after any pass that removes nothing.
    pub passes: usize,
    /// Threshold variant: stop as soon as the FID is at or below this value.
    pub target_fid: Option<f64>,
}

impl Default for FidFilterOptions {
    fn default() -> Self {
        Self {
            passes: 1,
            target_fid: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FidFilterOutcome {
    pub kept: FeatureSet,
    pub removed_ids: Vec<String>,
    pub initial_fid: f64,
    pub final_fid: f64,
    /// Current FID after each keep/remove decision.
    pub fid_trace: Vec<f64>,
    /// Set when the pass stopped because only two records were left.
    pub stopped_at_minimum: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidFilterReport {
    #[serde(serialize_with = "report::ser_f64")]
    pub initial_fid: f64,
    #[serde(serialize_with = "report::ser_f64")]
    pub final_fid: f64,
    pub kept: usize,
    pub removed: usize,
    pub removed_ids: Vec<String>,
    #[serde(serialize_with = "report::ser_vec_f64")]
    pub fid_trace: Vec<f64>,
    pub stopped_at_minimum: bool,
}

impl From<&FidFilterOutcome> for FidFilterReport {
    fn from(o: &FidFilterOutcome) -> Self {
        Self {
            initial_fid: o.initial_fid,
            final_fid: o.final_fid,
            kept: o.kept.len(),
            removed: o.removed_ids.len(),
            removed_ids: o.removed_ids.clone(),
            fid_trace: o.fid_trace.clone(),
            stopped_at_minimum: o.stopped_at_minimum,
        }
    }
}

/// Greedy leave-one-out filter. Records are visited in input order; a record
/// is removed for good when the FID of the remaining generated set against
/// `real` is strictly lower than the current FID.
pub fn fid_filter(
    generated: &FeatureSet,
    real: &FeatureSet,
    options: FidFilterOptions,
) -> Result<FidFilterOutcome> {
    if generated.len() < 3 {
        return Err(Error::InsufficientSamples {
            needed: 3,
            got: generated.len(),
        });
    }
    if generated.dim != real.dim {
        return Err(Error::DimensionMismatch(generated.dim, real.dim));
    }
    let real_stats = fit_stats(real)?;
    let mut current = fit_stats(generated)?;
    let initial_fid = frechet_distance(&current, &real_stats)?;
    let mut current_fid = initial_fid;

    let mut active = vec![true; generated.len()];
    let mut remaining = generated.len();
    let mut trace = Vec::new();
    let mut stopped_at_minimum = false;
    let reached = |fid: f64| options.target_fid.is_some_and(|t| fid <= t);

    'passes: for _ in 0..options.passes {
        let mut removed_this_pass = false;
        for (i, rec) in generated.records.iter().enumerate() {
            if !active[i] {
                continue;
            }
            if reached(current_fid) {
                break 'passes;
            }
            if remaining <= 2 {
                stopped_at_minimum = true;
                break 'passes;
            }
            let candidate = current.without(&rec.vector)?;
            let candidate_fid = frechet_distance(&candidate, &real_stats)?;
            if candidate_fid < current_fid {
                active[i] = false;
                remaining -= 1;
                current = candidate;
                current_fid = candidate_fid;
                removed_this_pass = true;
            }
            trace.push(current_fid);
        }
        if !removed_this_pass {
            break;
        }
    }

    let (kept, removed): (Vec<_>, Vec<_>) = generated
        .records
        .iter()
        .zip(&active)
        .partition(|(_, &a)| a);
    Ok(FidFilterOutcome {
        kept: generated.with_records(kept.into_iter().map(|(r, _)| r.clone()).collect()),
        removed_ids: removed.into_iter().map(|(r, _)| r.image_id.clone()).collect(),
        initial_fid,
        final_fid: current_fid,
        fid_trace: trace,
        stopped_at_minimum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(vectors: &[&[f64]]) -> FeatureSet {
        let dim = vectors[0].len();
        FeatureSet::new(
            dim,
            vectors
                .iter()
                .enumerate()
                .map(|(i, v)| FeatureRecord {
                    image_id: format!("r{i}"),
                    vector: v.to_vec(),
                })
                .collect(),
        )
        .unwrap()
    }

    fn stats(mean: &[f64], diag: &[f64]) -> GaussianStats {
        GaussianStats {
            mean: DVector::from_column_slice(mean),
            cov: DMatrix::from_diagonal(&DVector::from_column_slice(diag)),
            n: 10,
        }
    }

    #[test]
    fn fit_two_points() {
        let s = fit_stats(&set(&[&[1.0, 0.0], &[-1.0, 0.0]])).unwrap();
        assert_eq!(s.mean.as_slice(), &[0.0, 0.0]);
        assert_eq!(s.cov, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn fit_identical_vectors_has_zero_covariance() {
        let s = fit_stats(&set(&[&[3.0, 1.0], &[3.0, 1.0], &[3.0, 1.0]])).unwrap();
        assert!(s.cov.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fit_needs_two_records() {
        assert!(matches!(
            fit_stats(&set(&[&[1.0]])),
            Err(Error::InsufficientSamples { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn distance_closed_forms() {
        let a = stats(&[0.0, 0.0], &[1.0, 1.0]);
        assert!(frechet_distance(&a, &a).unwrap() <= 1e-9);
        let b = stats(&[1.0, 0.0], &[1.0, 1.0]);
        assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() <= 1e-9);
        let c = stats(&[0.0, 0.0], &[4.0, 1.0]);
        assert!((frechet_distance(&c, &a).unwrap() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn distance_rejects_dimension_mismatch_and_nan() {
        let a = stats(&[0.0, 0.0], &[1.0, 1.0]);
        let b = stats(&[0.0], &[1.0]);
        assert!(matches!(
            frechet_distance(&a, &b),
            Err(Error::DimensionMismatch(2, 1))
        ));
        let nan = stats(&[f64::NAN, 0.0], &[1.0, 1.0]);
        assert!(matches!(
            frechet_distance(&a, &nan),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn distance_rejects_indefinite_covariance() {
        let a = stats(&[0.0, 0.0], &[1.0, 1.0]);
        let bad = stats(&[0.0, 0.0], &[1.0, -1.0]);
        assert!(matches!(frechet_distance(&bad, &a), Err(Error::Eigen(_))));
    }

    #[test]
    fn filter_removes_one_dimensional_outlier() {
        let real = set(&[&[0.0], &[0.0], &[0.0], &[0.0]]);
        let generated = set(&[&[0.0], &[0.0], &[0.0], &[10.0]]);
        let out = fid_filter(&generated, &real, FidFilterOptions::default()).unwrap();
        assert_eq!(out.removed_ids, vec!["r3".to_string()]);
        assert!(out.final_fid < out.initial_fid);
        assert_eq!(out.kept.len(), 3);
        assert_eq!(out.fid_trace.len(), 4);
    }

    #[test]
    fn filter_keeps_matching_distribution() {
        let vs: Vec<Vec<f64>> = (0..8)
            .map(|i| vec![(i as f64 * 0.7).sin(), (i as f64 * 1.3).cos()])
            .collect();
        let refs: Vec<&[f64]> = vs.iter().map(Vec::as_slice).collect();
        let real = set(&refs);
        let out = fid_filter(&real.clone(), &real, FidFilterOptions::default()).unwrap();
        assert!(out.removed_ids.is_empty());
        assert!(out.fid_trace.iter().all(|&f| f == out.initial_fid));
    }

    #[test]
    fn filter_precondition() {
        let two = set(&[&[0.0], &[1.0]]);
        assert!(matches!(
            fid_filter(&two, &two, FidFilterOptions::default()),
            Err(Error::InsufficientSamples { needed: 3, got: 2 })
        ));
    }

    #[test]
    fn filter_stops_at_two_records() {
        let real = set(&[&[0.0], &[0.1], &[-0.1], &[0.05]]);
        let generated = set(&[&[50.0], &[-40.0], &[0.0], &[0.1]]);
        let out = fid_filter(&generated, &real, FidFilterOptions::default()).unwrap();
        assert_eq!(out.kept.len(), 2);
        assert!(out.stopped_at_minimum);
        assert!(out.final_fid < out.initial_fid);
    }

    #[test]
    fn target_fid_stops_early() {
        let real = set(&[&[0.0], &[0.1], &[-0.1], &[0.05]]);
        let generated = set(&[&[50.0], &[-40.0], &[0.0], &[0.1], &[0.02]]);
        let opts = FidFilterOptions {
            passes: 1,
            target_fid: Some(f64::INFINITY),
        };
        let out = fid_filter(&generated, &real, opts).unwrap();
        assert!(out.removed_ids.is_empty());
        assert!(out.fid_trace.is_empty());
    }

    #[test]
    fn fet_round_trip_and_validation() {
        let fs = set(&[&[1.0, 2.5], &[-0.25, 4.0]]);
        let bytes = fs.to_fet_bytes();
        assert_eq!(&bytes[..6], FET_MAGIC);
        let back = parse_fet(&bytes).unwrap();
        assert!(back.warnings.is_empty());
        assert_eq!(back.value, fs);

        assert!(parse_fet(b"FETv2\n").is_err());
        assert!(parse_fet(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(parse_fet(&extra).is_err());
    }

    #[test]
    fn csv_with_header_and_duplicates() {
        let text = "image_id, v0, v1\na, 1, 2\nb, 3, 4\na, 5, 6\n";
        let loaded = parse_feature_csv(text).unwrap();
        assert_eq!(loaded.value.len(), 3);
        assert_eq!(loaded.value.dim(), 2);
        assert_eq!(loaded.warnings.len(), 1);
        assert!(parse_feature_csv("a, 1, 2\nb, 3\n").is_err());
    }
}
