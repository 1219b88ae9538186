//! Activated-region audits for a layer's hyperplanes `w_j · x + b_j`.
//!
//! A sample activates plane `j` when the plane passes gradient for it: the
//! half-space `z > 0` for ReLU, the open slab `|z| < 1` for htanh and
//! sign/STE. Three statistics summarize the arrangement over a data set:
//!
//! * per-sample active-plane counts and their Pearson correlation with the
//!   sample norm (data equality: 0 means the count does not depend on radius);
//! * per-plane fraction of samples that activate it (hyperplane equality);
//! * mean pairwise Jaccard similarity of the planes' activated sample sets
//!   (region diversity: lower is more diverse). This is one quantitative reading
//!   of "diversity"; other overlap measures are possible.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::activations::ActivationKind;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Matrix;

/// Above this many plane pairs the Jaccard mean is estimated from a seeded sample of this size.
pub const MAX_JACCARD_PAIRS: usize = 10_000;
pub const JACCARD_PAIR_SEED: u64 = 0x6A63_6172_6431;

const CHUNK: usize = 4096;

/// Boolean `planes x samples` matrix stored as one bitset per plane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationMask {
    pub kind: ActivationKind,
    planes: usize,
    samples: usize,
    words: usize,
    bits: Vec<u64>,
}

impl ActivationMask {
    fn empty(kind: ActivationKind, planes: usize, samples: usize) -> Self {
        let words = samples.div_ceil(64);
        Self {
            kind,
            planes,
            samples,
            words,
            bits: vec![0; planes * words],
        }
    }

    pub fn planes(&self) -> usize {
        self.planes
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn get(&self, plane: usize, sample: usize) -> bool {
        self.bits[plane * self.words + sample / 64] >> (sample % 64) & 1 == 1
    }

    fn set(&mut self, plane: usize, sample: usize) {
        self.bits[plane * self.words + sample / 64] |= 1 << (sample % 64);
    }

    fn plane_bits(&self, plane: usize) -> &[u64] {
        &self.bits[plane * self.words..(plane + 1) * self.words]
    }

    pub fn plane_count(&self, plane: usize) -> usize {
        self.plane_bits(plane)
            .iter()
            .map(|w| w.count_ones() as usize)
            .sum()
    }

    pub fn sample_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.samples];
        for j in 0..self.planes {
            for (wi, &word) in self.plane_bits(j).iter().enumerate() {
                let mut w = word;
                while w != 0 {
                    let bit = w.trailing_zeros() as usize;
                    counts[wi * 64 + bit] += 1;
                    w &= w - 1;
                }
            }
        }
        counts
    }

    pub fn total_active(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// `|A ∩ B| / |A ∪ B|` of two planes' activated sets; 1 when both are empty.
    pub fn jaccard(&self, a: usize, b: usize) -> f64 {
        let (mut inter, mut union) = (0u64, 0u64);
        for (x, y) in self.plane_bits(a).iter().zip(self.plane_bits(b)) {
            inter += (x & y).count_ones() as u64;
            union += (x | y).count_ones() as u64;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Whether pre-activation `z` lies in the activated region of `kind`.
#[inline]
pub fn is_activated(kind: ActivationKind, z: f64) -> bool {
    match kind {
        ActivationKind::ReLU => z > 0.0,
        ActivationKind::HTanh | ActivationKind::SignSTE => z.abs() < 1.0,
        ActivationKind::Identity => true,
    }
}

/// Mask of `W X + b` (`W`: planes x features, `b`: planes x 1, `X`: features x samples).
pub fn activation_mask(
    w: &Matrix,
    b: &Matrix,
    x: &Matrix,
    kind: ActivationKind,
) -> Result<ActivationMask> {
    if kind == ActivationKind::Identity {
        return Err(Error::usage("identity activation has no activated region"));
    }
    if w.cols() != x.rows() {
        return Err(Error::shape("activation_mask", w.shape(), x.shape()));
    }
    if b.shape() != (w.rows(), 1) {
        return Err(Error::shape("activation_mask bias", w.shape(), b.shape()));
    }
    let mut mask = ActivationMask::empty(kind, w.rows(), x.cols());
    let mut start = 0;
    while start < x.cols() {
        let end = (start + CHUNK).min(x.cols());
        let idx: Vec<usize> = (start..end).collect();
        let z = w.matmul(&x.select_columns(&idx))?.add_col_broadcast(b)?;
        for j in 0..z.rows() {
            for (offset, &v) in z.row(j).iter().enumerate() {
                if is_activated(kind, v) {
                    mask.set(j, start + offset);
                }
            }
        }
        start = end;
    }
    Ok(mask)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometryReport {
    pub kind: ActivationKind,
    pub per_sample_count: Vec<usize>,
    pub sample_norms: Vec<f64>,
    pub per_plane_fraction: Vec<f64>,
    /// Pearson correlation between sample norm and active-plane count.
    pub norm_count_correlation: f64,
    /// Set when either variable has zero variance; the correlation is then 0.
    pub correlation_degenerate: bool,
    pub mean_pairwise_jaccard: f64,
    pub jaccard_pairs: usize,
}

impl GeometryReport {
    pub fn planes(&self) -> usize {
        self.per_plane_fraction.len()
    }

    pub fn mean_count(&self) -> f64 {
        mean(
            self.per_sample_count.iter().map(|&c| c as f64),
            self.per_sample_count.len(),
        )
    }

    pub fn mean_plane_fraction(&self) -> f64 {
        mean(
            self.per_plane_fraction.iter().copied(),
            self.per_plane_fraction.len(),
        )
    }

    /// Standard deviation of the per-plane fractions.
    pub fn plane_fraction_std(&self) -> f64 {
        let m = self.mean_plane_fraction();
        let n = self.per_plane_fraction.len();
        mean(self.per_plane_fraction.iter().map(|f| (f - m) * (f - m)), n).sqrt()
    }
}

fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    values.fold(0.0, |a, v| a + v) / n as f64
}

/// Pearson correlation; `None` when either series has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let n = x.len();
    if n < 2 {
        return None;
    }
    let mx = mean(x.iter().copied(), n);
    let my = mean(y.iter().copied(), n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn geometry_report(mask: &ActivationMask, x: &Matrix) -> Result<GeometryReport> {
    geometry_report_seeded(mask, x, JACCARD_PAIR_SEED)
}

pub fn geometry_report_seeded(
    mask: &ActivationMask,
    x: &Matrix,
    pair_seed: u64,
) -> Result<GeometryReport> {
    if mask.samples() != x.cols() {
        return Err(Error::shape(
            "geometry_report",
            (mask.planes(), mask.samples()),
            x.shape(),
        ));
    }
    let n = mask.samples();
    let m = mask.planes();
    let per_sample_count = mask.sample_counts();
    let sample_norms = x.column_norms();
    let per_plane_fraction: Vec<f64> = (0..m)
        .map(|j| mask.plane_count(j) as f64 / n as f64)
        .collect();

    let counts_f: Vec<f64> = per_sample_count.iter().map(|&c| c as f64).collect();
    let corr = pearson(&sample_norms, &counts_f);

    let total_pairs = m * m.saturating_sub(1) / 2;
    let (jaccard_sum, pairs) = if total_pairs == 0 {
        (1.0, 1)
    } else if total_pairs <= MAX_JACCARD_PAIRS {
        let mut sum = 0.0;
        for a in 0..m {
            for b in a + 1..m {
                sum += mask.jaccard(a, b);
            }
        }
        (sum, total_pairs)
    } else {
        let mut rng = Rng::new(pair_seed);
        let mut sum = 0.0;
        for _ in 0..MAX_JACCARD_PAIRS {
            let a = rng.below(m);
            let mut b = rng.below(m - 1);
            if b >= a {
                b += 1;
            }
            sum += mask.jaccard(a, b);
        }
        (sum, MAX_JACCARD_PAIRS)
    };

    Ok(GeometryReport {
        kind: mask.kind,
        per_sample_count,
        sample_norms,
        per_plane_fraction,
        norm_count_correlation: corr.unwrap_or(0.0),
        correlation_degenerate: corr.is_none(),
        mean_pairwise_jaccard: jaccard_sum / pairs as f64,
        jaccard_pairs: if total_pairs == 0 { 0 } else { pairs },
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataEquality {
    /// `|corr(norm, count)|`; 0 is perfect equality with respect to radius.
    pub score: f64,
    pub degenerate: bool,
}

pub fn data_equality_score(report: &GeometryReport) -> DataEquality {
    DataEquality {
        score: report.norm_count_correlation.abs(),
        degenerate: report.correlation_degenerate,
    }
}

/// Identifies a report in the summary CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportTag {
    pub lambda: f64,
    pub layer: usize,
    pub step: usize,
}

pub const PLANES_SCHEMA: &str = "# biasgeom geometry-planes v1";
pub const SAMPLES_SCHEMA: &str = "# biasgeom geometry-samples v1";
pub const SUMMARY_SCHEMA: &str = "# biasgeom geometry-summary v1";

fn csv_writer(path: &Path, schema: &str) -> Result<csv::Writer<File>> {
    let mut file = File::create(path)?;
    writeln!(file, "{schema}")?;
    Ok(csv::Writer::from_writer(file))
}

/// Writes `{prefix}_planes.csv`, `{prefix}_samples.csv` and `{prefix}_summary.csv` into `dir`.
pub fn write_report_csv(
    report: &GeometryReport,
    tag: ReportTag,
    dir: &Path,
    prefix: &str,
) -> Result<()> {
    let mut planes = csv_writer(&dir.join(format!("{prefix}_planes.csv")), PLANES_SCHEMA)?;
    planes.write_record(["index", "fraction"])?;
    for (j, f) in report.per_plane_fraction.iter().enumerate() {
        planes.write_record([j.to_string(), f.to_string()])?;
    }
    planes.flush()?;

    let mut samples = csv_writer(&dir.join(format!("{prefix}_samples.csv")), SAMPLES_SCHEMA)?;
    samples.write_record(["index", "norm", "count"])?;
    for (k, (norm, count)) in report
        .sample_norms
        .iter()
        .zip(&report.per_sample_count)
        .enumerate()
    {
        samples.write_record([k.to_string(), norm.to_string(), count.to_string()])?;
    }
    samples.flush()?;

    let mut summary = csv_writer(&dir.join(format!("{prefix}_summary.csv")), SUMMARY_SCHEMA)?;
    summary.write_record([
        "correlation",
        "mean_jaccard",
        "lambda",
        "layer",
        "step",
        "activation",
        "mean_count",
        "mean_plane_fraction",
        "correlation_degenerate",
    ])?;
    summary.write_record([
        report.norm_count_correlation.to_string(),
        report.mean_pairwise_jaccard.to_string(),
        tag.lambda.to_string(),
        tag.layer.to_string(),
        tag.step.to_string(),
        report.kind.to_string(),
        report.mean_count().to_string(),
        report.mean_plane_fraction().to_string(),
        report.correlation_degenerate.to_string(),
    ])?;
    summary.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::{init_bias, init_weights, WeightScheme};

    fn gaussian(dim: usize, n: usize, seed: u64) -> Matrix {
        let mut rng = Rng::new(seed);
        Matrix::from_fn(dim, n, |_, _| rng.normal())
    }

    #[test]
    fn relu_positive_side_activates_everything() {
        let w = Matrix::from_rows(&[&[1.0, 0.0], &[0.6, 0.8], &[0.0, 1.0]]);
        let x = Matrix::column_vector(&[2.0, 3.0]);
        let mask = activation_mask(&w, &Matrix::zeros(3, 1), &x, ActivationKind::ReLU).unwrap();
        assert!((0..3).all(|j| mask.get(j, 0)));
    }

    #[test]
    fn htanh_small_point_activates_all_planes() {
        let w = init_weights(50, 3, WeightScheme::UnitNormRows, &mut Rng::new(1));
        let x = Matrix::column_vector(&[0.1, -0.2, 0.3]);
        let mask = activation_mask(&w, &Matrix::zeros(50, 1), &x, ActivationKind::HTanh).unwrap();
        assert_eq!(mask.sample_counts(), vec![50]);
    }

    #[test]
    fn htanh_far_point_saturates() {
        let w = Matrix::from_rows(&[&[1.0, 0.0]]);
        let x = Matrix::column_vector(&[5.0, 0.0]);
        let mask = activation_mask(&w, &Matrix::zeros(1, 1), &x, ActivationKind::HTanh).unwrap();
        assert!(!mask.get(0, 0));
        let edge = Matrix::column_vector(&[1.0, 0.0]);
        let mask = activation_mask(&w, &Matrix::zeros(1, 1), &edge, ActivationKind::HTanh).unwrap();
        assert!(!mask.get(0, 0), "slab boundary is inactive");
    }

    #[test]
    fn mask_errors() {
        let w = Matrix::zeros(2, 3);
        assert!(activation_mask(
            &w,
            &Matrix::zeros(2, 1),
            &Matrix::zeros(2, 4),
            ActivationKind::ReLU
        )
        .is_err());
        assert!(activation_mask(
            &w,
            &Matrix::zeros(3, 1),
            &Matrix::zeros(3, 4),
            ActivationKind::ReLU
        )
        .is_err());
        assert!(activation_mask(
            &w,
            &Matrix::zeros(2, 1),
            &Matrix::zeros(3, 4),
            ActivationKind::Identity
        )
        .is_err());
        let mask = activation_mask(
            &w,
            &Matrix::zeros(2, 1),
            &Matrix::zeros(3, 4),
            ActivationKind::HTanh,
        )
        .unwrap();
        assert!(geometry_report(&mask, &Matrix::zeros(3, 5)).is_err());
    }

    #[test]
    fn all_true_mask_report() {
        let w = init_weights(5, 2, WeightScheme::UnitNormRows, &mut Rng::new(2));
        let x = gaussian(2, 100, 3).scale(0.01);
        let mask = activation_mask(&w, &Matrix::zeros(5, 1), &x, ActivationKind::HTanh).unwrap();
        let r = geometry_report(&mask, &x).unwrap();
        assert!(r.per_plane_fraction.iter().all(|&f| f == 1.0));
        assert_eq!(r.mean_pairwise_jaccard, 1.0);
        assert_eq!(r.jaccard_pairs, 10);
        assert!(r.correlation_degenerate);
        let eq = data_equality_score(&r);
        assert_eq!(eq.score, 0.0);
        assert!(eq.degenerate);
    }

    #[test]
    fn relu_scale_equivariance() {
        let w = init_weights(20, 3, WeightScheme::He, &mut Rng::new(4));
        let x = gaussian(3, 500, 5);
        let b = Matrix::zeros(20, 1);
        let m1 = activation_mask(&w, &b, &x, ActivationKind::ReLU).unwrap();
        for c in [0.01, 0.5, 7.0, 1e3] {
            let m2 = activation_mask(&w, &b, &x.scale(c), ActivationKind::ReLU).unwrap();
            assert_eq!(m1, m2);
        }
    }

    #[test]
    fn htanh_ray_monotone() {
        let w = init_weights(30, 2, WeightScheme::UnitNormRows, &mut Rng::new(6));
        let radii: Vec<f64> = (0..200).map(|i| i as f64 * 0.05).collect();
        let u = [0.6, -0.8];
        let x = Matrix::from_fn(2, radii.len(), |f, k| u[f] * radii[k]);
        let mask = activation_mask(&w, &Matrix::zeros(30, 1), &x, ActivationKind::HTanh).unwrap();
        for j in 0..30 {
            let mut left = false;
            for (k, r) in radii.iter().enumerate() {
                if left {
                    assert!(!mask.get(j, k), "plane {j} reactivated at radius {r}");
                }
                left |= !mask.get(j, k);
            }
        }
    }

    #[test]
    fn sum_identity() {
        let w = init_weights(17, 4, WeightScheme::He, &mut Rng::new(7));
        let b = init_bias(17, 1.0, &mut Rng::new(8)).unwrap();
        let x = gaussian(4, 333, 9);
        for kind in [ActivationKind::ReLU, ActivationKind::HTanh] {
            let mask = activation_mask(&w, &b, &x, kind).unwrap();
            let r = geometry_report(&mask, &x).unwrap();
            let total: usize = r.per_sample_count.iter().sum();
            let from_planes: f64 = r.per_plane_fraction.iter().map(|f| f * 333.0).sum();
            assert_eq!(total, mask.total_active());
            assert!((total as f64 - from_planes).abs() < 1e-9);
            assert!(r.per_sample_count.iter().all(|&c| c <= 17));
        }
    }

    #[test]
    fn mask_is_deterministic_and_matches_direct_evaluation() {
        let w = init_weights(9, 3, WeightScheme::Glorot, &mut Rng::new(10));
        let b = init_bias(9, 0.5, &mut Rng::new(11)).unwrap();
        let x = gaussian(3, 5000, 12);
        let m1 = activation_mask(&w, &b, &x, ActivationKind::HTanh).unwrap();
        assert_eq!(
            m1,
            activation_mask(&w, &b, &x, ActivationKind::HTanh).unwrap()
        );
        for k in (0..5000).step_by(37) {
            for j in 0..9 {
                let z: f64 = (0..3).map(|f| w.get(j, f) * x.get(f, k)).sum::<f64>() + b.get(j, 0);
                assert_eq!(m1.get(j, k), z.abs() < 1.0);
            }
        }
    }

    #[test]
    fn jaccard_subsampling_kicks_in() {
        let w = init_weights(200, 2, WeightScheme::UnitNormRows, &mut Rng::new(13));
        let x = gaussian(2, 300, 14);
        let mask = activation_mask(&w, &Matrix::zeros(200, 1), &x, ActivationKind::ReLU).unwrap();
        let r = geometry_report(&mask, &x).unwrap();
        assert_eq!(r.jaccard_pairs, MAX_JACCARD_PAIRS);
        let mut exact = 0.0;
        for a in 0..200 {
            for b in a + 1..200 {
                exact += mask.jaccard(a, b);
            }
        }
        exact /= (200 * 199 / 2) as f64;
        assert!((r.mean_pairwise_jaccard - exact).abs() < 0.01);
    }

    #[test]
    fn pearson_basics() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(pearson(&[1.0, 1.0], &[1.0, 2.0]).is_none());
    }

    #[test]
    fn csv_files_written() {
        let dir = tempfile::tempdir().unwrap();
        let w = init_weights(3, 2, WeightScheme::He, &mut Rng::new(1));
        let x = gaussian(2, 4, 2);
        let mask = activation_mask(&w, &Matrix::zeros(3, 1), &x, ActivationKind::ReLU).unwrap();
        let r = geometry_report(&mask, &x).unwrap();
        let tag = ReportTag {
            lambda: 1.5,
            layer: 0,
            step: 0,
        };
        write_report_csv(&r, tag, dir.path(), "g").unwrap();
        let planes = std::fs::read_to_string(dir.path().join("g_planes.csv")).unwrap();
        assert!(planes.starts_with(PLANES_SCHEMA));
        assert_eq!(planes.lines().count(), 2 + 3);
        let samples = std::fs::read_to_string(dir.path().join("g_samples.csv")).unwrap();
        assert_eq!(samples.lines().count(), 2 + 4);
        let summary = std::fs::read_to_string(dir.path().join("g_summary.csv")).unwrap();
        let row = summary.lines().nth(2).unwrap();
        assert!(row.contains(",1.5,0,0,relu,"), "{row}");
    }
}
