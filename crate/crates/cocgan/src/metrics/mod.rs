//! Generative evaluation: FID, KID, and the inception-style score, computed
//! against a small trained point-cluster classifier standing in for the
//! usual large feature network. Metric reports carry the extractor's
//! identity hash; numbers from different extractors are not comparable.

pub mod linalg;

use crate::cluster::{ClusterBlock, PointReducer};
use crate::data::{batch_indices, gather_batch, Dataset};
use crate::error::Error;
use crate::model::IMAGE_PIXELS;
use crate::optim::Optimizer;
use crate::tensor::{param_init, InitScheme, ParamBank, ParamId, Tape, Tensor, Var};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::io::Write;
use std::path::Path;

/// Width of the penultimate feature layer every metric consumes.
pub const FEATURE_WIDTH: usize = 64;

// ── feature statistics ──────────────────────────────────────────────────

/// Gaussian fit of a feature set: mean and unbiased covariance.
#[derive(Clone, Debug)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`, symmetric.
    pub cov: Vec<f64>,
    pub count: usize,
    pub dim: usize,
}

/// Two-pass mean/covariance over `n` rows of `d` features.
pub fn feature_stats(features: &[f64], n: usize, d: usize) -> Result<FeatureStats, Error> {
    if n < 2 {
        return Err(Error::Input(format!("need at least 2 samples for covariance, got {n}")));
    }
    assert_eq!(features.len(), n * d, "feature buffer size mismatch");
    let mut mean = vec![0.0; d];
    for row in features.chunks_exact(d) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for row in features.chunks_exact(d) {
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += di * (row[j] - mean[j]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / denom;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    Ok(FeatureStats { mean, cov, count: n, dim: d })
}

// ── FID ─────────────────────────────────────────────────────────────────

/// Frechet distance between two Gaussian feature fits:
/// `|mu_a - mu_b|^2 + Tr(Sa + Sb - 2 sqrtm(Sa^1/2 Sb Sa^1/2))`.
pub fn fid(a: &FeatureStats, b: &FeatureStats) -> Result<f64, Error> {
    if a.dim != b.dim {
        return Err(Error::Input(format!(
            "feature dims differ: {} vs {}",
            a.dim, b.dim
        )));
    }
    let d = a.dim;
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let sa_half = linalg::sqrtm_psd(&a.cov, d)?;
    let inner = linalg::matmul_f64(
        &linalg::matmul_f64(&sa_half, &b.cov, d, d, d),
        &sa_half,
        d,
        d,
        d,
    );
    let cross = linalg::sqrtm_psd(&inner, d)?;
    Ok(mean_term + linalg::trace(&a.cov, d) + linalg::trace(&b.cov, d) - 2.0 * linalg::trace(&cross, d))
}

// ── KID ─────────────────────────────────────────────────────────────────

fn poly_kernel(x: &[f64], y: &[f64], d: usize) -> f64 {
    let mut dot = 0.0;
    for (a, b) in x.iter().zip(y) {
        dot += a * b;
    }
    let base = dot / d as f64 + 1.0;
    base * base * base
}

/// Unbiased squared MMD with the cubic polynomial kernel
/// `k(x, y) = (x.y/d + 1)^3`.
pub fn kid(x: &[f64], nx: usize, y: &[f64], ny: usize, d: usize) -> Result<f64, Error> {
    if nx < 2 || ny < 2 {
        return Err(Error::Input(format!("need at least 2 samples per side, got {nx} and {ny}")));
    }
    assert_eq!(x.len(), nx * d);
    assert_eq!(y.len(), ny * d);
    let mut kxx = 0.0;
    for i in 0..nx {
        for j in 0..nx {
            if i != j {
                kxx += poly_kernel(&x[i * d..(i + 1) * d], &x[j * d..(j + 1) * d], d);
            }
        }
    }
    kxx /= (nx * (nx - 1)) as f64;
    let mut kyy = 0.0;
    for i in 0..ny {
        for j in 0..ny {
            if i != j {
                kyy += poly_kernel(&y[i * d..(i + 1) * d], &y[j * d..(j + 1) * d], d);
            }
        }
    }
    kyy /= (ny * (ny - 1)) as f64;
    let mut kxy = 0.0;
    for i in 0..nx {
        for j in 0..ny {
            kxy += poly_kernel(&x[i * d..(i + 1) * d], &y[j * d..(j + 1) * d], d);
        }
    }
    kxy /= (nx * ny) as f64;
    Ok(kxx + kyy - 2.0 * kxy)
}

// ── inception-style score ───────────────────────────────────────────────

/// `exp(mean_x KL(p(y|x) || mean_x p(y|x)))` with `0 log 0 = 0`. Rows must
/// sum to 1 within 1e-6.
pub fn inception_score(probs: &[f64], n: usize, c: usize) -> Result<f64, Error> {
    assert_eq!(probs.len(), n * c, "probability buffer size mismatch");
    if n == 0 {
        return Err(Error::Input("need at least one probability row".into()));
    }
    for (i, row) in probs.chunks_exact(c).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Input(format!("probability row {i} sums to {s}, not 1")));
        }
        if row.iter().any(|&p| p < 0.0) {
            return Err(Error::Input(format!("probability row {i} has a negative entry")));
        }
    }
    let mut marginal = vec![0.0; c];
    for row in probs.chunks_exact(c) {
        for (m, &p) in marginal.iter_mut().zip(row) {
            *m += p;
        }
    }
    for m in &mut marginal {
        *m /= n as f64;
    }
    let mut kl_sum = 0.0;
    for row in probs.chunks_exact(c) {
        for (&p, &q) in row.iter().zip(&marginal) {
            if p > 0.0 {
                kl_sum += p * (p / q).ln();
            }
        }
    }
    Ok((kl_sum / n as f64).exp())
}

/// Mean and population std of the score over contiguous splits.
pub fn inception_score_splits(probs: &[f64], n: usize, c: usize, splits: usize) -> Result<(f64, f64), Error> {
    let splits = splits.max(1).min(n);
    let mut scores = Vec::with_capacity(splits);
    let per = n / splits;
    for s in 0..splits {
        let start = s * per;
        let len = if s == splits - 1 { n - start } else { per };
        scores.push(inception_score(&probs[start * c..(start + len) * c], len, c)?);
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / scores.len() as f64;
    Ok((mean, var.sqrt()))
}

// ── feature extractor ───────────────────────────────────────────────────

/// Small point-cluster classifier: two reducer stages with one cluster
/// block each, then an FC class head. The 64-wide feature before the head
/// feeds FID/KID; the softmax head feeds the score.
pub struct FeatureExtractor {
    pub bank: ParamBank<f32>,
    pub channels: usize,
    pub n_classes: usize,
    red1: PointReducer,
    blk1: ClusterBlock,
    red2: PointReducer,
    blk2: ClusterBlock,
    head_w: ParamId,
    head_b: ParamId,
}

impl FeatureExtractor {
    pub fn new(channels: usize, n_classes: usize, seed: u64) -> Result<Self, Error> {
        if channels == 0 || n_classes == 0 {
            return Err(Error::Config("extractor needs channels and classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bank = ParamBank::new();
        let red1 = PointReducer::new(&mut bank, "x.s0.red", 4, channels, 32, &mut rng)?;
        let blk1 = ClusterBlock::new(&mut bank, "x.s0.b0", 32, 4, 16, 4, 1, &mut rng)?;
        let red2 = PointReducer::new(&mut bank, "x.s1.red", 7, 32, FEATURE_WIDTH, &mut rng)?;
        let blk2 = ClusterBlock::new(&mut bank, "x.s1.b0", FEATURE_WIDTH, 4, 16, 4, 1, &mut rng)?;
        let head_w = bank.add(
            "x.head.w",
            param_init(&[FEATURE_WIDTH, n_classes], InitScheme::UniformFanIn, &mut rng)?,
        );
        let head_b = bank.add("x.head.b", param_init(&[n_classes], InitScheme::Zeros, &mut rng)?);
        Ok(FeatureExtractor { bank, channels, n_classes, red1, blk1, red2, blk2, head_w, head_b })
    }

    /// Returns `(features [batch, 64], logits [batch, n_classes])`.
    pub fn forward(&self, tape: &mut Tape<f32>, images: Var) -> Result<(Var, Var), Error> {
        let batch = tape.shape(images)[0];
        if tape.shape(images)[1] != IMAGE_PIXELS * self.channels {
            return Err(Error::Config(format!(
                "extractor expects width {}, got {}",
                IMAGE_PIXELS * self.channels,
                tape.shape(images)[1]
            )));
        }
        let x = tape.reshape(images, &[batch * IMAGE_PIXELS, self.channels]);
        let (x, h, w) = self.red1.forward(tape, &self.bank, x, batch, 28, 28)?;
        let x = self.blk1.forward(tape, &self.bank, x, batch, h, w, None)?;
        let (x, h, w) = self.red2.forward(tape, &self.bank, x, batch, h, w)?;
        let x = self.blk2.forward(tape, &self.bank, x, batch, h, w, None)?;
        let feats = tape.reshape(x, &[batch, FEATURE_WIDTH]);
        let hw = tape.param(&self.bank, self.head_w);
        let hb = tape.param(&self.bank, self.head_b);
        let logits = tape.linear(feats, hw, hb);
        Ok((feats, logits))
    }

    pub fn identity_hash(&self) -> u64 {
        self.bank.identity_hash()
    }

    /// Penultimate features and softmax class posteriors for a batch of
    /// images (inference, f64 outputs). Chunked and order-preserving, so
    /// results are identical regardless of worker count.
    pub fn features_and_probs(&self, images: &[f32], count: usize) -> (Vec<f64>, Vec<f64>) {
        crate::tensor::tune_allocator();
        let w = IMAGE_PIXELS * self.channels;
        assert_eq!(images.len(), count * w, "image buffer size mismatch");
        const CHUNK: usize = 64;
        let chunks: Vec<(Vec<f64>, Vec<f64>)> = images
            .par_chunks(CHUNK * w)
            .map(|chunk| {
                let b = chunk.len() / w;
                let mut tape = Tape::new();
                let t = Tensor::new(chunk.to_vec(), &[b, w]);
                let iv = tape.input(&t, false);
                let (feats, logits) = self.forward(&mut tape, iv).expect("extractor forward");
                let f: Vec<f64> = tape.value(feats).iter().map(|v| *v as f64).collect();
                let mut p = Vec::with_capacity(b * self.n_classes);
                for row in tape.value(logits).chunks_exact(self.n_classes) {
                    let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
                    let exps: Vec<f64> = row.iter().map(|&v| ((v as f64) - mx).exp()).collect();
                    let s: f64 = exps.iter().sum();
                    p.extend(exps.iter().map(|e| e / s));
                }
                (f, p)
            })
            .collect();
        let mut feats = Vec::with_capacity(count * FEATURE_WIDTH);
        let mut probs = Vec::with_capacity(count * self.n_classes);
        for (f, p) in chunks {
            feats.extend(f);
            probs.extend(p);
        }
        (feats, probs)
    }

    /// Argmax class per image.
    pub fn classify(&self, images: &[f32], count: usize) -> Vec<u32> {
        let (_, probs) = self.features_and_probs(images, count);
        probs
            .chunks_exact(self.n_classes)
            .map(|row| {
                let mut best = 0;
                let mut best_v = row[0];
                for (i, &v) in row.iter().enumerate().skip(1) {
                    if v > best_v {
                        best_v = v;
                        best = i;
                    }
                }
                best as u32
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct ExtractorConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub holdout_frac: f64,
    /// Below this held-out accuracy the extractor is not qualified and
    /// metrics refuse to use it.
    pub accuracy_floor: f64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig { epochs: 10, batch: 128, lr: 1e-3, seed: 7, holdout_frac: 0.1, accuracy_floor: 0.8 }
    }
}

#[derive(Clone, Debug)]
pub struct ExtractorReport {
    pub accuracy_trace: Vec<f64>,
    pub holdout_accuracy: f64,
    pub qualified: bool,
}

/// Cross-entropy training of the extractor. Deterministic given the seed.
/// A sub-floor result is reported, not raised: callers decide whether an
/// unqualified extractor is fatal.
pub fn train_feature_extractor(
    data: &Dataset,
    cfg: &ExtractorConfig,
) -> Result<(FeatureExtractor, ExtractorReport), Error> {
    crate::tensor::tune_allocator();
    if data.n_classes == 0 {
        return Err(Error::Input("dataset has no labels".into()));
    }
    let holdout = ((data.len() as f64 * cfg.holdout_frac) as usize).max(1);
    if holdout >= data.len() {
        return Err(Error::Input("holdout fraction leaves no training data".into()));
    }
    let train_n = data.len() - holdout;
    let ex = FeatureExtractor::new(data.channels, data.n_classes, cfg.seed)?;
    let mut ex = ex;
    let mut opt = Optimizer::adam(cfg.lr, 0.9, 0.999, 1e-8);
    let c = data.n_classes;

    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        for idx in batch_indices(train_n, cfg.batch, cfg.seed, epoch) {
            let (raw, labels) = gather_batch(data, &idx);
            let mut tape = Tape::new();
            let t = Tensor::new(raw, &[idx.len(), data.image_width()]);
            let iv = tape.input(&t, false);
            let (_, logits) = ex.forward(&mut tape, iv)?;
            let logp = tape.log_softmax_rows(logits);
            let mut onehot = vec![0.0f32; idx.len() * c];
            for (i, &l) in labels.iter().enumerate() {
                onehot[i * c + l as usize] = 1.0;
            }
            let mask = tape.constant_owned(onehot, &[idx.len(), c]);
            let picked = tape.mul(logp, mask);
            let total = tape.sum_all(picked);
            let loss = tape.mul_const(total, -1.0 / idx.len() as f64);
            let loss_val = tape.value(loss)[0];
            if !loss_val.is_finite() {
                return Err(Error::Numeric(format!("extractor loss became {loss_val} at epoch {epoch}")));
            }
            tape.backward(loss)?;
            tape.export_grads(&mut ex.bank);
            opt.step(&mut ex.bank)?;
            ex.bank.zero_grads();
        }
        // held-out accuracy
        let held: Vec<u32> = (train_n as u32..data.len() as u32).collect();
        let (raw, labels) = gather_batch(data, &held);
        let pred = ex.classify(&raw, held.len());
        let correct = pred.iter().zip(&labels).filter(|(p, l)| *p == *l).count();
        trace.push(correct as f64 / held.len() as f64);
    }
    let holdout_accuracy = *trace.last().unwrap_or(&0.0);
    let report = ExtractorReport {
        accuracy_trace: trace,
        holdout_accuracy,
        qualified: holdout_accuracy >= cfg.accuracy_floor,
    };
    Ok((ex, report))
}

// ── combined report ─────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct MetricReport {
    pub fid: f64,
    pub kid: f64,
    pub is_mean: f64,
    pub is_std: f64,
    pub extractor_hash: u64,
    pub n_real: usize,
    pub n_fake: usize,
}

impl MetricReport {
    pub fn write(&self, path: &Path) -> Result<(), Error> {
        let mut f = std::fs::File::create(path)?;
        write!(f, "{self}")?;
        Ok(())
    }
}

impl std::fmt::Display for MetricReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "fid={}", self.fid)?;
        writeln!(f, "kid={}", self.kid)?;
        writeln!(f, "is={}", self.is_mean)?;
        writeln!(f, "is_std={}", self.is_std)?;
        writeln!(f, "extractor_hash={:016x}", self.extractor_hash)?;
        writeln!(f, "n_real={}", self.n_real)?;
        writeln!(f, "n_fake={}", self.n_fake)
    }
}

/// Run every metric between a real and a generated image set.
pub fn compute_metrics(
    ex: &FeatureExtractor,
    real: &[f32],
    n_real: usize,
    fake: &[f32],
    n_fake: usize,
    is_splits: usize,
) -> Result<MetricReport, Error> {
    let (real_feats, _) = ex.features_and_probs(real, n_real);
    let (fake_feats, fake_probs) = ex.features_and_probs(fake, n_fake);
    let sa = feature_stats(&real_feats, n_real, FEATURE_WIDTH)?;
    let sb = feature_stats(&fake_feats, n_fake, FEATURE_WIDTH)?;
    let fid_v = fid(&sa, &sb)?;
    let kid_v = kid(&real_feats, n_real, &fake_feats, n_fake, FEATURE_WIDTH)?;
    let (is_mean, is_std) = inception_score_splits(&fake_probs, n_fake, ex.n_classes, is_splits)?;
    Ok(MetricReport {
        fid: fid_v,
        kid: kid_v,
        is_mean,
        is_std,
        extractor_hash: ex.identity_hash(),
        n_real,
        n_fake,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn identical_rows_have_zero_covariance() {
        let feats = vec![0.3f64, -0.2, 0.3, -0.2, 0.3, -0.2];
        let s = feature_stats(&feats, 3, 2).unwrap();
        assert!(s.cov.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn unbiased_variance_of_two_samples() {
        let s = feature_stats(&[0.0, 2.0], 2, 1).unwrap();
        assert_eq!(s.mean[0], 1.0);
        assert_eq!(s.cov[0], 2.0);
    }

    #[test]
    fn stats_match_independent_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, d) = (100, 5);
        let feats: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = feature_stats(&feats, n, d).unwrap();
        // oracle: (E[xx^T]*n - n mu mu^T) / (n-1), computed the other way round
        let mut mu = vec![0.0; d];
        for row in feats.chunks_exact(d) {
            for (m, &v) in mu.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        for i in 0..d {
            for j in 0..d {
                let mut exx = 0.0;
                for row in feats.chunks_exact(d) {
                    exx += row[i] * row[j];
                }
                let want = (exx - n as f64 * mu[i] * mu[j]) / (n - 1) as f64;
                assert!((s.cov[i * d + j] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn too_few_samples_is_input_error() {
        assert!(feature_stats(&[1.0], 1, 1).is_err());
    }

    #[test]
    fn fid_of_identical_stats_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let feats: Vec<f64> = (0..50 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = feature_stats(&feats, 50, 4).unwrap();
        assert!(fid(&s, &s).unwrap().abs() <= 1e-6);
    }

    #[test]
    fn one_dim_analytic_fid() {
        // mu 0 vs 1, variance 1 vs 1: FID = 1 exactly
        let a = FeatureStats { mean: vec![0.0], cov: vec![1.0], count: 10, dim: 1 };
        let b = FeatureStats { mean: vec![1.0], cov: vec![1.0], count: 10, dim: 1 };
        assert!((fid(&a, &b).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fid_matches_oracle_on_random_psd_pairs() {
        // oracle: same formula, eigen-solves via nalgebra
        fn fid_oracle(a: &FeatureStats, b: &FeatureStats) -> f64 {
            let d = a.dim;
            let sqrtm = |m: &[f64]| -> Vec<f64> {
                let mat = nalgebra::DMatrix::from_row_slice(d, d, m);
                let eig = mat.symmetric_eigen();
                let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
                let v = eig.eigenvectors;
                (&v * nalgebra::DMatrix::from_diagonal(&vals) * v.transpose())
                    .transpose()
                    .iter()
                    .copied()
                    .collect()
            };
            let sa_half = sqrtm(&a.cov);
            let inner = linalg::matmul_f64(&linalg::matmul_f64(&sa_half, &b.cov, d, d, d), &sa_half, d, d, d);
            let cross = sqrtm(&inner);
            let dmu: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
            dmu + linalg::trace(&a.cov, d) + linalg::trace(&b.cov, d) - 2.0 * linalg::trace(&cross, d)
        }
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let (n, d) = (64, 4);
            let fa: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fb: Vec<f64> = (0..n * d).map(|_| rng.random_range(-0.5..1.5)).collect();
            let sa = feature_stats(&fa, n, d).unwrap();
            let sb = feature_stats(&fb, n, d).unwrap();
            let got = fid(&sa, &sb).unwrap();
            let want = fid_oracle(&sa, &sb);
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn fid_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (n, d) = (40, 3);
        let fa: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fb: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sa = feature_stats(&fa, n, d).unwrap();
        let sb = feature_stats(&fb, n, d).unwrap();
        let ab = fid(&sa, &sb).unwrap();
        let ba = fid(&sb, &sa).unwrap();
        assert!((ab - ba).abs() <= 1e-6);
    }

    // Exhaustive double-loop reference, structured per-term.
    fn kid_oracle(x: &[f64], nx: usize, y: &[f64], ny: usize, d: usize) -> f64 {
        let k = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
            (dot / d as f64 + 1.0).powi(3)
        };
        let mut t1 = 0.0;
        for i in 0..nx {
            for j in 0..nx {
                if i != j {
                    t1 += k(&x[i * d..(i + 1) * d], &x[j * d..(j + 1) * d]);
                }
            }
        }
        let mut t2 = 0.0;
        for i in 0..ny {
            for j in 0..ny {
                if i != j {
                    t2 += k(&y[i * d..(i + 1) * d], &y[j * d..(j + 1) * d]);
                }
            }
        }
        let mut t3 = 0.0;
        for i in 0..nx {
            for j in 0..ny {
                t3 += k(&x[i * d..(i + 1) * d], &y[j * d..(j + 1) * d]);
            }
        }
        t1 / (nx * (nx - 1)) as f64 + t2 / (ny * (ny - 1)) as f64 - 2.0 * t3 / (nx * ny) as f64
    }

    #[test]
    fn kid_matches_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for n in [2usize, 5, 8, 16] {
            let d = 6;
            let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = kid(&x, n, &y, n, d).unwrap();
            let want = kid_oracle(&x, n, &y, n, d);
            assert!((got - want).abs() < 1e-12, "n={n}: {got} vs {want}");
        }
    }

    #[test]
    fn kid_on_identical_multisets_is_nonpositive() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let (n, d) = (8, 4);
        let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = kid(&x, n, &x, n, d).unwrap();
        let want = kid_oracle(&x, n, &x, n, d);
        assert!((got - want).abs() < 1e-12);
        assert!(got <= 1e-12, "unbiased estimate on equal sets must not be positive: {got}");
    }

    #[test]
    fn kid_of_zero_features_is_zero() {
        let z = vec![0.0; 4 * 3];
        assert!(kid(&z, 4, &z, 4, 3).unwrap().abs() < 1e-15);
    }

    #[test]
    fn uniform_rows_score_one() {
        let probs = vec![0.1f64; 20 * 10];
        let s = inception_score(&probs, 20, 10).unwrap();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn distinct_onehots_score_n() {
        let n = 7;
        let mut probs = vec![0.0f64; n * n];
        for i in 0..n {
            probs[i * n + i] = 1.0;
        }
        let s = inception_score(&probs, n, n).unwrap();
        assert!((s - n as f64).abs() < 1e-9);
    }

    #[test]
    fn score_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (n, c) = (12, 5);
        let mut probs = vec![0.0f64; n * c];
        for row in probs.chunks_exact_mut(c) {
            let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            for (o, r) in row.iter_mut().zip(&raw) {
                *o = r / s;
            }
        }
        // direct-summation reference with a different loop structure
        let mut marginal = vec![0.0; c];
        for j in 0..c {
            for i in 0..n {
                marginal[j] += probs[i * c + j] / n as f64;
            }
        }
        let mut total = 0.0;
        for j in 0..c {
            for i in 0..n {
                let p = probs[i * c + j];
                total += p * (p / marginal[j]).ln();
            }
        }
        let want = (total / n as f64).exp();
        let got = inception_score(&probs, n, c).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn unnormalized_row_is_input_error() {
        let probs = vec![0.3f64, 0.3];
        assert!(inception_score(&probs, 1, 2).is_err());
    }

    #[test]
    fn score_range_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..50 {
            let (n, c) = (10, 6);
            let mut probs = vec![0.0f64; n * c];
            for row in probs.chunks_exact_mut(c) {
                let raw: Vec<f64> = (0..c).map(|_| rng.random_range(1e-6..1.0)).collect();
                let s: f64 = raw.iter().sum();
                for (o, r) in row.iter_mut().zip(&raw) {
                    *o = r / s;
                }
            }
            let s = inception_score(&probs, n, c).unwrap();
            assert!(s >= 1.0 - 1e-9 && s <= c as f64 + 1e-9);
        }
    }

    #[test]
    fn extractor_feature_width_is_64() {
        assert_eq!(FEATURE_WIDTH, 64);
        let ex = FeatureExtractor::new(1, 10, 1).unwrap();
        let mut tape = Tape::new();
        let imgs = Tensor::new(vec![0.0f32; 2 * IMAGE_PIXELS], &[2, IMAGE_PIXELS]);
        let iv = tape.input(&imgs, false);
        let (feats, logits) = ex.forward(&mut tape, iv).unwrap();
        assert_eq!(tape.shape(feats), &[2, 64]);
        assert_eq!(tape.shape(logits), &[2, 10]);
    }

    #[test]
    fn extraction_is_deterministic_and_batch_invariant() {
        let ex = FeatureExtractor::new(1, 10, 2).unwrap();
        let ds = crate::data::synthetic_blobs(130, 10, 3).unwrap();
        let (f1, p1) = ex.features_and_probs(&ds.images, ds.len());
        let (f2, p2) = ex.features_and_probs(&ds.images, ds.len());
        assert_eq!(f1, f2);
        assert_eq!(p1, p2);
    }
}
