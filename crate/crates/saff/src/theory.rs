//! Numerical verification of the intermediate-domain loss analysis.
//!
//! The latent feature space built by per-block fusion is combinatorially
//! huge; [`latent_space_size`] evaluates the exact per-block count and its
//! compounding across blocks in big-integer arithmetic. Under a
//! diagonal-Gaussian model of per-class bottleneck features, the
//! intermediate-domain cross-entropy in the infinite-sampling limit admits a
//! closed-form upper bound through the Gaussian moment generating function
//! and Jensen's inequality; [`mc_estimate`] approaches the limit by
//! sampling, [`limit_estimate`] is a high-draw reference with common random
//! numbers, and [`mgf_upper_bound`] evaluates the bound.
//!
//! All three reductions share one mixture-averaging path, so degenerate
//! cases (zero variance, zero classifier) collapse to bit-identical values.

use num_bigint::BigUint;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::stream;

/// Diagonal-Gaussian model of per-class features with class proportions.
#[derive(Debug, Clone)]
pub struct GaussianClassModel {
    /// Per-class mean vectors, `[class][channel]`.
    pub means: Vec<Vec<f64>>,
    /// Per-class diagonal variances, nonnegative (zero = point mass).
    pub variances: Vec<Vec<f64>>,
    /// Class proportions in the latent space, on the simplex.
    pub proportions: Vec<f64>,
}

impl GaussianClassModel {
    pub fn class_count(&self) -> usize {
        self.means.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.means.first().map(|m| m.len()).unwrap_or(0)
    }

    pub fn uniform_proportions(class_count: usize) -> Vec<f64> {
        vec![1.0 / class_count as f64; class_count]
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.class_count();
        let c = self.feature_dim();
        if k == 0 || c == 0 {
            return Err(Error::validation("empty Gaussian class model"));
        }
        if self.variances.len() != k || self.proportions.len() != k {
            return Err(Error::validation("per-class field lengths disagree"));
        }
        for (mean, var) in self.means.iter().zip(&self.variances) {
            if mean.len() != c || var.len() != c {
                return Err(Error::validation("feature dimensions disagree"));
            }
            if var.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(Error::validation("variances must be finite and nonnegative"));
            }
        }
        let sum: f64 = self.proportions.iter().sum();
        if self.proportions.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::validation(
                "proportions must be nonnegative and sum to one",
            ));
        }
        Ok(())
    }
}

/// Weight matrix and bias of the classifier head, one weight row per class.
#[derive(Debug, Clone)]
pub struct ClassifierAffine {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl ClassifierAffine {
    pub fn zeros(class_count: usize, feature_dim: usize) -> Self {
        ClassifierAffine {
            weights: vec![vec![0.0; feature_dim]; class_count],
            bias: vec![0.0; class_count],
        }
    }

    pub fn class_count(&self) -> usize {
        self.weights.len()
    }
}

// ── Latent-space cardinality ────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentCount {
    /// Features reachable after one block of the fusion strategy.
    pub per_block: BigUint,
    /// The per-block count compounded across all blocks (`per_block^L`).
    pub compounded: BigUint,
}

/// `C(n_source, batch)² · C(n_target, batch) · A(batch, batch/3)³` per
/// block, where `A` counts ordered draws; compounding raises the per-block
/// count to the number of blocks.
pub fn latent_space_size(
    n_source: usize,
    n_target: usize,
    batch: usize,
    blocks: usize,
) -> Result<LatentCount> {
    if batch == 0 || batch % 3 != 0 {
        return Err(Error::contract(format!(
            "batch must be positive and divisible by 3, got {batch}"
        )));
    }
    if batch > n_source || batch > n_target {
        return Err(Error::contract(format!(
            "batch {batch} exceeds a domain size ({n_source}, {n_target})"
        )));
    }
    if blocks == 0 {
        return Err(Error::contract("at least one block is required"));
    }
    let source_choices = binomial(n_source, batch);
    let target_choices = binomial(n_target, batch);
    let draws = arrangements(batch, batch / 3);
    let per_block = &source_choices * &source_choices * target_choices * draws.pow(3);
    let compounded = per_block.pow(blocks as u32);
    Ok(LatentCount {
        per_block,
        compounded,
    })
}

fn binomial(n: usize, k: usize) -> BigUint {
    let mut out = BigUint::from(1u32);
    for i in 1..=k {
        out = out * BigUint::from(n - k + i) / BigUint::from(i);
    }
    out
}

fn arrangements(n: usize, k: usize) -> BigUint {
    let mut out = BigUint::from(1u32);
    for i in 0..k {
        out *= BigUint::from(n - i);
    }
    out
}

// ── Shared numeric helpers ──────────────────────────────────────────────

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

fn logits_of(clf: &ClassifierAffine, features: &[f64]) -> Vec<f64> {
    clf.weights
        .iter()
        .zip(&clf.bias)
        .map(|(w, &b)| w.iter().zip(features).map(|(wi, fi)| wi * fi).sum::<f64>() + b)
        .collect()
}

/// `-log softmax_label(W·f + b)`, evaluated stably.
pub fn cross_entropy_at(clf: &ClassifierAffine, features: &[f64], label: usize) -> f64 {
    let logits = logits_of(clf, features);
    log_sum_exp(&logits) - logits[label]
}

/// Running mean that is exact on constant sequences.
#[derive(Debug, Clone, Copy, Default)]
struct RunningMean {
    mean: f64,
    m2: f64,
    count: usize,
}

impl RunningMean {
    fn push(&mut self, value: f64) {
        self.count += 1;
        let delta = value - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (value - self.mean);
    }

    fn mean(&self) -> f64 {
        self.mean
    }

    /// Standard error of the mean; zero below two observations.
    fn stderr(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        (self.m2 / (self.count - 1) as f64 / self.count as f64).sqrt()
    }
}

/// Anchor-averaged class mixture: mean over anchors of
/// `Σ_k proportions[k] · term(k, label_n)`. Every estimator and the bound
/// reduce through this one path.
fn mixture_anchor_mean<F>(model: &GaussianClassModel, labels: &[usize], mut term: F) -> f64
where
    F: FnMut(usize, usize) -> f64,
{
    let mut anchors = RunningMean::default();
    for &y in labels {
        let mut acc = 0.0;
        for (k, &p) in model.proportions.iter().enumerate() {
            acc += p * term(k, y);
        }
        anchors.push(acc);
    }
    anchors.mean()
}

// ── Monte-Carlo estimation and the closed-form bound ────────────────────

#[derive(Debug, Clone, Copy)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub draws: usize,
}

/// Finite-sampling estimate of the intermediate-domain loss: per draw, one
/// fused feature per (anchor, class) from that class's Gaussian, with the
/// class mixture weighted exactly by the model proportions.
pub fn mc_estimate(
    model: &GaussianClassModel,
    clf: &ClassifierAffine,
    labels: &[usize],
    draws: usize,
    seed: u64,
) -> Result<McEstimate> {
    validate_inputs(model, clf, labels)?;
    if draws == 0 {
        return Err(Error::contract("at least one draw is required"));
    }
    let dim = model.feature_dim();
    let mut rng = stream(seed, "theory.mc");
    let mut feature = vec![0.0; dim];
    let mut per_draw = RunningMean::default();
    for _ in 0..draws {
        let x = mixture_anchor_mean(model, labels, |k, y| {
            for ((f, &m), &v) in feature
                .iter_mut()
                .zip(&model.means[k])
                .zip(&model.variances[k])
            {
                let z: f64 = StandardNormal.sample(&mut rng);
                *f = m + v.sqrt() * z;
            }
            cross_entropy_at(clf, &feature, y)
        });
        per_draw.push(x);
    }
    Ok(McEstimate {
        mean: per_draw.mean(),
        stderr: per_draw.stderr(),
        draws,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct LimitEstimate {
    pub mean: f64,
    pub stderr: f64,
    /// Half-width of the 95% confidence interval.
    pub ci95: f64,
    pub draws: usize,
}

pub const LIMIT_DRAWS: usize = 1_000_000;

/// High-draw reference for the infinite-sampling limit. One standard-normal
/// vector per draw is shared across anchors and classes (common random
/// numbers), which removes cross-term sampling noise from the comparison.
pub fn limit_estimate(
    model: &GaussianClassModel,
    clf: &ClassifierAffine,
    labels: &[usize],
    draws: usize,
    seed: u64,
) -> Result<LimitEstimate> {
    validate_inputs(model, clf, labels)?;
    if draws == 0 {
        return Err(Error::contract("at least one draw is required"));
    }
    let dim = model.feature_dim();
    let k_count = model.class_count();
    let mut rng = stream(seed, "theory.limit");
    let mut z = vec![0.0; dim];
    let mut feature = vec![0.0; dim];
    let mut ce_per_class = vec![vec![0.0; k_count]; k_count];
    let mut per_draw = RunningMean::default();
    for _ in 0..draws {
        for zi in z.iter_mut() {
            *zi = StandardNormal.sample(&mut rng);
        }
        // Per class k, the shared draw lands at mu_k + sqrt(v_k) ⊙ z;
        // cross-entropies against every possible label are reused below.
        for k in 0..k_count {
            for ((f, &m), (&v, &zi)) in feature
                .iter_mut()
                .zip(&model.means[k])
                .zip(model.variances[k].iter().zip(&z))
            {
                *f = m + v.sqrt() * zi;
            }
            let logits = logits_of(clf, &feature);
            let lse = log_sum_exp(&logits);
            for (y, slot) in ce_per_class[k].iter_mut().enumerate() {
                *slot = lse - logits[y];
            }
        }
        let x = mixture_anchor_mean(model, labels, |k, y| ce_per_class[k][y]);
        per_draw.push(x);
    }
    let stderr = per_draw.stderr();
    Ok(LimitEstimate {
        mean: per_draw.mean(),
        stderr,
        ci95: 1.96 * stderr,
        draws,
    })
}

/// `E[e^{w·x}]` for `x ~ N(mu, diag(var))`.
pub fn gaussian_mgf(w: &[f64], mu: &[f64], var: &[f64]) -> f64 {
    let lin: f64 = w.iter().zip(mu).map(|(a, b)| a * b).sum();
    let quad: f64 = w.iter().zip(var).map(|(a, &v)| a * a * v).sum();
    (lin + 0.5 * quad).exp()
}

/// Closed-form upper bound on the infinite-sampling loss: per (anchor,
/// class), `−log(e^{A_y} / Σ_{k'} e^{A_{k'}})` with
/// `A_{k'} = w_{k'}·mu + b_{k'} + ½ (w_{k'} − w_y)ᵀ diag(var) (w_{k'} − w_y)`,
/// aggregated with the class proportions. The anchor-label term's quadratic
/// part is identically zero, so `A_y` reduces to the plain affine logit.
pub fn mgf_upper_bound(
    model: &GaussianClassModel,
    clf: &ClassifierAffine,
    labels: &[usize],
) -> Result<f64> {
    validate_inputs(model, clf, labels)?;
    let k_count = model.class_count();
    let mut a = vec![0.0; k_count];
    Ok(mixture_anchor_mean(model, labels, |k, y| {
        let logits = logits_of(clf, &model.means[k]);
        let var = &model.variances[k];
        let w_y = &clf.weights[y];
        for (kp, slot) in a.iter_mut().enumerate() {
            let quad: f64 = clf.weights[kp]
                .iter()
                .zip(w_y)
                .zip(var)
                .map(|((&wk, &wy), &v)| {
                    let d = wk - wy;
                    d * d * v
                })
                .sum();
            *slot = logits[kp] + 0.5 * quad;
        }
        log_sum_exp(&a) - a[y]
    }))
}

/// Exact loss when every feature sits at its class mean (zero variance).
pub fn cross_entropy_at_means(
    model: &GaussianClassModel,
    clf: &ClassifierAffine,
    labels: &[usize],
) -> Result<f64> {
    validate_inputs(model, clf, labels)?;
    Ok(mixture_anchor_mean(model, labels, |k, y| {
        cross_entropy_at(clf, &model.means[k], y)
    }))
}

fn validate_inputs(
    model: &GaussianClassModel,
    clf: &ClassifierAffine,
    labels: &[usize],
) -> Result<()> {
    model.validate()?;
    if clf.class_count() != model.class_count()
        || clf.weights.iter().any(|w| w.len() != model.feature_dim())
        || clf.bias.len() != model.class_count()
    {
        return Err(Error::dimension(
            "classifier shape does not match the class model",
        ));
    }
    if labels.is_empty() {
        return Err(Error::contract("at least one anchor label is required"));
    }
    if labels.iter().any(|&y| y >= model.class_count()) {
        return Err(Error::contract("anchor label out of class range"));
    }
    Ok(())
}

// ── Convergence report ──────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ConvergenceRow {
    pub draws: usize,
    /// Seed-averaged estimate at this draw count.
    pub estimate: f64,
    /// Seed-averaged standard error at this draw count.
    pub stderr: f64,
    pub bound: f64,
    /// `bound − estimate`.
    pub gap: f64,
    /// Seed-averaged `|estimate(2M) − estimate(M)|`.
    pub doubling_diff: f64,
    /// Whether the doubling difference stays within five combined errors.
    pub cauchy_pass: bool,
}

/// Estimate the loss along an ascending draw schedule, pairing each entry
/// with an independent double-draw run for the Cauchy criterion
/// `|est(2M) − est(M)| ≤ 5·sqrt(se(M)² + se(2M)²)`, averaged over seeds.
pub fn convergence_report(
    model: &GaussianClassModel,
    clf: &ClassifierAffine,
    labels: &[usize],
    schedule: &[usize],
    seeds: &[u64],
) -> Result<Vec<ConvergenceRow>> {
    if schedule.is_empty() || schedule.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::contract("draw schedule must be strictly ascending"));
    }
    if seeds.is_empty() {
        return Err(Error::contract("at least one seed is required"));
    }
    let bound = mgf_upper_bound(model, clf, labels)?;
    let mut rows = Vec::with_capacity(schedule.len());
    for &m in schedule {
        let mut est = RunningMean::default();
        let mut se = RunningMean::default();
        let mut diff = RunningMean::default();
        let mut combined = RunningMean::default();
        for (i, &seed) in seeds.iter().enumerate() {
            let single = mc_estimate(model, clf, labels, m, seed.wrapping_add(i as u64))?;
            let double = mc_estimate(
                model,
                clf,
                labels,
                2 * m,
                seed.wrapping_add(0x9e37_79b9).wrapping_add(i as u64),
            )?;
            est.push(single.mean);
            se.push(single.stderr);
            diff.push((double.mean - single.mean).abs());
            combined.push((single.stderr.powi(2) + double.stderr.powi(2)).sqrt());
        }
        rows.push(ConvergenceRow {
            draws: m,
            estimate: est.mean(),
            stderr: se.mean(),
            bound,
            gap: bound - est.mean(),
            doubling_diff: diff.mean(),
            cauchy_pass: diff.mean() <= 5.0 * combined.mean(),
        });
    }
    Ok(rows)
}

/// Seeded random (model, classifier, labels) configuration with random
/// class count and feature width; used to stress the bound.
pub fn random_configuration(seed: u64) -> (GaussianClassModel, ClassifierAffine, Vec<usize>) {
    use rand::Rng;
    let mut rng = stream(seed, "theory.config");
    let k = rng.random_range(2..6usize);
    let c = rng.random_range(2..8usize);
    seeded_configuration(seed, k, c)
}

/// Seeded random configuration at a fixed class count and feature width.
pub fn seeded_configuration(
    seed: u64,
    class_count: usize,
    feature_dim: usize,
) -> (GaussianClassModel, ClassifierAffine, Vec<usize>) {
    use rand::Rng;
    let (k, c) = (class_count, feature_dim);
    let mut rng = stream(seed, "theory.config.fixed");
    let means = (0..k)
        .map(|_| (0..c).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let variances = (0..k)
        .map(|_| (0..c).map(|_| rng.random_range(0.0..1.5)).collect())
        .collect();
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let proportions = raw.into_iter().map(|p| p / total).collect();
    let model = GaussianClassModel {
        means,
        variances,
        proportions,
    };
    let clf = ClassifierAffine {
        weights: (0..k)
            .map(|_| (0..c).map(|_| rng.random_range(-1.5..1.5)).collect())
            .collect(),
        bias: (0..k).map(|_| rng.random_range(-0.5..0.5)).collect(),
    };
    let anchor_count = rng.random_range(2..8usize).max(k.min(4));
    let labels = (0..anchor_count).map(|i| (i + rng.random_range(0..k)) % k).collect();
    (model, clf, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive oracle: count k-subsets of n by enumeration.
    fn enumerate_subsets(n: usize, k: usize) -> u64 {
        fn rec(start: usize, n: usize, left: usize) -> u64 {
            if left == 0 {
                return 1;
            }
            (start..n).map(|i| rec(i + 1, n, left - 1)).sum()
        }
        rec(0, n, k)
    }

    /// Exhaustive oracle: count ordered k-draws from n by enumeration.
    fn enumerate_arrangements(n: usize, k: usize) -> u64 {
        fn rec(used: u32, n: usize, left: usize) -> u64 {
            if left == 0 {
                return 1;
            }
            (0..n)
                .filter(|i| used & (1 << i) == 0)
                .map(|i| rec(used | (1 << i), n, left - 1))
                .sum()
        }
        rec(0, n, k)
    }

    fn uniform_model(k: usize, c: usize) -> GaussianClassModel {
        GaussianClassModel {
            means: (0..k)
                .map(|i| (0..c).map(|j| (i * c + j) as f64 * 0.1 - 0.5).collect())
                .collect(),
            variances: vec![vec![0.4; c]; k],
            proportions: GaussianClassModel::uniform_proportions(k),
        }
    }

    #[test]
    fn minimal_latent_count_is_twenty_seven() {
        // C(3,3)² · C(3,3) · A(3,1)³ = 1 · 1 · 27.
        let count = latent_space_size(3, 3, 3, 1).unwrap();
        assert_eq!(count.per_block, BigUint::from(27u32));
        assert_eq!(count.compounded, BigUint::from(27u32));
        let two_blocks = latent_space_size(3, 3, 3, 2).unwrap();
        assert_eq!(two_blocks.per_block, BigUint::from(27u32));
        assert_eq!(two_blocks.compounded, BigUint::from(27u32 * 27));
    }

    #[test]
    fn latent_count_matches_exhaustive_enumeration() {
        for n_s in 3..=6 {
            for n_t in 3..=6 {
                let got = latent_space_size(n_s, n_t, 3, 1).unwrap().per_block;
                let subsets_s = enumerate_subsets(n_s, 3);
                let subsets_t = enumerate_subsets(n_t, 3);
                let draws = enumerate_arrangements(3, 1);
                let expect = subsets_s * subsets_s * subsets_t * draws.pow(3);
                assert_eq!(got, BigUint::from(expect), "n_s={n_s} n_t={n_t}");
            }
        }
    }

    #[test]
    fn latent_count_is_at_least_one_and_overflows_u64_at_scale() {
        let count = latent_space_size(600, 600, 18, 4).unwrap();
        assert!(count.per_block >= BigUint::from(1u32));
        assert!(count.per_block > BigUint::from(u64::MAX));
    }

    #[test]
    fn latent_count_rejects_bad_preconditions() {
        assert!(latent_space_size(10, 10, 4, 1).is_err());
        assert!(latent_space_size(2, 10, 3, 1).is_err());
        assert!(latent_space_size(10, 10, 3, 0).is_err());
    }

    #[test]
    fn zero_classifier_gives_log_k_everywhere() {
        let model = uniform_model(4, 3);
        let clf = ClassifierAffine::zeros(4, 3);
        let labels = [0, 1, 2, 3, 1];
        let mc = mc_estimate(&model, &clf, &labels, 50, 1).unwrap();
        let limit = limit_estimate(&model, &clf, &labels, 100, 1).unwrap();
        let bound = mgf_upper_bound(&model, &clf, &labels).unwrap();
        let plain = cross_entropy_at_means(&model, &clf, &labels).unwrap();
        let ln_k = (4.0f64).ln();
        assert_eq!(mc.mean.to_bits(), bound.to_bits());
        assert_eq!(mc.mean.to_bits(), limit.mean.to_bits());
        assert_eq!(mc.mean.to_bits(), plain.to_bits());
        assert!((mc.mean - ln_k).abs() <= 4.0 * f64::EPSILON);
        assert_eq!(mc.stderr, 0.0);
    }

    #[test]
    fn zero_variance_collapses_to_plain_cross_entropy() {
        let mut model = uniform_model(3, 4);
        model.variances = vec![vec![0.0; 4]; 3];
        let clf = ClassifierAffine {
            weights: vec![
                vec![0.7, -0.3, 0.2, 0.5],
                vec![-0.4, 0.6, -0.1, 0.3],
                vec![0.1, 0.2, -0.8, -0.2],
            ],
            bias: vec![0.05, -0.1, 0.2],
        };
        let labels = vec![0, 2, 1, 1, 0];
        let mc = mc_estimate(&model, &clf, &labels, 200, 5).unwrap();
        let bound = mgf_upper_bound(&model, &clf, &labels).unwrap();
        let plain = cross_entropy_at_means(&model, &clf, &labels).unwrap();
        assert!((mc.mean - plain).abs() <= 1e-12, "{} vs {plain}", mc.mean);
        assert!((bound - plain).abs() <= 1e-12, "{bound} vs {plain}");
        assert_eq!(mc.stderr, 0.0);
    }

    #[test]
    fn scalar_standard_normal_mgf_reference() {
        // E[e^x] for x ~ N(0, 1) is e^{1/2}.
        let value = gaussian_mgf(&[1.0], &[0.0], &[1.0]);
        assert!((value - 1.6487212707001282).abs() < 1e-12);
    }

    #[test]
    fn bound_dominates_the_monte_carlo_estimate() {
        for seed in 0..25u64 {
            let (model, clf, labels) = random_configuration(seed);
            let mc = mc_estimate(&model, &clf, &labels, 20_000, seed).unwrap();
            let bound = mgf_upper_bound(&model, &clf, &labels).unwrap();
            assert!(
                bound >= mc.mean - 4.0 * mc.stderr,
                "seed {seed}: bound {bound} < estimate {} − 4·{}",
                mc.mean,
                mc.stderr
            );
        }
    }

    #[test]
    fn estimates_tighten_with_more_draws() {
        let (model, clf, labels) = random_configuration(3);
        let rows =
            convergence_report(&model, &clf, &labels, &[500, 1000, 2000, 4000], &[1, 2, 3, 4])
                .unwrap();
        assert!(rows.iter().all(|r| r.cauchy_pass));
        // Standard errors fall roughly as 1/sqrt(draws).
        assert!(rows.last().unwrap().stderr < rows[0].stderr);
        // The estimates approach the high-draw reference.
        let reference = limit_estimate(&model, &clf, &labels, 100_000, 9).unwrap();
        let last = rows.last().unwrap();
        assert!(
            (last.estimate - reference.mean).abs() <= 6.0 * last.stderr + reference.ci95,
            "estimate {} vs reference {}",
            last.estimate,
            reference.mean
        );
    }

    #[test]
    fn report_rejects_unsorted_schedules() {
        let (model, clf, labels) = random_configuration(4);
        assert!(convergence_report(&model, &clf, &labels, &[100, 100], &[1]).is_err());
        assert!(convergence_report(&model, &clf, &labels, &[], &[1]).is_err());
    }

    #[test]
    fn limit_estimate_agrees_with_plain_mc() {
        let (model, clf, labels) = random_configuration(12);
        let a = mc_estimate(&model, &clf, &labels, 60_000, 3).unwrap();
        let b = limit_estimate(&model, &clf, &labels, 60_000, 4).unwrap();
        assert!(
            (a.mean - b.mean).abs() <= 4.0 * (a.stderr + b.stderr),
            "{} vs {}",
            a.mean,
            b.mean
        );
    }
}
