//! The self-intermediate-domain learning strategy.
//!
//! After every extractor block, rows are drawn from the three domains at a
//! one-third scale, their channel statistics become the style, and the
//! middle branch's features are rewritten: cleaned of their own statistics,
//! then rescaled and reshifted by learned projections of the sampled style.
//! Source and target features are read, never written.

use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::LinearVars;
use crate::rng::stream;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone)]
pub struct SsidConfig {
    /// Clean the middle branch's own statistics before restyling.
    pub pre_normalize: bool,
    /// Treat sampled style statistics as constants, so no gradient reaches
    /// the sampled source/target rows through them.
    pub detach_stats: bool,
    /// Guard for divisions and the deviation form `sqrt(var + epsilon)`.
    pub epsilon: f64,
}

impl Default for SsidConfig {
    fn default() -> Self {
        SsidConfig {
            pre_normalize: true,
            detach_stats: true,
            epsilon: 1e-5,
        }
    }
}

/// The intermediate sample set: mirrors the source set (same indices, same
/// labels); only its in-network features are ever rewritten.
#[derive(Debug, Clone)]
pub struct SsidState {
    pub set: Dataset,
    pub config: SsidConfig,
}

impl SsidState {
    pub fn init_from_source(source: &Dataset, config: SsidConfig) -> Self {
        let mut set = source.clone();
        set.domain = crate::data::Domain::Ssid;
        SsidState { set, config }
    }

    /// Labels must track the source set exactly, forever.
    pub fn labels_match(&self, source: &Dataset) -> bool {
        self.set.len() == source.len()
            && self
                .set
                .samples
                .iter()
                .zip(&source.samples)
                .all(|(a, b)| a.index == b.index && a.label == b.label)
    }
}

/// Style of one fused batch: per-row channel mean and deviation
/// (`sqrt(var + epsilon)`), shape `[batch, channels]` each.
#[derive(Debug, Clone, Copy)]
pub struct StyleStats {
    pub mu: Var,
    pub sigma: Var,
}

/// Remove channel statistics: `(f − mean) / sqrt(var + epsilon)` per
/// (sample, channel) over the token axis.
pub fn clean_object(tape: &mut Tape, f: Var, epsilon: f64) -> Result<Var> {
    let (mean, var) = tape.channel_mean_var(f)?;
    let centered = tape.broadcast_sub(f, mean)?;
    let std = tape.sqrt_eps(var, epsilon);
    let inv = tape.recip(std);
    tape.broadcast_mul(centered, inv)
}

/// Choose `batch/3` distinct rows from each domain, concatenate, and
/// shuffle. Entries are `(domain, row)` with domains 0 = source,
/// 1 = intermediate, 2 = target.
pub fn sample_thirds(rng: &mut ChaCha8Rng, batch: usize) -> Result<Vec<(usize, usize)>> {
    if batch == 0 || batch % 3 != 0 {
        return Err(Error::contract(format!(
            "one-third sampling needs a positive batch divisible by 3, got {batch}"
        )));
    }
    let third = batch / 3;
    let mut picks = Vec::with_capacity(batch);
    for domain in 0..3 {
        for row in draw_without_replacement(rng, batch, third) {
            picks.push((domain, row));
        }
    }
    shuffle(rng, &mut picks);
    Ok(picks)
}

/// Partial Fisher–Yates: `k` distinct values from `0..n`.
fn draw_without_replacement(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    use rand::Rng;
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    use rand::Rng;
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Channel statistics of the sampled cross-domain batch.
///
/// Detached mode computes them outside the tape and inserts constants;
/// attached mode routes gradients back into the sampled rows.
pub fn style_stats(
    tape: &mut Tape,
    config: &SsidConfig,
    features: [Var; 3],
    picks: &[(usize, usize)],
) -> Result<StyleStats> {
    if config.detach_stats {
        let (b, n, c) = match tape.shape(features[0]) {
            [b, n, c] => (*b, *n, *c),
            s => {
                return Err(Error::dimension(format!(
                    "style_stats: expected [batch, tokens, channels], got {s:?}"
                )))
            }
        };
        let mut mu = vec![0.0; picks.len() * c];
        let mut sigma = vec![0.0; picks.len() * c];
        for (j, &(domain, row)) in picks.iter().enumerate() {
            if domain >= 3 || row >= b {
                return Err(Error::contract(format!(
                    "style_stats: pick ({domain}, {row}) out of range"
                )));
            }
            let data = tape.data(features[domain]);
            let base = row * n * c;
            for ci in 0..c {
                let mut m = 0.0;
                for ni in 0..n {
                    m += data[base + ni * c + ci];
                }
                m /= n as f64;
                let mut v = 0.0;
                for ni in 0..n {
                    let d = data[base + ni * c + ci] - m;
                    v += d * d;
                }
                v /= n as f64;
                mu[j * c + ci] = m;
                sigma[j * c + ci] = (v + config.epsilon).sqrt();
            }
        }
        Ok(StyleStats {
            mu: tape.constant(vec![picks.len(), c], mu),
            sigma: tape.constant(vec![picks.len(), c], sigma),
        })
    } else {
        let sampled = tape.compose_rows(features, picks)?;
        let (mu, var) = tape.channel_mean_var(sampled)?;
        let sigma = tape.sqrt_eps(var, config.epsilon);
        Ok(StyleStats { mu, sigma })
    }
}

/// Rewrite the middle branch: `g ⊗ FCσ(sigma) ⊕ FCμ(mu)`, where `g` is the
/// cleaned (or raw, if pre-normalization is off) feature map. Row `j` of the
/// statistics styles row `j` of the map; labels ride along untouched.
pub fn fuse(
    tape: &mut Tape,
    config: &SsidConfig,
    f_mid: Var,
    stats: StyleStats,
    fc_mu: LinearVars,
    fc_sigma: LinearVars,
) -> Result<Var> {
    let g = if config.pre_normalize {
        clean_object(tape, f_mid, config.epsilon)?
    } else {
        f_mid
    };
    let scale = fc_sigma.apply(tape, stats.sigma)?;
    let shift = fc_mu.apply(tape, stats.mu)?;
    let scaled = tape.broadcast_mul(g, scale)?;
    tape.broadcast_add(scaled, shift)
}

/// One post-block application: sample thirds, extract style, fuse. Returns
/// the new middle-branch features; source and target maps are untouched.
pub fn apply_strategy(
    tape: &mut Tape,
    config: &SsidConfig,
    features: [Var; 3],
    fc_mu: LinearVars,
    fc_sigma: LinearVars,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let batch = match tape.shape(features[0]) {
        [b, ..] => *b,
        _ => return Err(Error::dimension("apply_strategy: scalar features")),
    };
    let picks = sample_thirds(rng, batch)?;
    let stats = style_stats(tape, config, features, &picks)?;
    fuse(tape, config, features[1], stats, fc_mu, fc_sigma)
}

/// RNG stream for the fusion sampler at a given epoch.
pub fn sampler_stream(seed: u64, epoch: usize) -> ChaCha8Rng {
    stream(seed, &format!("ssid.{epoch}"))
}
