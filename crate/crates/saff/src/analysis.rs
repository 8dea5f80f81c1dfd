//! Post-hoc transferability and discriminability metrics: per-domain class
//! centers over bottleneck features, the average inter-domain distance
//! between corresponding centers, and pairwise-distance histograms under a
//! random low-dimensional projection.

use rand_distr::{Distribution, StandardNormal};

use crate::data::{Dataset, Domain};
use crate::error::{Error, Result};
use crate::model::{forward, predict, ModelParams};
use crate::rng::stream;
use crate::tape::Tape;

/// Per-class mean bottleneck features of one domain; a class nobody mapped
/// to is flagged absent and excluded from distances.
#[derive(Debug, Clone)]
pub struct CenterSet {
    pub dim: usize,
    pub centers: Vec<Option<Vec<f64>>>,
}

/// Traverse a dataset with frozen parameters and average bottleneck
/// features per class. Source-side sets group by true labels; target sets
/// group by predictions (their labels stay reserved for accuracy).
pub fn class_centers(params: &ModelParams, set: &Dataset) -> Result<CenterSet> {
    let dim = params.dims.bottleneck_dim;
    let k = params.dims.class_count;
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for batch in crate::data::ordered_batches(set, 64) {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let rec = forward(&mut tape, &vars, &batch.xs, None)?;
        let feats = tape.data(rec.bottleneck_features);
        let classes: Vec<usize> = if set.domain == Domain::Target {
            predict(&tape.detach(rec.logits))
        } else {
            batch
                .labels
                .clone()
                .ok_or_else(|| Error::validation("labeled set required for true-label centers"))?
        };
        for (row, &class) in classes.iter().enumerate() {
            if class >= k {
                return Err(Error::contract(format!("class {class} out of range")));
            }
            counts[class] += 1;
            for d in 0..dim {
                sums[class][d] += feats[row * dim + d];
            }
        }
    }
    let centers = sums
        .into_iter()
        .zip(&counts)
        .map(|(sum, &count)| {
            if count == 0 {
                None
            } else {
                Some(sum.into_iter().map(|v| v / count as f64).collect())
            }
        })
        .collect();
    Ok(CenterSet { dim, centers })
}

/// Mean squared difference between corresponding class centers, averaged
/// over the classes present in both sets and over channels.
pub fn inter_domain_distance(a: &CenterSet, b: &CenterSet) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::dimension("center sets have different widths"));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (ca, cb) in a.centers.iter().zip(&b.centers) {
        if let (Some(ca), Some(cb)) = (ca, cb) {
            total += ca
                .iter()
                .zip(cb)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                / a.dim as f64;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::contract("no class is present in both center sets"));
    }
    Ok(total / pairs as f64)
}

#[derive(Debug, Clone)]
pub struct Histogram {
    pub counts: Vec<u64>,
    pub bin_width: f64,
    pub max_distance: f64,
}

impl Histogram {
    pub fn pair_count(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Project rows to `projection_dim` with a seeded Gaussian map scaled by
/// `1/sqrt(projection_dim)`, then histogram all pairwise Euclidean
/// distances into fixed-width bins over `[0, max]`.
pub fn jl_histogram(
    rows: &[Vec<f64>],
    projection_dim: usize,
    bins: usize,
    seed: u64,
) -> Result<Histogram> {
    if rows.len() < 2 {
        return Err(Error::contract("need at least two rows for pair distances"));
    }
    if projection_dim == 0 || bins == 0 {
        return Err(Error::contract("projection dimension and bins must be positive"));
    }
    let dim = rows[0].len();
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::dimension("rows have inconsistent widths"));
    }
    let mut rng = stream(seed, "analysis.jl");
    let scale = 1.0 / (projection_dim as f64).sqrt();
    let matrix: Vec<f64> = (0..projection_dim * dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        })
        .collect();
    let projected: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            (0..projection_dim)
                .map(|p| {
                    matrix[p * dim..(p + 1) * dim]
                        .iter()
                        .zip(r)
                        .map(|(m, v)| m * v)
                        .sum()
                })
                .collect()
        })
        .collect();

    let mut distances = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..projected.len() {
        for j in (i + 1)..projected.len() {
            let d2: f64 = projected[i]
                .iter()
                .zip(&projected[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            distances.push(d2.sqrt());
        }
    }
    let max_distance = distances.iter().cloned().fold(0.0, f64::max);
    let bin_width = max_distance / bins as f64;
    let mut counts = vec![0u64; bins];
    for &d in &distances {
        let idx = if bin_width == 0.0 {
            0
        } else {
            (((d / bin_width) as usize).min(bins - 1)) as usize
        };
        counts[idx] += 1;
    }
    Ok(Histogram {
        counts,
        bin_width,
        max_distance,
    })
}

/// Projection with `rows`' exact pairwise distances, for band checks.
pub fn pairwise_distances(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            let d2: f64 = rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            out.push(d2.sqrt());
        }
    }
    out
}
