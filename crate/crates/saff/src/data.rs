//! Synthetic multi-domain datasets, CSV persistence, and batch iteration.
//!
//! Two domains share class-conditional content clusters and differ by a
//! per-domain style transform: a channel-wise affine map followed by
//! rotations in disjoint coordinate planes. Target labels are generated but
//! split into a separate evaluation set, so the training path never sees
//! them.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Ssid,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Source => write!(f, "source"),
            Domain::Ssid => write!(f, "ssid"),
            Domain::Target => write!(f, "target"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Stable id within the sample's domain.
    pub index: usize,
    pub x: Vec<f64>,
    /// `None` for hidden labels (target training files).
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub class_count: usize,
    pub domain: Domain,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Channel-wise affine map followed by rotations in disjoint planes
/// `(0,1), (2,3), ...`; angles cycle if fewer than `dim/2` are given.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleTransform {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub rotations: Vec<f64>,
}

impl StyleTransform {
    pub fn identity(dim: usize) -> Self {
        StyleTransform {
            scale: vec![1.0; dim],
            shift: vec![0.0; dim],
            rotations: Vec::new(),
        }
    }

    pub fn apply(&self, x: &mut [f64]) {
        for (v, (s, b)) in x.iter_mut().zip(self.scale.iter().zip(&self.shift)) {
            *v = *v * s + b;
        }
        if self.rotations.is_empty() {
            return;
        }
        let mut plane = 0;
        while 2 * plane + 1 < x.len() {
            let theta = self.rotations[plane % self.rotations.len()];
            let (sin, cos) = theta.sin_cos();
            let (i, j) = (2 * plane, 2 * plane + 1);
            let (a, b) = (x[i], x[j]);
            x[i] = cos * a - sin * b;
            x[j] = sin * a + cos * b;
            plane += 1;
        }
    }
}

#[derive(Debug, Clone)]
pub struct DomainSpec {
    pub class_count: usize,
    pub dim: usize,
    /// Content cluster centers shared by both domains, one per class.
    pub class_means: Vec<Vec<f64>>,
    /// Isotropic standard deviation of the content noise.
    pub noise_scale: f64,
    /// Multiplier on the content noise for the target domain; the variance
    /// difference is a second-order style cue.
    pub target_noise_mult: f64,
    pub source_style: StyleTransform,
    pub target_style: StyleTransform,
}

impl DomainSpec {
    /// Desk-scale default: 5 classes in 16 dimensions; the target restyles
    /// inputs with a 2.5× channel gain and 30° plane rotations.
    pub fn desk_default(seed: u64) -> Self {
        let class_count = 5;
        let dim = 16;
        let mut rng = stream(seed, "data.spec");
        let class_means = (0..class_count)
            .map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let mut target_style = StyleTransform::identity(dim);
        target_style.scale = vec![2.5; dim];
        target_style.rotations = vec![30f64.to_radians()];
        DomainSpec {
            class_count,
            dim,
            class_means,
            noise_scale: 1.0,
            target_noise_mult: 1.0,
            source_style: StyleTransform::identity(dim),
            target_style,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.dim == 0 {
            return Err(Error::validation(
                "class count and dimension must be positive",
            ));
        }
        if self.class_means.len() != self.class_count {
            return Err(Error::validation(format!(
                "{} class means for {} classes",
                self.class_means.len(),
                self.class_count
            )));
        }
        for (k, mean) in self.class_means.iter().enumerate() {
            if mean.len() != self.dim {
                return Err(Error::validation(format!(
                    "class {k} mean has dimension {}, expected {}",
                    mean.len(),
                    self.dim
                )));
            }
        }
        for a in 0..self.class_count {
            for b in (a + 1)..self.class_count {
                if self.class_means[a] == self.class_means[b] {
                    return Err(Error::validation(format!(
                        "class means {a} and {b} coincide"
                    )));
                }
            }
        }
        for style in [&self.source_style, &self.target_style] {
            if style.scale.len() != self.dim || style.shift.len() != self.dim {
                return Err(Error::validation("style transform dimension mismatch"));
            }
            if style.scale.iter().any(|&g| g <= 0.0) {
                return Err(Error::validation(
                    "style scale must be strictly positive in every channel",
                ));
            }
        }
        if self.noise_scale < 0.0 || self.target_noise_mult < 0.0 {
            return Err(Error::validation("noise scales must be nonnegative"));
        }
        Ok(())
    }
}

/// Generate a labeled source set plus a target pair: a training view with
/// hidden labels and an evaluation view with true labels. Classes are
/// balanced up to the remainder of `n_per_domain / class_count`.
pub fn gen_synthetic(
    spec: &DomainSpec,
    n_per_domain: usize,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    if n_per_domain < spec.class_count {
        return Err(Error::validation(format!(
            "need at least one sample per class: {} < {}",
            n_per_domain, spec.class_count
        )));
    }
    let mut rng = stream(seed, "data.gen");
    let mut draw = |style: &StyleTransform, noise: f64| -> Vec<Sample> {
        (0..n_per_domain)
            .map(|i| {
                let label = i % spec.class_count;
                let mut x: Vec<f64> = spec.class_means[label]
                    .iter()
                    .map(|&m| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + noise * z
                    })
                    .collect();
                style.apply(&mut x);
                Sample {
                    index: i,
                    x,
                    label: Some(label),
                }
            })
            .collect()
    };

    let source = Dataset {
        dim: spec.dim,
        class_count: spec.class_count,
        domain: Domain::Source,
        samples: draw(&spec.source_style, spec.noise_scale),
    };
    let target_eval = Dataset {
        dim: spec.dim,
        class_count: spec.class_count,
        domain: Domain::Target,
        samples: draw(
            &spec.target_style,
            spec.noise_scale * spec.target_noise_mult,
        ),
    };
    let mut target_train = target_eval.clone();
    for s in &mut target_train.samples {
        s.label = None;
    }
    Ok((source, target_train, target_eval))
}

// ── CSV persistence ─────────────────────────────────────────────────────

pub fn save_csv(set: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "index,label")?;
    for d in 0..set.dim {
        write!(w, ",x{d}")?;
    }
    writeln!(w)?;
    for s in &set.samples {
        let label = s.label.map(|l| l as i64).unwrap_or(-1);
        write!(w, "{},{}", s.index, label)?;
        for v in &s.x {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_csv(path: &Path, domain: Domain, class_count: usize) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        msg: "empty file".to_string(),
    })??;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "index" || cols[1] != "label" {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unexpected header {header:?}"),
        });
    }
    let dim = cols.len() - 2;
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected {} fields, got {}", dim + 2, fields.len()),
            });
        }
        let index: usize = fields[0].parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad index {:?}", fields[0]),
        })?;
        let label_raw: i64 = fields[1].parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad label {:?}", fields[1]),
        })?;
        let label = if label_raw < 0 {
            None
        } else {
            Some(label_raw as usize)
        };
        let mut x = Vec::with_capacity(dim);
        for f in &fields[2..] {
            x.push(f.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("bad value {f:?}"),
            })?);
        }
        samples.push(Sample { index, x, label });
    }
    Ok(Dataset {
        dim,
        class_count,
        domain,
        samples,
    })
}

// ── Batching ────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Batch {
    pub xs: Tensor,
    pub labels: Option<Vec<usize>>,
    pub indices: Vec<usize>,
    pub domain: Domain,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Split an epoch into batches of `batch_size` under a fresh seeded
/// permutation; the trailing partial batch is dropped.
pub fn iterate_batches(
    set: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    if batch_size > set.len() {
        return Err(Error::contract(format!(
            "batch size {} exceeds dataset size {}",
            batch_size,
            set.len()
        )));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    let key = format!("batch.{}.{}", set.domain, epoch);
    order.shuffle(&mut stream(seed, &key));

    let mut batches = Vec::with_capacity(set.len() / batch_size);
    for chunk in order.chunks(batch_size) {
        if chunk.len() < batch_size {
            break;
        }
        batches.push(make_batch(set, chunk));
    }
    Ok(batches)
}

/// Batches in stable index order, including the trailing partial batch.
/// Used for full-set traversals (bank initialization, evaluation).
pub fn ordered_batches(set: &Dataset, batch_size: usize) -> Vec<Batch> {
    let order: Vec<usize> = (0..set.len()).collect();
    order
        .chunks(batch_size.max(1))
        .map(|chunk| make_batch(set, chunk))
        .collect()
}

fn make_batch(set: &Dataset, positions: &[usize]) -> Batch {
    let mut xs = Vec::with_capacity(positions.len() * set.dim);
    let mut indices = Vec::with_capacity(positions.len());
    let mut labels = Vec::new();
    let mut any_label = false;
    for &p in positions {
        let s = &set.samples[p];
        xs.extend_from_slice(&s.x);
        indices.push(s.index);
        if let Some(l) = s.label {
            labels.push(l);
            any_label = true;
        }
    }
    let labels = if any_label && labels.len() == positions.len() {
        Some(labels)
    } else {
        None
    };
    Batch {
        xs: Tensor::new(vec![positions.len(), set.dim], xs).expect("consistent sample dims"),
        labels,
        indices,
        domain: set.domain,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("saff-data-test");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn generation_is_deterministic_on_disk() {
        let spec = DomainSpec::desk_default(7);
        let (s1, t1, _) = gen_synthetic(&spec, 60, 7).unwrap();
        let (s2, t2, _) = gen_synthetic(&spec, 60, 7).unwrap();
        let (p1, p2) = (tmp("det1.csv"), tmp("det2.csv"));
        save_csv(&s1, &p1).unwrap();
        save_csv(&s2, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let (q1, q2) = (tmp("dett1.csv"), tmp("dett2.csv"));
        save_csv(&t1, &q1).unwrap();
        save_csv(&t2, &q2).unwrap();
        assert_eq!(std::fs::read(&q1).unwrap(), std::fs::read(&q2).unwrap());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let spec = DomainSpec::desk_default(3);
        let (source, target_train, _) = gen_synthetic(&spec, 25, 3).unwrap();
        let p = tmp("roundtrip.csv");
        save_csv(&source, &p).unwrap();
        let loaded = load_csv(&p, Domain::Source, spec.class_count).unwrap();
        assert_eq!(loaded, source);

        // Hidden labels survive as -1 → None.
        let p2 = tmp("roundtrip_target.csv");
        save_csv(&target_train, &p2).unwrap();
        let loaded = load_csv(&p2, Domain::Target, spec.class_count).unwrap();
        assert_eq!(loaded, target_train);
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let p = tmp("malformed.csv");
        std::fs::write(&p, "index,label,x0\n0,1,2.0\n1,oops,3.0\n").unwrap();
        match load_csv(&p, Domain::Source, 2) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn degenerate_scale_is_rejected() {
        let mut spec = DomainSpec::desk_default(1);
        spec.target_style.scale[4] = 0.0;
        assert!(matches!(
            gen_synthetic(&spec, 50, 1),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn epoch_covers_every_index_once_minus_remainder() {
        let spec = DomainSpec::desk_default(9);
        let (source, _, _) = gen_synthetic(&spec, 100, 9).unwrap();
        let batches = iterate_batches(&source, 18, 9, 0).unwrap();
        assert_eq!(batches.len(), 5);
        let mut seen = HashSet::new();
        for b in &batches {
            assert_eq!(b.indices.len(), 18);
            for &i in &b.indices {
                assert!(seen.insert(i), "index {i} repeated within an epoch");
            }
        }
        assert_eq!(seen.len(), 90);
    }

    #[test]
    fn epochs_reshuffle_but_stay_reproducible() {
        let spec = DomainSpec::desk_default(4);
        let (source, _, _) = gen_synthetic(&spec, 54, 4).unwrap();
        let a0 = iterate_batches(&source, 18, 4, 0).unwrap();
        let b0 = iterate_batches(&source, 18, 4, 0).unwrap();
        let a1 = iterate_batches(&source, 18, 4, 1).unwrap();
        let idx =
            |bs: &[Batch]| -> Vec<usize> { bs.iter().flat_map(|b| b.indices.clone()).collect() };
        assert_eq!(idx(&a0), idx(&b0));
        assert_ne!(idx(&a0), idx(&a1));
    }

    #[test]
    fn zero_batch_size_is_a_contract_error() {
        let spec = DomainSpec::desk_default(2);
        let (source, _, _) = gen_synthetic(&spec, 20, 2).unwrap();
        assert!(matches!(
            iterate_batches(&source, 0, 2, 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn class_conditional_means_concentrate() {
        // Per-coordinate sample means land within 3σ/√n of the generating means.
        let mut spec = DomainSpec::desk_default(5);
        spec.noise_scale = 0.8;
        let n = 2000;
        let (source, _, _) = gen_synthetic(&spec, n, 5).unwrap();
        let per_class = n / spec.class_count;
        let bound = 3.0 * spec.noise_scale / (per_class as f64).sqrt();
        let mut sums = vec![vec![0.0; spec.dim]; spec.class_count];
        let mut counts = vec![0usize; spec.class_count];
        for s in &source.samples {
            let l = s.label.unwrap();
            counts[l] += 1;
            for (acc, v) in sums[l].iter_mut().zip(&s.x) {
                *acc += v;
            }
        }
        for k in 0..spec.class_count {
            for d in 0..spec.dim {
                let mean = sums[k][d] / counts[k] as f64;
                assert!(
                    (mean - spec.class_means[k][d]).abs() <= bound,
                    "class {k} coord {d}: {mean} vs {} (bound {bound})",
                    spec.class_means[k][d]
                );
            }
        }
    }

    #[test]
    fn target_training_view_hides_labels() {
        let spec = DomainSpec::desk_default(6);
        let (_, target_train, target_eval) = gen_synthetic(&spec, 30, 6).unwrap();
        assert!(target_train.samples.iter().all(|s| s.label.is_none()));
        assert!(target_eval.samples.iter().all(|s| s.label.is_some()));
        for (a, b) in target_train.samples.iter().zip(&target_eval.samples) {
            assert_eq!(a.x, b.x);
            assert_eq!(a.index, b.index);
        }
    }
}
