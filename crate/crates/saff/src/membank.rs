//! The external six-cell memory bank.
//!
//! Per-sample cells store the source branch's final-feature channel mean and
//! deviation plus the intermediate branch's bottleneck features, keyed by
//! dataset index. Class-center cells hold the arithmetic mean of each
//! class's member rows and are recomputed from scratch after every update
//! (summation in ascending index order, so brute-force recomputation is bit
//! equal). The bank holds plain values only and never joins backpropagation.

use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{forward, ModelParams};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Which cell a center lookup reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    StyleMean,
    StyleStd,
    ClsFeature,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    sample_count: usize,
    class_count: usize,
    style_dim: usize,
    cls_dim: usize,
    /// Source label per sample index, fixed at construction.
    labels: Vec<usize>,
    mean_rows: Vec<f64>,
    std_rows: Vec<f64>,
    cls_rows: Vec<f64>,
    mean_centers: Vec<f64>,
    std_centers: Vec<f64>,
    cls_centers: Vec<f64>,
}

impl MemoryBank {
    pub fn new(
        labels: Vec<usize>,
        class_count: usize,
        style_dim: usize,
        cls_dim: usize,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::validation("memory bank needs at least one sample"));
        }
        let mut seen = vec![false; class_count];
        for &l in &labels {
            if l >= class_count {
                return Err(Error::validation(format!(
                    "label {l} out of range for {class_count} classes"
                )));
            }
            seen[l] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::validation(format!(
                "class {missing} has no samples"
            )));
        }
        let n = labels.len();
        Ok(MemoryBank {
            sample_count: n,
            class_count,
            style_dim,
            cls_dim,
            labels,
            mean_rows: vec![0.0; n * style_dim],
            std_rows: vec![0.0; n * style_dim],
            cls_rows: vec![0.0; n * cls_dim],
            mean_centers: vec![0.0; class_count * style_dim],
            std_centers: vec![0.0; class_count * style_dim],
            cls_centers: vec![0.0; class_count * cls_dim],
        })
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Replace per-sample rows at `indices` and recompute every class center.
    /// Rows are plain values; anything tape-resident must be detached first.
    pub fn update(
        &mut self,
        indices: &[usize],
        mean_rows: &[f64],
        std_rows: &[f64],
        cls_rows: &[f64],
    ) -> Result<()> {
        let b = indices.len();
        if mean_rows.len() != b * self.style_dim
            || std_rows.len() != b * self.style_dim
            || cls_rows.len() != b * self.cls_dim
        {
            return Err(Error::contract("update: row buffers do not match batch size"));
        }
        for &i in indices {
            if i >= self.sample_count {
                return Err(Error::contract(format!(
                    "update: index {i} out of range 0..{}",
                    self.sample_count
                )));
            }
        }
        for (j, &i) in indices.iter().enumerate() {
            self.mean_rows[i * self.style_dim..(i + 1) * self.style_dim]
                .copy_from_slice(&mean_rows[j * self.style_dim..(j + 1) * self.style_dim]);
            self.std_rows[i * self.style_dim..(i + 1) * self.style_dim]
                .copy_from_slice(&std_rows[j * self.style_dim..(j + 1) * self.style_dim]);
            self.cls_rows[i * self.cls_dim..(i + 1) * self.cls_dim]
                .copy_from_slice(&cls_rows[j * self.cls_dim..(j + 1) * self.cls_dim]);
        }
        self.recompute_centers();
        Ok(())
    }

    /// Replace style rows (mean and deviation) at `indices`; the feature
    /// cell is untouched. Centers are recomputed immediately.
    pub fn update_style_rows(
        &mut self,
        indices: &[usize],
        mean_rows: &[f64],
        std_rows: &[f64],
    ) -> Result<()> {
        let b = indices.len();
        if mean_rows.len() != b * self.style_dim || std_rows.len() != b * self.style_dim {
            return Err(Error::contract(
                "update_style_rows: buffers do not match batch size",
            ));
        }
        self.check_indices(indices)?;
        for (j, &i) in indices.iter().enumerate() {
            self.mean_rows[i * self.style_dim..(i + 1) * self.style_dim]
                .copy_from_slice(&mean_rows[j * self.style_dim..(j + 1) * self.style_dim]);
            self.std_rows[i * self.style_dim..(i + 1) * self.style_dim]
                .copy_from_slice(&std_rows[j * self.style_dim..(j + 1) * self.style_dim]);
        }
        self.recompute_centers();
        Ok(())
    }

    /// Replace feature rows at `indices`; style cells are untouched.
    pub fn update_cls_rows(&mut self, indices: &[usize], cls_rows: &[f64]) -> Result<()> {
        if cls_rows.len() != indices.len() * self.cls_dim {
            return Err(Error::contract(
                "update_cls_rows: buffer does not match batch size",
            ));
        }
        self.check_indices(indices)?;
        for (j, &i) in indices.iter().enumerate() {
            self.cls_rows[i * self.cls_dim..(i + 1) * self.cls_dim]
                .copy_from_slice(&cls_rows[j * self.cls_dim..(j + 1) * self.cls_dim]);
        }
        self.recompute_centers();
        Ok(())
    }

    fn check_indices(&self, indices: &[usize]) -> Result<()> {
        for &i in indices {
            if i >= self.sample_count {
                return Err(Error::contract(format!(
                    "index {i} out of range 0..{}",
                    self.sample_count
                )));
            }
        }
        Ok(())
    }

    /// Recompute all three center cells from the per-sample cells,
    /// deterministically (ascending index, then divide by the class count).
    fn recompute_centers(&mut self) {
        let mut counts = vec![0usize; self.class_count];
        self.mean_centers.iter_mut().for_each(|v| *v = 0.0);
        self.std_centers.iter_mut().for_each(|v| *v = 0.0);
        self.cls_centers.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.sample_count {
            let k = self.labels[i];
            counts[k] += 1;
            for d in 0..self.style_dim {
                self.mean_centers[k * self.style_dim + d] +=
                    self.mean_rows[i * self.style_dim + d];
                self.std_centers[k * self.style_dim + d] += self.std_rows[i * self.style_dim + d];
            }
            for d in 0..self.cls_dim {
                self.cls_centers[k * self.cls_dim + d] += self.cls_rows[i * self.cls_dim + d];
            }
        }
        for k in 0..self.class_count {
            let c = counts[k] as f64;
            for d in 0..self.style_dim {
                self.mean_centers[k * self.style_dim + d] /= c;
                self.std_centers[k * self.style_dim + d] /= c;
            }
            for d in 0..self.cls_dim {
                self.cls_centers[k * self.cls_dim + d] /= c;
            }
        }
    }

    /// Copy of one class-center row; callers can never alias bank storage.
    pub fn lookup_center(&self, cell: Cell, class: usize) -> Result<Vec<f64>> {
        if class >= self.class_count {
            return Err(Error::contract(format!(
                "lookup_center: class {class} out of range 0..{}",
                self.class_count
            )));
        }
        let (rows, dim) = match cell {
            Cell::StyleMean => (&self.mean_centers, self.style_dim),
            Cell::StyleStd => (&self.std_centers, self.style_dim),
            Cell::ClsFeature => (&self.cls_centers, self.cls_dim),
        };
        Ok(rows[class * dim..(class + 1) * dim].to_vec())
    }

    pub fn per_sample_row(&self, cell: Cell, index: usize) -> &[f64] {
        let (rows, dim) = match cell {
            Cell::StyleMean => (&self.mean_rows, self.style_dim),
            Cell::StyleStd => (&self.std_rows, self.style_dim),
            Cell::ClsFeature => (&self.cls_rows, self.cls_dim),
        };
        &rows[index * dim..(index + 1) * dim]
    }

    // ── Serialization ───────────────────────────────────────────────────

    pub fn save(&self, path: &Path) -> Result<()> {
        let n = self.sample_count;
        let k = self.class_count;
        let labels_tensor = Tensor::new(
            vec![n],
            self.labels.iter().map(|&l| l as f64).collect(),
        )?;
        let cells = [
            ("bank.mu_ns", vec![n, self.style_dim], &self.mean_rows),
            ("bank.sigma_ns", vec![n, self.style_dim], &self.std_rows),
            ("bank.cls_ns", vec![n, self.cls_dim], &self.cls_rows),
            ("bank.mu_k", vec![k, self.style_dim], &self.mean_centers),
            ("bank.sigma_k", vec![k, self.style_dim], &self.std_centers),
            ("bank.cls_k", vec![k, self.cls_dim], &self.cls_centers),
        ];
        let tensors: Vec<(String, Tensor)> = cells
            .iter()
            .map(|(name, shape, data)| {
                Ok((
                    name.to_string(),
                    Tensor::new(shape.clone(), (*data).clone())?,
                ))
            })
            .collect::<Result<_>>()?;
        let mut entries: Vec<(String, &Tensor)> = vec![("bank.labels".to_string(), &labels_tensor)];
        entries.extend(tensors.iter().map(|(n, t)| (n.clone(), t)));
        crate::checkpoint::save(path, &entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries = crate::checkpoint::load(path)?;
        let get = |name: &str| -> Result<&Tensor> {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::validation(format!("bank checkpoint missing {name}")))
        };
        let labels: Vec<usize> = get("bank.labels")?
            .data()
            .iter()
            .map(|&v| v as usize)
            .collect();
        let mu = get("bank.mu_ns")?;
        let cls = get("bank.cls_ns")?;
        let style_dim = mu.shape()[1];
        let cls_dim = cls.shape()[1];
        let class_count = get("bank.mu_k")?.shape()[0];
        let mut bank = MemoryBank::new(labels, class_count, style_dim, cls_dim)?;
        bank.mean_rows.copy_from_slice(mu.data());
        bank.std_rows.copy_from_slice(get("bank.sigma_ns")?.data());
        bank.cls_rows.copy_from_slice(cls.data());
        bank.mean_centers.copy_from_slice(get("bank.mu_k")?.data());
        bank.std_centers
            .copy_from_slice(get("bank.sigma_k")?.data());
        bank.cls_centers.copy_from_slice(get("bank.cls_k")?.data());
        Ok(bank)
    }
}

/// Channel mean and deviation (`sqrt(var + epsilon)`) of each row of a
/// `[b, n, c]` buffer, as plain vectors.
pub fn row_channel_stats(
    data: &[f64],
    batch: usize,
    tokens: usize,
    channels: usize,
    epsilon: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut means = vec![0.0; batch * channels];
    let mut stds = vec![0.0; batch * channels];
    for b in 0..batch {
        for c in 0..channels {
            let mut m = 0.0;
            for n in 0..tokens {
                m += data[(b * tokens + n) * channels + c];
            }
            m /= tokens as f64;
            let mut v = 0.0;
            for n in 0..tokens {
                let d = data[(b * tokens + n) * channels + c] - m;
                v += d * d;
            }
            v /= tokens as f64;
            means[b * channels + c] = m;
            stds[b * channels + c] = (v + epsilon).sqrt();
        }
    }
    (means, stds)
}

/// One full pass over the source and intermediate sets with frozen
/// parameters: store per-sample style statistics and bottleneck features,
/// then compute all class centers.
pub fn init_bank(
    params: &ModelParams,
    source: &Dataset,
    ssid_set: &Dataset,
    batch_size: usize,
    epsilon: f64,
) -> Result<MemoryBank> {
    if source.len() != ssid_set.len() {
        return Err(Error::contract(
            "intermediate set must mirror the source set",
        ));
    }
    let labels: Vec<usize> = source
        .samples
        .iter()
        .map(|s| {
            s.label
                .ok_or_else(|| Error::validation("source samples must be labeled"))
        })
        .collect::<Result<_>>()?;
    let style_dim = *params.dims.block_widths.last().expect("validated dims");
    let cls_dim = params.dims.bottleneck_dim;
    let mut bank = MemoryBank::new(labels, params.dims.class_count, style_dim, cls_dim)?;

    // Style cells from the source branch's final features.
    for b in crate::data::ordered_batches(source, batch_size) {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let rec = forward(&mut tape, &vars, &b.xs, None)?;
        let final_data = tape.data(rec.final_features);
        let tokens = params.dims.token_count;
        let (means, stds) = row_channel_stats(final_data, b.len(), tokens, style_dim, epsilon);
        for (j, &i) in b.indices.iter().enumerate() {
            bank.mean_rows[i * style_dim..(i + 1) * style_dim]
                .copy_from_slice(&means[j * style_dim..(j + 1) * style_dim]);
            bank.std_rows[i * style_dim..(i + 1) * style_dim]
                .copy_from_slice(&stds[j * style_dim..(j + 1) * style_dim]);
        }
    }

    // Feature cell from the intermediate branch's bottleneck output.
    for b in crate::data::ordered_batches(ssid_set, batch_size) {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let rec = forward(&mut tape, &vars, &b.xs, None)?;
        let cls = tape.data(rec.bottleneck_features);
        for (j, &i) in b.indices.iter().enumerate() {
            bank.cls_rows[i * cls_dim..(i + 1) * cls_dim]
                .copy_from_slice(&cls[j * cls_dim..(j + 1) * cls_dim]);
        }
    }

    bank.recompute_centers();
    Ok(bank)
}
