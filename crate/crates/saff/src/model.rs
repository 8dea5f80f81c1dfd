//! The block feature extractor: tokenizer, per-token linear blocks with a
//! post-block hook point, max-pooling, bottleneck, and classifier head.
//!
//! Blocks are per-token linear + tanh. The hook point after every block is
//! where the intermediate-domain branch rewrites its features; source and
//! target branches always pass through untouched.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    /// Pass-through; used by tiny diagnostic configurations.
    Identity,
}

#[derive(Debug, Clone)]
pub struct ModelDims {
    pub input_dim: usize,
    pub token_count: usize,
    /// Channel width after each block.
    pub block_widths: Vec<usize>,
    pub bottleneck_dim: usize,
    pub class_count: usize,
    pub activation: Activation,
}

impl ModelDims {
    /// Desk-scale default: 4 tokens, 4 blocks of width 32, 16-wide bottleneck.
    pub fn desk_default(input_dim: usize, class_count: usize) -> Self {
        ModelDims {
            input_dim,
            token_count: 4,
            block_widths: vec![32; 4],
            bottleneck_dim: 16,
            class_count,
            activation: Activation::Tanh,
        }
    }

    pub fn block_count(&self) -> usize {
        self.block_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_widths.is_empty() {
            return Err(Error::validation("at least one block is required"));
        }
        if self.input_dim == 0
            || self.token_count == 0
            || self.bottleneck_dim == 0
            || self.class_count == 0
            || self.block_widths.iter().any(|&w| w == 0)
        {
            return Err(Error::validation("all model dimensions must be positive"));
        }
        Ok(())
    }

    /// Input channel width of block `l` (the tokenizer emits `block_widths[0]`).
    fn block_in_width(&self, l: usize) -> usize {
        if l == 0 {
            self.block_widths[0]
        } else {
            self.block_widths[l - 1]
        }
    }
}

/// Fully connected layer; weight is `[in, out]` row-major.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Xavier-uniform initialization.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight: Vec<f64> = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Linear {
            weight: Tensor::new(vec![in_dim, out_dim], weight)
                .expect("consistent init shape")
                .with_grad(),
            bias: Tensor::zeros(vec![out_dim]).with_grad(),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: Tensor::zeros(vec![in_dim, out_dim]).with_grad(),
            bias: Tensor::zeros(vec![out_dim]).with_grad(),
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut weight = Tensor::zeros(vec![dim, dim]);
        for i in 0..dim {
            weight.data_mut()[i * dim + i] = 1.0;
        }
        Linear {
            weight: weight.with_grad(),
            bias: Tensor::zeros(vec![dim]).with_grad(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Tape handles for one registered linear layer.
#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    /// `x · W + b` for a `[rows, in]` input.
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.weight)?;
        tape.add_bias(h, self.bias)
    }
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub tokenizer: Linear,
    pub blocks: Vec<Linear>,
    pub style_mu: Vec<Linear>,
    pub style_sigma: Vec<Linear>,
    pub bottleneck: Linear,
    pub head: Linear,
}

impl ModelParams {
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = stream(seed, "model.init");
        let tokenizer = Linear::init(dims.input_dim, dims.token_count * dims.block_widths[0], &mut rng);
        let mut blocks = Vec::new();
        let mut style_mu = Vec::new();
        let mut style_sigma = Vec::new();
        for l in 0..dims.block_count() {
            let (cin, cout) = (dims.block_in_width(l), dims.block_widths[l]);
            blocks.push(Linear::init(cin, cout, &mut rng));
            // Style projections start as the identity, so early fusion is a
            // plain statistic re-assignment instead of a random collapse.
            style_mu.push(Linear::identity(cout));
            style_sigma.push(Linear::identity(cout));
        }
        let c_last = *dims.block_widths.last().expect("validated non-empty");
        let bottleneck = Linear::init(c_last, dims.bottleneck_dim, &mut rng);
        let head = Linear::init(dims.bottleneck_dim, dims.class_count, &mut rng);
        Ok(ModelParams {
            dims,
            tokenizer,
            blocks,
            style_mu,
            style_sigma,
            bottleneck,
            head,
        })
    }

    /// All-zero parameters (diagnostics: the network predicts uniformly).
    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let tokenizer = Linear::zeros(dims.input_dim, dims.token_count * dims.block_widths[0]);
        let mut blocks = Vec::new();
        let mut style_mu = Vec::new();
        let mut style_sigma = Vec::new();
        for l in 0..dims.block_count() {
            let (cin, cout) = (dims.block_in_width(l), dims.block_widths[l]);
            blocks.push(Linear::zeros(cin, cout));
            style_mu.push(Linear::zeros(cout, cout));
            style_sigma.push(Linear::zeros(cout, cout));
        }
        let c_last = *dims.block_widths.last().expect("validated non-empty");
        Ok(ModelParams {
            bottleneck: Linear::zeros(c_last, dims.bottleneck_dim),
            head: Linear::zeros(dims.bottleneck_dim, dims.class_count),
            dims,
            tokenizer,
            blocks,
            style_mu,
            style_sigma,
        })
    }

    /// Named views of every parameter tensor, in a stable order.
    pub fn entries(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("tokenizer.weight".into(), &self.tokenizer.weight),
            ("tokenizer.bias".into(), &self.tokenizer.bias),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{}.weight", l + 1), &b.weight));
            out.push((format!("block{}.bias", l + 1), &b.bias));
        }
        for (l, p) in self.style_mu.iter().enumerate() {
            out.push((format!("fc_mu{}.weight", l + 1), &p.weight));
            out.push((format!("fc_mu{}.bias", l + 1), &p.bias));
        }
        for (l, p) in self.style_sigma.iter().enumerate() {
            out.push((format!("fc_sigma{}.weight", l + 1), &p.weight));
            out.push((format!("fc_sigma{}.bias", l + 1), &p.bias));
        }
        out.push(("bottleneck.weight".into(), &self.bottleneck.weight));
        out.push(("bottleneck.bias".into(), &self.bottleneck.bias));
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("tokenizer.weight".into(), &mut self.tokenizer.weight),
            ("tokenizer.bias".into(), &mut self.tokenizer.bias),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{}.weight", l + 1), &mut b.weight));
            out.push((format!("block{}.bias", l + 1), &mut b.bias));
        }
        for (l, p) in self.style_mu.iter_mut().enumerate() {
            out.push((format!("fc_mu{}.weight", l + 1), &mut p.weight));
            out.push((format!("fc_mu{}.bias", l + 1), &mut p.bias));
        }
        for (l, p) in self.style_sigma.iter_mut().enumerate() {
            out.push((format!("fc_sigma{}.weight", l + 1), &mut p.weight));
            out.push((format!("fc_sigma{}.bias", l + 1), &mut p.bias));
        }
        out.push(("bottleneck.weight".into(), &mut self.bottleneck.weight));
        out.push(("bottleneck.bias".into(), &mut self.bottleneck.bias));
        out.push(("head.weight".into(), &mut self.head.weight));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }

    /// Register every parameter as a tape leaf for one forward/backward pass.
    pub fn register(&self, tape: &mut Tape) -> ModelVars {
        let reg = |tape: &mut Tape, l: &Linear| LinearVars {
            weight: tape.leaf(&l.weight),
            bias: tape.leaf(&l.bias),
        };
        ModelVars {
            tokenizer: reg(tape, &self.tokenizer),
            blocks: self.blocks.iter().map(|b| reg(tape, b)).collect(),
            style_mu: self.style_mu.iter().map(|b| reg(tape, b)).collect(),
            style_sigma: self.style_sigma.iter().map(|b| reg(tape, b)).collect(),
            bottleneck: reg(tape, &self.bottleneck),
            head: reg(tape, &self.head),
            token_count: self.dims.token_count,
            activation: self.dims.activation,
        }
    }

    /// Pull accumulated tape gradients back into the parameter tensors.
    pub fn pull_grads(&mut self, tape: &Tape, vars: &ModelVars) {
        let pull = |tape: &Tape, v: LinearVars, l: &mut Linear| {
            tape.pull_grad(v.weight, &mut l.weight);
            tape.pull_grad(v.bias, &mut l.bias);
        };
        pull(tape, vars.tokenizer, &mut self.tokenizer);
        for (v, b) in vars.blocks.iter().zip(self.blocks.iter_mut()) {
            pull(tape, *v, b);
        }
        for (v, b) in vars.style_mu.iter().zip(self.style_mu.iter_mut()) {
            pull(tape, *v, b);
        }
        for (v, b) in vars.style_sigma.iter().zip(self.style_sigma.iter_mut()) {
            pull(tape, *v, b);
        }
        pull(tape, vars.bottleneck, &mut self.bottleneck);
        pull(tape, vars.head, &mut self.head);
    }
}

/// Tape handles for all registered parameters of one pass.
pub struct ModelVars {
    pub tokenizer: LinearVars,
    pub blocks: Vec<LinearVars>,
    pub style_mu: Vec<LinearVars>,
    pub style_sigma: Vec<LinearVars>,
    pub bottleneck: LinearVars,
    pub head: LinearVars,
    token_count: usize,
    activation: Activation,
}

impl ModelVars {
    /// Handles in the same order as [`ModelParams::entries`].
    pub fn entry_vars(&self) -> Vec<Var> {
        let mut out = vec![self.tokenizer.weight, self.tokenizer.bias];
        for b in &self.blocks {
            out.push(b.weight);
            out.push(b.bias);
        }
        for b in &self.style_mu {
            out.push(b.weight);
            out.push(b.bias);
        }
        for b in &self.style_sigma {
            out.push(b.weight);
            out.push(b.bias);
        }
        out.push(self.bottleneck.weight);
        out.push(self.bottleneck.bias);
        out.push(self.head.weight);
        out.push(self.head.bias);
        out
    }
}

/// Everything one branch's forward pass produced.
pub struct ForwardRecord {
    /// Features after each block (post-hook for a hooked branch), `[b, n, c_l]`.
    pub block_features: Vec<Var>,
    /// Alias of the last entry of `block_features`.
    pub final_features: Var,
    /// `[b, c_last]` after token max-pooling.
    pub pooled: Var,
    /// `[b, bottleneck]`, the exact input to the classifier head.
    pub bottleneck_features: Var,
    /// `[b, class_count]`.
    pub logits: Var,
}

/// Hook rewriting one branch's features after block `l`.
pub type BranchHook<'a> = dyn FnMut(&mut Tape, usize, Var) -> Result<Var> + 'a;

/// Hook rewriting the middle branch given all three branches' features.
pub type TrioHook<'a> = dyn FnMut(&mut Tape, usize, [Var; 3]) -> Result<Var> + 'a;

fn tokenize(tape: &mut Tape, vars: &ModelVars, xs: &Tensor) -> Result<Var> {
    let rows = match xs.shape() {
        [b, _] => *b,
        s => {
            return Err(Error::dimension(format!(
                "forward: expected [batch, dim] input, got {s:?}"
            )))
        }
    };
    let x = tape.leaf(xs);
    let t = vars.tokenizer.apply(tape, x)?;
    let width = tape.shape(t)[1] / vars.token_count;
    tape.reshape(t, vec![rows, vars.token_count, width])
}

fn block_step(tape: &mut Tape, vars: &ModelVars, l: usize, f: Var) -> Result<Var> {
    let (b, n, cin) = match tape.shape(f) {
        [b, n, c] => (*b, *n, *c),
        s => return Err(Error::dimension(format!("block {l}: bad feature shape {s:?}"))),
    };
    let flat = tape.reshape(f, vec![b * n, cin])?;
    let h = vars.blocks[l].apply(tape, flat)?;
    let cout = tape.shape(h)[1];
    let h = tape.reshape(h, vec![b, n, cout])?;
    Ok(match vars.activation {
        Activation::Tanh => tape.tanh(h),
        Activation::Identity => h,
    })
}

fn finish_branch(
    tape: &mut Tape,
    vars: &ModelVars,
    block_features: Vec<Var>,
) -> Result<ForwardRecord> {
    let final_features = *block_features.last().expect("at least one block");
    let pooled = tape.max_pool_tokens(final_features)?;
    let bottleneck_features = vars.bottleneck.apply(tape, pooled)?;
    let logits = vars.head.apply(tape, bottleneck_features)?;
    Ok(ForwardRecord {
        block_features,
        final_features,
        pooled,
        bottleneck_features,
        logits,
    })
}

/// Forward one branch. When a hook is given it rewrites the features after
/// every block, before the next block consumes them.
pub fn forward(
    tape: &mut Tape,
    vars: &ModelVars,
    xs: &Tensor,
    mut hook: Option<&mut BranchHook<'_>>,
) -> Result<ForwardRecord> {
    let mut f = tokenize(tape, vars, xs)?;
    let mut block_features = Vec::with_capacity(vars.blocks.len());
    for l in 0..vars.blocks.len() {
        f = block_step(tape, vars, l, f)?;
        if let Some(h) = hook.as_mut() {
            f = h(tape, l, f)?;
        }
        block_features.push(f);
    }
    finish_branch(tape, vars, block_features)
}

/// Forward source, middle, and target branches in lockstep. After every
/// block the hook sees all three feature maps and returns the rewritten
/// middle branch; source and target features are never replaced.
pub fn forward_trio(
    tape: &mut Tape,
    vars: &ModelVars,
    xs: [&Tensor; 3],
    hook: Option<&mut TrioHook<'_>>,
) -> Result<[ForwardRecord; 3]> {
    let mut feats = [
        tokenize(tape, vars, xs[0])?,
        tokenize(tape, vars, xs[1])?,
        tokenize(tape, vars, xs[2])?,
    ];
    let mut recorded: [Vec<Var>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut hook = hook;
    for l in 0..vars.blocks.len() {
        for f in feats.iter_mut() {
            *f = block_step(tape, vars, l, *f)?;
        }
        if let Some(h) = hook.as_mut() {
            feats[1] = h(tape, l, feats)?;
        }
        for (rec, f) in recorded.iter_mut().zip(&feats) {
            rec.push(*f);
        }
    }
    let [ra, rb, rc] = recorded;
    Ok([
        finish_branch(tape, vars, ra)?,
        finish_branch(tape, vars, rb)?,
        finish_branch(tape, vars, rc)?,
    ])
}

/// Row-wise argmax with ties broken toward the lowest class index.
pub fn predict(logits: &Tensor) -> Vec<usize> {
    let k = *logits.shape().last().expect("logits have a class axis");
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

// ── Checkpoint round-trip ───────────────────────────────────────────────

impl ModelParams {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = self.meta_tensor();
        let mut entries: Vec<(String, &Tensor)> = vec![("meta".into(), &meta)];
        let named = self.entries();
        entries.extend(named.iter().map(|(n, t)| (n.clone(), *t)));
        crate::checkpoint::save(path, &entries)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let entries = crate::checkpoint::load(path)?;
        let meta = entries
            .iter()
            .find(|(n, _)| n == "meta")
            .ok_or_else(|| Error::validation("checkpoint is missing model metadata"))?;
        let dims = Self::dims_from_meta(&meta.1)?;
        let mut params = ModelParams::zeros(dims)?;
        for (name, tensor) in params.entries_mut() {
            let found = entries
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::validation(format!("checkpoint is missing {name}")))?;
            if found.1.shape() != tensor.shape() {
                return Err(Error::validation(format!(
                    "checkpoint entry {name} has shape {:?}, expected {:?}",
                    found.1.shape(),
                    tensor.shape()
                )));
            }
            tensor.data_mut().copy_from_slice(found.1.data());
        }
        Ok(params)
    }

    fn meta_tensor(&self) -> Tensor {
        let d = &self.dims;
        let mut v = vec![
            d.input_dim as f64,
            d.token_count as f64,
            d.bottleneck_dim as f64,
            d.class_count as f64,
            match d.activation {
                Activation::Tanh => 0.0,
                Activation::Identity => 1.0,
            },
            d.block_count() as f64,
        ];
        v.extend(d.block_widths.iter().map(|&w| w as f64));
        Tensor::new(vec![v.len()], v).expect("meta layout")
    }

    fn dims_from_meta(meta: &Tensor) -> Result<ModelDims> {
        let v = meta.data();
        if v.len() < 6 {
            return Err(Error::validation("malformed model metadata"));
        }
        let block_count = v[5] as usize;
        if v.len() != 6 + block_count {
            return Err(Error::validation("malformed model metadata"));
        }
        Ok(ModelDims {
            input_dim: v[0] as usize,
            token_count: v[1] as usize,
            bottleneck_dim: v[2] as usize,
            class_count: v[3] as usize,
            activation: if v[4] == 0.0 {
                Activation::Tanh
            } else {
                Activation::Identity
            },
            block_widths: v[6..].iter().map(|&w| w as usize).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dims(input_dim: usize) -> ModelDims {
        ModelDims {
            input_dim,
            token_count: 1,
            block_widths: vec![input_dim],
            bottleneck_dim: input_dim,
            class_count: 3,
            activation: Activation::Identity,
        }
    }

    #[test]
    fn zero_network_predicts_uniformly() {
        let dims = ModelDims::desk_default(8, 5);
        let params = ModelParams::zeros(dims).unwrap();
        let xs = Tensor::new(vec![2, 8], (0..16).map(|i| i as f64).collect()).unwrap();
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let rec = forward(&mut tape, &vars, &xs, None).unwrap();
        assert!(tape.data(rec.logits).iter().all(|&v| v == 0.0));
        let sm = tape.softmax(rec.logits, 1).unwrap();
        assert!(tape.data(sm).iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn identity_configuration_passes_input_through() {
        // One block, one token, identity maps: f^L equals the raw input.
        let d = 4;
        let mut params = ModelParams::zeros(tiny_dims(d)).unwrap();
        params.tokenizer = Linear::identity(d);
        params.blocks[0] = Linear::identity(d);
        let xs = Tensor::new(vec![2, d], vec![0.5, -1.0, 2.0, 0.0, 1.0, 1.5, -2.0, 3.0]).unwrap();
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let rec = forward(&mut tape, &vars, &xs, None).unwrap();
        assert_eq!(tape.shape(rec.final_features), &[2, 1, d]);
        assert_eq!(tape.data(rec.final_features), xs.data());
    }

    #[test]
    fn forward_is_deterministic_for_a_fixed_seed() {
        let dims = ModelDims::desk_default(6, 4);
        let xs = Tensor::new(vec![3, 6], (0..18).map(|i| (i as f64).sin()).collect()).unwrap();
        let run = || -> Vec<f64> {
            let params = ModelParams::init(dims.clone(), 99).unwrap();
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let rec = forward(&mut tape, &vars, &xs, None).unwrap();
            tape.data(rec.logits).to_vec()
        };
        let (a, b) = (run(), run());
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn unhooked_trio_matches_single_branch() {
        // With no hook, the middle branch is just another pure pass.
        let dims = ModelDims::desk_default(5, 3);
        let params = ModelParams::init(dims, 5).unwrap();
        let xs = Tensor::new(vec![2, 5], (0..10).map(|i| 0.3 * i as f64).collect()).unwrap();

        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let recs = forward_trio(&mut tape, &vars, [&xs, &xs, &xs], None).unwrap();
        let single = forward(&mut tape, &vars, &xs, None).unwrap();
        assert_eq!(tape.data(recs[1].logits), tape.data(single.logits));
        assert_eq!(
            tape.data(recs[1].bottleneck_features),
            tape.data(single.bottleneck_features)
        );
    }

    #[test]
    fn predict_tie_breaks_low() {
        let logits = Tensor::new(vec![3, 2], vec![0.1, 0.9, 0.5, 0.5, 0.7, 0.2]).unwrap();
        assert_eq!(predict(&logits), vec![1, 0, 0]);
    }

    #[test]
    fn predict_is_shift_invariant() {
        let row = [0.3, -0.2, 1.1, 0.4];
        let shifted: Vec<f64> = row.iter().map(|v| v + 123.456).collect();
        let a = predict(&Tensor::new(vec![1, 4], row.to_vec()).unwrap());
        let b = predict(&Tensor::new(vec![1, 4], shifted).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dims = ModelDims::desk_default(7, 4);
        let params = ModelParams::init(dims, 123).unwrap();
        let dir = std::env::temp_dir().join("saff-model-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.bin");
        params.save(&path).unwrap();
        let loaded = ModelParams::load(&path).unwrap();
        for ((n1, t1), (n2, t2)) in params.entries().iter().zip(loaded.entries().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert_eq!(t1.data(), t2.data());
        }
    }
}
