//! End-to-end training: source pretraining, bank initialization, the
//! three-branch loop with per-block fusion and bank updates, evaluation,
//! and the ablation / alpha-sweep harnesses.
//!
//! Step order inside the main loop: draw aligned batches from the source,
//! intermediate, and target sets; forward all three branches with the
//! fusion hook active on the intermediate one; update the memory bank from
//! detached features; build the enabled losses; one optimizer step.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::analysis;
use crate::config::TrainConfig;
use crate::data::{iterate_batches, ordered_batches, Dataset};
use crate::error::{Error, Result};
use crate::losses::{
    ce_loss, discrimination_loss, im_loss, style_loss, total_loss, up_rate, LossBreakdown,
    LossTerms,
};
use crate::membank::{init_bank, row_channel_stats, MemoryBank};
use crate::model::{forward, forward_trio, predict, ModelParams, TrioHook};
use crate::optim::SgdMomentum;
use crate::ssid::{self, SsidState};
use crate::tape::Tape;

#[derive(Debug, Clone)]
pub struct EpochReport {
    pub epoch: usize,
    /// Step-averaged loss components.
    pub loss: LossBreakdown,
    pub source_accuracy: f64,
    pub target_accuracy: f64,
    pub inter_domain_distance: f64,
    pub seconds: f64,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub bank: MemoryBank,
    pub reports: Vec<EpochReport>,
}

/// Cross-entropy pretraining on the labeled source set only.
pub fn pretrain_source(config: &TrainConfig, source: &Dataset) -> Result<ModelParams> {
    config.validate()?;
    let mut params = ModelParams::init(config.model_dims(), config.seed)?;
    let mut optimizer = SgdMomentum::new(config.learning_rate, config.momentum);
    for epoch in 1..=config.pretrain_epochs {
        for batch in iterate_batches(source, config.batch, config.seed, epoch)? {
            let labels = batch
                .labels
                .as_ref()
                .ok_or_else(|| Error::validation("pretraining needs labeled source data"))?;
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let rec = forward(&mut tape, &vars, &batch.xs, None)?;
            let loss = ce_loss(&mut tape, rec.logits, labels)?;
            if !tape.value(loss).is_finite() {
                return Err(Error::non_finite("pretraining cross-entropy"));
            }
            tape.backward(loss)?;
            params.pull_grads(&tape, &vars);
            step_params(&mut optimizer, &mut params);
        }
    }
    Ok(params)
}

/// Fraction of argmax-correct predictions on a labeled set.
pub fn evaluate(params: &ModelParams, set: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for batch in ordered_batches(set, 64) {
        let labels = batch
            .labels
            .as_ref()
            .ok_or_else(|| Error::validation("evaluation needs true labels"))?;
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let rec = forward(&mut tape, &vars, &batch.xs, None)?;
        let predictions = predict(&tape.detach(rec.logits));
        correct += predictions
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();
        total += labels.len();
    }
    Ok(correct as f64 / total as f64)
}

/// The full adaptation loop. `pretrained` skips the pretraining phase (the
/// caller may have loaded a checkpoint); `target_eval` is read only through
/// `evaluate` for the per-epoch accuracy column.
pub fn train(
    config: &TrainConfig,
    source: &Dataset,
    target_train: &Dataset,
    target_eval: Option<&Dataset>,
    pretrained: Option<ModelParams>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if source.len() != target_train.len() {
        // Not fundamental, but keeps the three batch streams aligned.
        return Err(Error::validation(
            "source and target sets must have equal sizes",
        ));
    }
    let mut params = match pretrained {
        Some(p) => p,
        None => pretrain_source(config, source)?,
    };
    let ssid_state = SsidState::init_from_source(source, config.ssid_config());
    let mut bank = init_bank(
        &params,
        source,
        &ssid_state.set,
        config.batch,
        config.ssid_epsilon,
    )?;
    let mut optimizer = SgdMomentum::new(config.learning_rate, config.momentum);
    let loss_config = config.loss_config();
    let ssid_config = config.ssid_config();
    let use_ssid_branch = loss_config.enable_ssid_ce;
    let style_dim = *params.dims.block_widths.last().expect("validated dims");
    let cls_dim = params.dims.bottleneck_dim;

    let mut reports = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let up = up_rate(epoch, config.epochs, config.rate);
        let mut fusion_rng = ssid::sampler_stream(config.seed, epoch);
        let mut sums = LossSums::default();

        let source_batches = iterate_batches(source, config.batch, config.seed, epoch)?;
        let ssid_batches = iterate_batches(&ssid_state.set, config.batch, config.seed, epoch)?;
        let target_batches = iterate_batches(target_train, config.batch, config.seed, epoch)?;

        for ((sb, ib), tb) in source_batches
            .iter()
            .zip(&ssid_batches)
            .zip(&target_batches)
        {
            let source_labels = sb
                .labels
                .as_ref()
                .ok_or_else(|| Error::validation("source batches must be labeled"))?;

            let mut tape = Tape::new();
            let vars = params.register(&mut tape);

            // Forward. The fusion hook rewrites the intermediate branch
            // after every block; source and target stay pure.
            let (source_rec, ssid_rec, target_rec) = if use_ssid_branch {
                let style_mu = vars.style_mu.clone();
                let style_sigma = vars.style_sigma.clone();
                let mut hook: Box<TrioHook<'_>> = Box::new(|tape, block, feats| {
                    ssid::apply_strategy(
                        tape,
                        &ssid_config,
                        feats,
                        style_mu[block],
                        style_sigma[block],
                        &mut fusion_rng,
                    )
                });
                let [s, i, t] =
                    forward_trio(&mut tape, &vars, [&sb.xs, &ib.xs, &tb.xs], Some(&mut hook))?;
                (s, Some(i), t)
            } else {
                let s = forward(&mut tape, &vars, &sb.xs, None)?;
                let t = forward(&mut tape, &vars, &tb.xs, None)?;
                (s, None, t)
            };

            // Memory bank update: detached current-step features, before
            // any loss is formed.
            let token_count = params.dims.token_count;
            let (mu_rows, std_rows) = row_channel_stats(
                tape.data(source_rec.final_features),
                sb.len(),
                token_count,
                style_dim,
                config.ssid_epsilon,
            );
            bank.update_style_rows(&sb.indices, &mu_rows, &std_rows)?;
            if let Some(ssid_rec) = &ssid_rec {
                let cls_rows = tape.data(ssid_rec.bottleneck_features);
                debug_assert_eq!(cls_rows.len(), ib.len() * cls_dim);
                bank.update_cls_rows(&ib.indices, cls_rows)?;
            }

            // Losses.
            let mut terms = LossTerms::default();
            if loss_config.enable_source_ce {
                terms.source_ce = Some(ce_loss(&mut tape, source_rec.logits, source_labels)?);
            }
            if let Some(ssid_rec) = &ssid_rec {
                let ssid_labels = ib
                    .labels
                    .as_ref()
                    .ok_or_else(|| Error::validation("intermediate batches must be labeled"))?;
                terms.ssid_ce = Some(ce_loss(&mut tape, ssid_rec.logits, ssid_labels)?);
            }
            if loss_config.enable_target_im {
                terms.target_im = Some(im_loss(
                    &mut tape,
                    target_rec.logits,
                    loss_config.literal_im,
                )?);
            }
            if loss_config.enable_discrimination || loss_config.enable_style {
                let target_predictions = predict(&tape.detach(target_rec.logits));
                if loss_config.enable_discrimination {
                    let source_predictions = predict(&tape.detach(source_rec.logits));
                    terms.discrimination = Some(discrimination_loss(
                        &mut tape,
                        &bank,
                        source_rec.bottleneck_features,
                        &source_predictions,
                        target_rec.bottleneck_features,
                        &target_predictions,
                    )?);
                }
                if loss_config.enable_style {
                    terms.style = Some(style_loss(
                        &mut tape,
                        &bank,
                        target_rec.final_features,
                        &target_predictions,
                        up,
                        config.ssid_epsilon,
                        &loss_config,
                    )?);
                }
            }

            let (total, breakdown) = total_loss(&mut tape, &terms, loss_config.alpha, up)?;
            tape.backward(total)?;
            params.pull_grads(&tape, &vars);
            step_params(&mut optimizer, &mut params);
            sums.add(&breakdown);

            debug_assert!(ssid_state.labels_match(source), "intermediate labels drifted");
        }

        let source_accuracy = evaluate(&params, source)?;
        let target_accuracy = match target_eval {
            Some(set) => evaluate(&params, set)?,
            None => f64::NAN,
        };
        let source_centers = analysis::class_centers(&params, source)?;
        let target_centers = analysis::class_centers(&params, target_train)?;
        let inter_domain_distance =
            analysis::inter_domain_distance(&source_centers, &target_centers)?;
        reports.push(EpochReport {
            epoch,
            loss: sums.mean(up),
            source_accuracy,
            target_accuracy,
            inter_domain_distance,
            seconds: start.elapsed().as_secs_f64(),
        });
    }

    Ok(TrainOutcome {
        params,
        bank,
        reports,
    })
}

fn step_params(optimizer: &mut SgdMomentum, params: &mut ModelParams) {
    let mut entries = params.entries_mut();
    let mut refs: Vec<&mut crate::tensor::Tensor> =
        entries.iter_mut().map(|(_, t)| &mut **t).collect();
    optimizer.step(&mut refs);
}

#[derive(Default)]
struct LossSums {
    source_ce: f64,
    ssid_ce: f64,
    target_im: f64,
    discrimination: f64,
    style: f64,
    total: f64,
    steps: usize,
}

impl LossSums {
    fn add(&mut self, b: &LossBreakdown) {
        self.source_ce += b.source_ce;
        self.ssid_ce += b.ssid_ce;
        self.target_im += b.target_im;
        self.discrimination += b.discrimination;
        self.style += b.style;
        self.total += b.total;
        self.steps += 1;
    }

    fn mean(&self, up_rate_value: f64) -> LossBreakdown {
        let n = self.steps.max(1) as f64;
        LossBreakdown {
            source_ce: self.source_ce / n,
            ssid_ce: self.ssid_ce / n,
            target_im: self.target_im / n,
            discrimination: self.discrimination / n,
            style: self.style / n,
            up_rate_value,
            total: self.total / n,
        }
    }
}

// ── Report CSVs ─────────────────────────────────────────────────────────

/// Full epoch log, including wall-clock seconds.
pub fn write_epoch_csv(reports: &[EpochReport], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        w,
        "epoch,loss_s,loss_i,loss_t,loss_d,loss_style,total,acc_s,acc_t,dist,secs"
    )?;
    for r in reports {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.loss.source_ce,
            r.loss.ssid_ce,
            r.loss.target_im,
            r.loss.discrimination,
            r.loss.style,
            r.loss.total,
            r.source_accuracy,
            r.target_accuracy,
            r.inter_domain_distance,
            r.seconds
        )?;
    }
    Ok(())
}

/// Deterministic metric log: the same columns minus timing, so two runs of
/// one seed+config produce bit-identical files.
pub fn write_metrics_csv(reports: &[EpochReport], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        w,
        "epoch,loss_s,loss_i,loss_t,loss_d,loss_style,total,acc_s,acc_t,dist"
    )?;
    for r in reports {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.loss.source_ce,
            r.loss.ssid_ce,
            r.loss.target_im,
            r.loss.discrimination,
            r.loss.style,
            r.loss.total,
            r.source_accuracy,
            r.target_accuracy,
            r.inter_domain_distance
        )?;
    }
    Ok(())
}

// ── Ablations and sweeps ────────────────────────────────────────────────

/// One ablation configuration: which loss components are active.
#[derive(Debug, Clone, Copy)]
pub struct AblationRow {
    pub name: &'static str,
    pub ssid: bool,
    pub discrimination: bool,
    pub style: bool,
}

/// The five standard rows: baseline, fusion only, fusion + each bank loss,
/// and the full configuration.
pub const ABLATION_ROWS: [AblationRow; 5] = [
    AblationRow {
        name: "baseline",
        ssid: false,
        discrimination: false,
        style: false,
    },
    AblationRow {
        name: "fusion",
        ssid: true,
        discrimination: false,
        style: false,
    },
    AblationRow {
        name: "fusion+discrimination",
        ssid: true,
        discrimination: true,
        style: false,
    },
    AblationRow {
        name: "fusion+style",
        ssid: true,
        discrimination: false,
        style: true,
    },
    AblationRow {
        name: "full",
        ssid: true,
        discrimination: true,
        style: true,
    },
];

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub row: AblationRow,
    pub per_seed_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub per_seed_distance: Vec<f64>,
    pub mean_distance: f64,
}

pub fn apply_ablation(config: &TrainConfig, row: &AblationRow) -> TrainConfig {
    let mut c = config.clone();
    c.enable_source_ce = true;
    c.enable_target_im = true;
    c.enable_ssid_ce = row.ssid;
    c.enable_discrimination = row.discrimination;
    c.enable_style = row.style;
    c
}

/// Run every ablation row over the given seeds. Pretraining depends only on
/// the seed, so each seed's pretrained model is shared across rows.
pub fn ablate(
    config: &TrainConfig,
    source: &Dataset,
    target_train: &Dataset,
    target_eval: &Dataset,
    seeds: &[u64],
    mut progress: impl FnMut(&str),
) -> Result<Vec<AblationResult>> {
    let mut results = Vec::with_capacity(ABLATION_ROWS.len());
    let mut pretrained: Vec<ModelParams> = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut c = config.clone();
        c.seed = seed;
        progress(&format!("pretraining seed {seed}"));
        pretrained.push(pretrain_source(&c, source)?);
    }
    for row in ABLATION_ROWS {
        let mut per_seed_accuracy = Vec::with_capacity(seeds.len());
        let mut per_seed_distance = Vec::with_capacity(seeds.len());
        for (i, &seed) in seeds.iter().enumerate() {
            let mut c = apply_ablation(config, &row);
            c.seed = seed;
            progress(&format!("{} seed {seed}", row.name));
            let outcome = train(
                &c,
                source,
                target_train,
                Some(target_eval),
                Some(pretrained[i].clone()),
            )?;
            let last = outcome.reports.last().expect("at least one epoch");
            per_seed_accuracy.push(last.target_accuracy);
            per_seed_distance.push(last.inter_domain_distance);
        }
        let mean_accuracy = per_seed_accuracy.iter().sum::<f64>() / seeds.len() as f64;
        let mean_distance = per_seed_distance.iter().sum::<f64>() / seeds.len() as f64;
        results.push(AblationResult {
            row,
            per_seed_accuracy,
            mean_accuracy,
            per_seed_distance,
            mean_distance,
        });
    }
    Ok(results)
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub alpha: f64,
    pub target_accuracy: f64,
    pub source_accuracy: f64,
}

/// One full run per alpha value, all under the config's seed.
pub fn sweep_alpha(
    config: &TrainConfig,
    source: &Dataset,
    target_train: &Dataset,
    target_eval: &Dataset,
    values: &[f64],
    mut progress: impl FnMut(&str),
) -> Result<Vec<SweepPoint>> {
    if values.iter().any(|&a| a < 0.0) {
        return Err(Error::contract("alpha values must be nonnegative"));
    }
    let pretrained = pretrain_source(config, source)?;
    let mut out = Vec::with_capacity(values.len());
    for &alpha in values {
        let mut c = config.clone();
        c.alpha = alpha;
        progress(&format!("alpha {alpha}"));
        let outcome = train(
            &c,
            source,
            target_train,
            Some(target_eval),
            Some(pretrained.clone()),
        )?;
        let last = outcome.reports.last().expect("at least one epoch");
        out.push(SweepPoint {
            alpha,
            target_accuracy: last.target_accuracy,
            source_accuracy: last.source_accuracy,
        });
    }
    Ok(out)
}
