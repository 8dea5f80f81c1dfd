//! Training objectives.
//!
//! Intra-domain: cross-entropy on the labeled source and intermediate
//! branches, information maximization on the unlabeled target. Inter-domain:
//! KL pulls toward the memory bank's class feature centers (discrimination)
//! and class style centers (style), the latter phased in by a rising factor.
//! The total is `intra + alpha · inter`.
//!
//! Feature vectors and style statistics are not probability distributions;
//! every KL operand is softmax-normalized along channels first, with an
//! epsilon-guarded logarithm. Bank operands enter as constants and receive
//! no gradient.

use crate::error::{Error, Result};
use crate::membank::{Cell, MemoryBank};
use crate::tape::{Tape, Var};

/// Epsilon inside every loss logarithm.
pub const LOG_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct LossConfig {
    /// Weight of the inter-domain terms.
    pub alpha: f64,
    /// Exponent of the rising factor.
    pub rate: f64,
    pub enable_source_ce: bool,
    pub enable_ssid_ce: bool,
    pub enable_target_im: bool,
    pub enable_discrimination: bool,
    pub enable_style: bool,
    /// Use the printed form of the target objective (the negation of the
    /// standard information-maximization loss).
    pub literal_im: bool,
    /// Compare the style-deviation centers against the mean statistic, as
    /// printed, instead of the deviation statistic.
    pub literal_style_second_term: bool,
    /// Apply the rising factor to the first style term only, as printed,
    /// instead of the whole style loss.
    pub literal_uprate_scope: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            rate: 0.9,
            enable_source_ce: true,
            enable_ssid_ce: true,
            enable_target_im: true,
            enable_discrimination: true,
            enable_style: true,
            literal_im: false,
            literal_style_second_term: false,
            literal_uprate_scope: false,
        }
    }
}

/// Per-component values of one step, all finite, disabled components zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub source_ce: f64,
    pub ssid_ce: f64,
    pub target_im: f64,
    pub discrimination: f64,
    pub style: f64,
    pub up_rate_value: f64,
    pub total: f64,
}

/// Mean cross-entropy of labels under row-wise logits.
pub fn ce_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let lp = tape.log_softmax(logits, 1)?;
    tape.nll_mean(lp, labels)
}

/// Information-maximization objective on unlabeled logits: conditional
/// entropy minus marginal entropy of the prediction distribution, where the
/// marginal is the batch mean of per-sample probabilities. Minimizing makes
/// per-sample predictions confident and the marginal diverse. The literal
/// flag returns the negated (printed) form.
pub fn im_loss(tape: &mut Tape, logits: Var, literal: bool) -> Result<Var> {
    let batch = match tape.shape(logits) {
        [b, _] => *b,
        s => {
            return Err(Error::dimension(format!(
                "im_loss: expected [batch, classes], got {s:?}"
            )))
        }
    };
    let p = tape.softmax(logits, 1)?;
    let lp = tape.log_eps(p, LOG_EPSILON);
    let plp = tape.mul(p, lp)?;
    let sum_plp = tape.sum_all(plp);
    let h_cond = tape.affine(sum_plp, -1.0 / batch as f64, 0.0);

    let marginal = tape.mean_axis0(p)?;
    let lm = tape.log_eps(marginal, LOG_EPSILON);
    let mlm = tape.mul(marginal, lm)?;
    let sum_mlm = tape.sum_all(mlm);
    let h_marg = tape.affine(sum_mlm, -1.0, 0.0);

    let standard = tape.sub(h_cond, h_marg)?;
    Ok(if literal {
        tape.neg(standard)
    } else {
        standard
    })
}

/// Batch-mean KL from constant rows to tape-resident rows, both
/// softmax-normalized along channels. The constant side gets no gradient.
fn kl_const_rows_to_features(tape: &mut Tape, const_rows: &[Vec<f64>], features: Var) -> Result<Var> {
    let (batch, dim) = match tape.shape(features) {
        [b, d] => (*b, *d),
        s => {
            return Err(Error::dimension(format!(
                "kl: expected [batch, channels] features, got {s:?}"
            )))
        }
    };
    if const_rows.len() != batch {
        return Err(Error::contract(format!(
            "kl: {} constant rows for batch {batch}",
            const_rows.len()
        )));
    }
    let mut weights = vec![0.0; batch * dim];
    let mut entropy = 0.0;
    for (b, row) in const_rows.iter().enumerate() {
        if row.len() != dim {
            return Err(Error::dimension(format!(
                "kl: constant row has {} channels, expected {dim}",
                row.len()
            )));
        }
        let p = softmax_host(row);
        for (c, &pc) in p.iter().enumerate() {
            weights[b * dim + c] = pc;
            if pc > 0.0 {
                entropy += pc * pc.ln();
            }
        }
    }
    let entropy_mean = entropy / batch as f64;
    let ls = tape.log_softmax(features, 1)?;
    let weighted = tape.mul_const(ls, &weights)?;
    let cross = tape.sum_all(weighted);
    // KL = (1/B) Σ p ln p − (1/B) Σ p · log_softmax(features)
    Ok(tape.affine(cross, -1.0 / batch as f64, entropy_mean))
}

fn softmax_host(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Discrimination loss: per domain, KL from the predicted class's feature
/// center to the live bottleneck features, batch-averaged, summed over the
/// source and target domains.
pub fn discrimination_loss(
    tape: &mut Tape,
    bank: &MemoryBank,
    source_features: Var,
    source_predictions: &[usize],
    target_features: Var,
    target_predictions: &[usize],
) -> Result<Var> {
    let centers = |preds: &[usize]| -> Result<Vec<Vec<f64>>> {
        preds
            .iter()
            .map(|&y| bank.lookup_center(Cell::ClsFeature, y))
            .collect()
    };
    let source_centers = centers(source_predictions)?;
    let target_centers = centers(target_predictions)?;
    let term_s = kl_const_rows_to_features(tape, &source_centers, source_features)?;
    let term_t = kl_const_rows_to_features(tape, &target_centers, target_features)?;
    tape.add(term_s, term_t)
}

/// Rising factor `(epoch / total)^rate`.
pub fn up_rate(epoch: usize, total_epochs: usize, rate: f64) -> f64 {
    debug_assert!(total_epochs >= 1 && epoch <= total_epochs);
    (epoch as f64 / total_epochs as f64).powf(rate)
}

/// Style loss: KL from the predicted class's style centers to the live
/// channel statistics of the target branch's final features, batch-averaged
/// and phased in by the rising factor.
#[allow(clippy::too_many_arguments)]
pub fn style_loss(
    tape: &mut Tape,
    bank: &MemoryBank,
    target_final_features: Var,
    target_predictions: &[usize],
    up_rate_value: f64,
    stat_epsilon: f64,
    config: &LossConfig,
) -> Result<Var> {
    let mean_centers: Vec<Vec<f64>> = target_predictions
        .iter()
        .map(|&y| bank.lookup_center(Cell::StyleMean, y))
        .collect::<Result<_>>()?;
    let std_centers: Vec<Vec<f64>> = target_predictions
        .iter()
        .map(|&y| bank.lookup_center(Cell::StyleStd, y))
        .collect::<Result<_>>()?;

    let (mu, var) = tape.channel_mean_var(target_final_features)?;
    let sigma = tape.sqrt_eps(var, stat_epsilon);

    let term_mean = kl_const_rows_to_features(tape, &mean_centers, mu)?;
    let second_stat = if config.literal_style_second_term {
        mu
    } else {
        sigma
    };
    let term_std = kl_const_rows_to_features(tape, &std_centers, second_stat)?;

    Ok(if config.literal_uprate_scope {
        let scaled_mean = tape.affine(term_mean, up_rate_value, 0.0);
        tape.add(scaled_mean, term_std)?
    } else {
        let sum = tape.add(term_mean, term_std)?;
        tape.affine(sum, up_rate_value, 0.0)
    })
}

/// Enabled loss terms of one step; disabled components stay `None` so they
/// contribute exactly zero and never join the backward graph.
#[derive(Default)]
pub struct LossTerms {
    pub source_ce: Option<Var>,
    pub ssid_ce: Option<Var>,
    pub target_im: Option<Var>,
    pub discrimination: Option<Var>,
    pub style: Option<Var>,
}

/// `total = (L_s + L_i + L_t) + alpha · (L_D + L_style)`.
pub fn total_loss(
    tape: &mut Tape,
    terms: &LossTerms,
    alpha: f64,
    up_rate_value: f64,
) -> Result<(Var, LossBreakdown)> {
    if alpha < 0.0 {
        return Err(Error::contract("alpha must be nonnegative"));
    }
    let value = |tape: &Tape, v: &Option<Var>| v.map(|v| tape.value(v)).unwrap_or(0.0);
    let breakdown_parts = (
        value(tape, &terms.source_ce),
        value(tape, &terms.ssid_ce),
        value(tape, &terms.target_im),
        value(tape, &terms.discrimination),
        value(tape, &terms.style),
    );

    let mut intra: Option<Var> = None;
    for part in [terms.source_ce, terms.ssid_ce, terms.target_im]
        .into_iter()
        .flatten()
    {
        intra = Some(match intra {
            Some(acc) => tape.add(acc, part)?,
            None => part,
        });
    }
    let mut inter: Option<Var> = None;
    for part in [terms.discrimination, terms.style].into_iter().flatten() {
        inter = Some(match inter {
            Some(acc) => tape.add(acc, part)?,
            None => part,
        });
    }

    let total = match (intra, inter) {
        (Some(a), Some(b)) => {
            let scaled = tape.affine(b, alpha, 0.0);
            tape.add(a, scaled)?
        }
        (Some(a), None) => a,
        (None, Some(b)) => tape.affine(b, alpha, 0.0),
        (None, None) => tape.constant(vec![], vec![0.0]),
    };

    let breakdown = LossBreakdown {
        source_ce: breakdown_parts.0,
        ssid_ce: breakdown_parts.1,
        target_im: breakdown_parts.2,
        discrimination: breakdown_parts.3,
        style: breakdown_parts.4,
        up_rate_value,
        total: tape.value(total),
    };
    if !breakdown.total.is_finite() {
        let name = [
            ("source cross-entropy", breakdown.source_ce),
            ("intermediate cross-entropy", breakdown.ssid_ce),
            ("target information maximization", breakdown.target_im),
            ("discrimination", breakdown.discrimination),
            ("style", breakdown.style),
        ]
        .iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n.to_string())
        .unwrap_or_else(|| "total loss".to_string());
        return Err(Error::non_finite(name));
    }
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::Rng;

    fn leaf(tape: &mut Tape, shape: &[usize], data: &[f64]) -> Var {
        tape.leaf(&Tensor::new(shape.to_vec(), data.to_vec()).unwrap())
    }

    fn small_bank() -> MemoryBank {
        let mut bank = MemoryBank::new(vec![0, 1, 2], 3, 2, 2).unwrap();
        bank.update(
            &[0, 1, 2],
            &[0.4, -0.2, 1.0, 0.3, -0.8, 0.5],
            &[0.9, 1.1, 0.6, 1.4, 1.0, 0.7],
            &[0.2, -0.4, 0.8, 0.1, -0.3, 0.6],
        )
        .unwrap();
        bank
    }

    #[test]
    fn ce_is_zero_for_confident_correct_predictions() {
        let mut tape = Tape::new();
        let logits = leaf(&mut tape, &[1, 3], &[100.0, 0.0, 0.0]);
        let loss = ce_loss(&mut tape, logits, &[0]).unwrap();
        assert!(tape.value(loss).abs() < 1e-12);
    }

    #[test]
    fn ce_of_uniform_logits_is_log_class_count() {
        let mut tape = Tape::new();
        let logits = leaf(&mut tape, &[2, 5], &[0.0; 10]);
        let loss = ce_loss(&mut tape, logits, &[3, 1]).unwrap();
        // ln 5, computed independently.
        assert!((tape.value(loss) - 1.6094379124341003).abs() < 1e-12);
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = stream(2, "loss.ce");
        let data: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let logits = Tensor::new(vec![4, 3], data).unwrap();
        let report = crate::gradcheck::grad_check(
            |tape, vars| ce_loss(tape, vars[0], &[2, 0, 1, 0]),
            &[logits],
            1e-6,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn im_of_uniform_rows_is_zero() {
        let mut tape = Tape::new();
        let logits = leaf(&mut tape, &[4, 3], &[0.0; 12]);
        let loss = im_loss(&mut tape, logits, false).unwrap();
        assert!(tape.value(loss).abs() < 1e-14);
    }

    #[test]
    fn im_of_even_one_hot_split_is_minus_log_k() {
        // Confident predictions spread evenly over classes: the minimum.
        let k = 4;
        let mut data = vec![0.0; k * k];
        for r in 0..k {
            data[r * k + r] = 1000.0;
        }
        let mut tape = Tape::new();
        let logits = leaf(&mut tape, &[k, k], &data);
        let loss = im_loss(&mut tape, logits, false).unwrap();
        assert!((tape.value(loss) + (k as f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn im_of_collapsed_one_hot_rows_is_zero() {
        let mut data = vec![0.0; 12];
        for r in 0..4 {
            data[r * 3] = 1000.0;
        }
        let mut tape = Tape::new();
        let logits = leaf(&mut tape, &[4, 3], &data);
        let loss = im_loss(&mut tape, logits, false).unwrap();
        assert!(tape.value(loss).abs() < 1e-6);
    }

    #[test]
    fn literal_im_is_the_negation() {
        let mut rng = stream(5, "loss.im");
        let data: Vec<f64> = (0..15).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut tape = Tape::new();
        let logits = leaf(&mut tape, &[3, 5], &data);
        let std = im_loss(&mut tape, logits, false).unwrap();
        let lit = im_loss(&mut tape, logits, true).unwrap();
        assert!((tape.value(std) + tape.value(lit)).abs() < 1e-14);
    }

    #[test]
    fn im_gradient_matches_finite_differences() {
        let mut rng = stream(6, "loss.imgrad");
        let data: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let logits = Tensor::new(vec![4, 3], data).unwrap();
        let report = crate::gradcheck::grad_check(
            |tape, vars| im_loss(tape, vars[0], false),
            &[logits],
            1e-6,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn discrimination_is_zero_when_features_equal_centers() {
        let bank = small_bank();
        let mut tape = Tape::new();
        let rows: Vec<f64> = [0, 1]
            .iter()
            .flat_map(|&y| bank.lookup_center(Cell::ClsFeature, y).unwrap())
            .collect();
        let f = leaf(&mut tape, &[2, 2], &rows);
        let loss = discrimination_loss(&mut tape, &bank, f, &[0, 1], f, &[0, 1]).unwrap();
        assert!(tape.value(loss).abs() < 1e-12);
    }

    #[test]
    fn discrimination_is_shift_invariant() {
        // Adding one constant to every channel of both operands changes
        // nothing after softmax normalization.
        let mut bank = MemoryBank::new(vec![0, 1], 2, 2, 3).unwrap();
        bank.update(
            &[0, 1],
            &[0.0; 4],
            &[0.0; 4],
            &[0.3, -0.1, 0.7, -0.5, 0.2, 0.4],
        )
        .unwrap();
        let feats = [0.25, -0.4, 0.1, 0.6, -0.2, 0.05];
        let eval = |shift: f64| -> f64 {
            let mut shifted_bank = MemoryBank::new(vec![0, 1], 2, 2, 3).unwrap();
            let c: Vec<f64> = [0.3, -0.1, 0.7, -0.5, 0.2, 0.4]
                .iter()
                .map(|v| v + shift)
                .collect();
            shifted_bank.update(&[0, 1], &[0.0; 4], &[0.0; 4], &c).unwrap();
            let mut tape = Tape::new();
            let data: Vec<f64> = feats.iter().map(|v| v + shift).collect();
            let f = leaf(&mut tape, &[2, 3], &data);
            let loss =
                discrimination_loss(&mut tape, &shifted_bank, f, &[1, 0], f, &[0, 1]).unwrap();
            tape.value(loss)
        };
        let _ = bank;
        assert!((eval(0.0) - eval(7.5)).abs() < 1e-12);
    }

    #[test]
    fn up_rate_endpoints_and_reference_value() {
        assert_eq!(up_rate(0, 10, 0.9), 0.0);
        assert_eq!(up_rate(10, 10, 0.9), 1.0);
        // (9/10)^0.9, checked against a direct high-precision evaluation.
        assert!((up_rate(9, 10, 0.9) - 0.90953).abs() < 1e-5);
    }

    #[test]
    fn style_loss_is_zero_when_stats_match_centers() {
        // Build features, then a bank whose centers equal their statistics.
        let mut rng = stream(8, "loss.style");
        let (b, n, c) = (2, 4, 3);
        let data: Vec<f64> = (0..b * n * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (means, stds) = crate::membank::row_channel_stats(&data, b, n, c, 1e-5);
        let mut bank = MemoryBank::new(vec![0, 1], 2, c, 1).unwrap();
        bank.update(&[0, 1], &means, &stds, &[0.0; 2]).unwrap();

        let mut tape = Tape::new();
        let f = leaf(&mut tape, &[b, n, c], &data);
        let cfg = LossConfig::default();
        let loss = style_loss(&mut tape, &bank, f, &[0, 1], 0.37, 1e-5, &cfg).unwrap();
        assert!(tape.value(loss).abs() < 1e-12);
    }

    #[test]
    fn style_loss_vanishes_at_epoch_zero_and_grows_with_the_factor() {
        let mut rng = stream(9, "loss.style2");
        let (b, n, c) = (2, 3, 2);
        let data: Vec<f64> = (0..b * n * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut bank = MemoryBank::new(vec![0, 1], 2, c, 1).unwrap();
        bank.update(&[0, 1], &[0.5, -0.5, 0.2, 0.9], &[1.0, 0.8, 1.2, 0.6], &[0.0; 2])
            .unwrap();
        let cfg = LossConfig::default();
        let eval = |up: f64| -> f64 {
            let mut tape = Tape::new();
            let f = leaf(&mut tape, &[b, n, c], &data);
            let loss = style_loss(&mut tape, &bank, f, &[1, 0], up, 1e-5, &cfg).unwrap();
            tape.value(loss)
        };
        assert_eq!(eval(up_rate(0, 10, 0.9)), 0.0);
        let early = eval(up_rate(3, 10, 0.9));
        let late = eval(up_rate(8, 10, 0.9));
        assert!(late > early && early > 0.0);
    }

    #[test]
    fn total_combines_components_with_alpha() {
        let bank = small_bank();
        let mut rng = stream(10, "loss.total");
        let mut tape = Tape::new();
        let logits_s = leaf(
            &mut tape,
            &[2, 3],
            &(0..6).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>(),
        );
        let logits_t = leaf(
            &mut tape,
            &[2, 3],
            &(0..6).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>(),
        );
        let f_cls = leaf(
            &mut tape,
            &[2, 2],
            &(0..4).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>(),
        );

        let l_s = ce_loss(&mut tape, logits_s, &[0, 2]).unwrap();
        let l_t = im_loss(&mut tape, logits_t, false).unwrap();
        let l_d = discrimination_loss(&mut tape, &bank, f_cls, &[0, 1], f_cls, &[2, 0]).unwrap();

        let alpha = 0.7;
        let terms = LossTerms {
            source_ce: Some(l_s),
            target_im: Some(l_t),
            discrimination: Some(l_d),
            ..Default::default()
        };
        let (_, bd) = total_loss(&mut tape, &terms, alpha, 0.5).unwrap();
        let expect = bd.source_ce + bd.target_im + alpha * bd.discrimination;
        assert!((bd.total - expect).abs() < 1e-12);
        assert_eq!(bd.ssid_ce, 0.0);
        assert_eq!(bd.style, 0.0);

        // With the inter terms disabled the total is exactly the baseline.
        let baseline_terms = LossTerms {
            source_ce: Some(l_s),
            target_im: Some(l_t),
            ..Default::default()
        };
        let (_, base) = total_loss(&mut tape, &baseline_terms, alpha, 0.5).unwrap();
        assert_eq!(base.total, base.source_ce + base.target_im);
    }

    #[test]
    fn non_finite_components_are_reported_by_name() {
        let mut tape = Tape::new();
        let bad = tape.constant(vec![], vec![f64::INFINITY]);
        let terms = LossTerms {
            target_im: Some(bad),
            ..Default::default()
        };
        match total_loss(&mut tape, &terms, 1.0, 0.0) {
            Err(Error::NonFinite { component }) => {
                assert!(component.contains("information maximization"))
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn discrimination_gradient_matches_finite_differences() {
        let bank = small_bank();
        let mut rng = stream(11, "loss.dgrad");
        let data: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let features = Tensor::new(vec![3, 2], data).unwrap();
        let report = crate::gradcheck::grad_check(
            |tape, vars| discrimination_loss(tape, &bank, vars[0], &[0, 1, 2], vars[0], &[2, 1, 0]),
            &[features],
            1e-6,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn style_gradient_matches_finite_differences() {
        let bank = small_bank();
        let mut rng = stream(12, "loss.sgrad");
        let data: Vec<f64> = (0..2 * 3 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let features = Tensor::new(vec![2, 3, 2], data).unwrap();
        let cfg = LossConfig::default();
        let report = crate::gradcheck::grad_check(
            |tape, vars| style_loss(tape, &bank, vars[0], &[1, 2], 0.8, 1e-5, &cfg),
            &[features],
            1e-5,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    proptest! {
        #[test]
        fn im_loss_is_bounded_by_log_k(
            data in proptest::collection::vec(-6.0f64..6.0, 12)
        ) {
            let mut tape = Tape::new();
            let logits = leaf(&mut tape, &[4, 3], &data);
            let loss = im_loss(&mut tape, logits, false).unwrap();
            let v = tape.value(loss);
            let bound = (3.0f64).ln() + 1e-9;
            prop_assert!(v >= -bound && v <= bound, "{v} outside ±ln 3");
        }

        #[test]
        fn kl_losses_are_nonnegative(
            feats in proptest::collection::vec(-4.0f64..4.0, 6),
            centers in proptest::collection::vec(-4.0f64..4.0, 6),
        ) {
            let mut bank = MemoryBank::new(vec![0, 1], 2, 1, 3).unwrap();
            bank.update(&[0, 1], &[0.0; 2], &[0.0; 2], &centers).unwrap();
            let mut tape = Tape::new();
            let f = leaf(&mut tape, &[2, 3], &feats);
            let loss = discrimination_loss(&mut tape, &bank, f, &[0, 1], f, &[1, 0]).unwrap();
            let v = tape.value(loss);
            prop_assert!(v >= -1e-12, "KL went negative: {v}");
        }
    }
}
