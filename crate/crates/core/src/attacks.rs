//! L-infinity evasion attacks and robustness evaluation.
//!
//! White-box attacks (FGSM and PGD, untargeted or targeted) consume the
//! pipeline's input gradient; the Square attack is black-box random search
//! over square-shaped `±eps` patches and touches only probabilities. All
//! attacks emit images inside the `eps`-ball around the original, clamped to
//! `[0, 1]`, and success is always judged by one fresh seeded prediction of
//! the attacked pipeline on the final image.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::Dataset;
use crate::image::ImageTensor;
use crate::model::argmax;
use crate::pipeline::{Oracle, Pipeline};
use crate::rng::RngStream;

/// The attack suite, named as the CLI spells them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AttackKind {
    Fgsm,
    Pgd,
    PgdTargeted,
    Square,
}

impl AttackKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::PgdTargeted => "pgd-t",
            AttackKind::Square => "square",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "fgsm" => Ok(AttackKind::Fgsm),
            "pgd" => Ok(AttackKind::Pgd),
            "pgd-t" => Ok(AttackKind::PgdTargeted),
            "square" => Ok(AttackKind::Square),
            other => Err(Error::Config(format!("unknown attack '{other}'"))),
        }
    }
}

/// Shared attack hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    /// L-infinity budget as a fraction of the `[0, 1]` range.
    pub epsilon: f64,
    /// PGD step size.
    pub step_size: f64,
    /// PGD iterations.
    pub iterations: usize,
    /// PGD restarts; the best iterate across restarts is kept.
    pub restarts: usize,
    /// Start PGD restarts from a uniform point in the ball.
    pub random_start: bool,
    /// Square attack: maximum oracle queries spent searching.
    pub query_budget: usize,
    /// Square attack: initial square-area fraction.
    pub p_init: f64,
    /// Root seed for batch evaluations.
    pub rng_seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        let epsilon = 8.0 / 255.0;
        Self {
            epsilon,
            step_size: epsilon / 4.0,
            iterations: 40,
            restarts: 1,
            random_start: true,
            query_budget: 1000,
            p_init: 0.3,
            rng_seed: 0,
        }
    }
}

impl AttackConfig {
    /// `epsilon = 0` is allowed as the degenerate no-perturbation case.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::InvalidAttackConfig(format!(
                "epsilon must be in [0, 1), got {}",
                self.epsilon
            )));
        }
        if self.step_size <= 0.0 {
            return Err(Error::InvalidAttackConfig(format!(
                "step_size must be > 0, got {}",
                self.step_size
            )));
        }
        if self.iterations == 0 || self.restarts == 0 {
            return Err(Error::InvalidAttackConfig(
                "iterations and restarts must be >= 1".into(),
            ));
        }
        if self.query_budget == 0 {
            return Err(Error::InvalidAttackConfig("query_budget must be >= 1".into()));
        }
        if !(self.p_init > 0.0 && self.p_init <= 1.0) {
            return Err(Error::InvalidAttackConfig(format!(
                "p_init must be in (0, 1], got {}",
                self.p_init
            )));
        }
        Ok(())
    }
}

/// Result of one attack on one example.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    /// Final image; within the `eps`-ball of the original and in `[0, 1]`.
    pub adversarial: ImageTensor,
    /// Prediction differs from the true label under one fresh seeded draw of
    /// the attacked pipeline on `adversarial`.
    pub success: bool,
    /// Oracle/gradient queries spent searching. The single final evaluation
    /// draw is not part of the search budget and is not counted here.
    pub queries_used: usize,
    /// Margin `p_label - max_other p` at the final evaluation.
    pub final_margin: f64,
}

impl AttackOutcome {
    fn checked(
        original: &ImageTensor,
        adversarial: ImageTensor,
        epsilon: f64,
        success: bool,
        queries_used: usize,
        final_margin: f64,
    ) -> Self {
        let dist = original
            .linf_distance(&adversarial)
            .expect("attack preserved image shape");
        assert!(
            dist <= epsilon + 1e-9,
            "adversarial image escaped the eps-ball: {dist} > {epsilon}"
        );
        assert!(
            adversarial.within_unit_range(1e-12),
            "adversarial image escaped [0, 1]"
        );
        Self {
            adversarial,
            success,
            queries_used,
            final_margin,
        }
    }
}

/// One line of an attack trace.
#[derive(Debug, Clone, Serialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub loss: f64,
    pub accepted: bool,
    pub queries: usize,
}

/// `p_label - max_{k != label} p_k`; negative means misclassified.
pub fn margin_loss(probs: &[f64], label: usize) -> f64 {
    let best_other = probs
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != label)
        .map(|(_, &p)| p)
        .fold(f64::NEG_INFINITY, f64::max);
    probs[label] - best_other
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One fresh seeded prediction on the final image: the evaluation rule for
/// every attack, randomized pipelines included.
fn evaluate_final(
    oracle: &dyn Oracle,
    adversarial: &ImageTensor,
    label: usize,
    root: &RngStream,
) -> Result<(bool, f64)> {
    let mut eval_rng = root.derive(b"final-eval");
    let probs = oracle.probs(adversarial, &mut eval_rng)?;
    Ok((argmax(&probs) != label, margin_loss(&probs, label)))
}

fn check_label(num_classes: usize, label: usize) -> Result<()> {
    if label >= num_classes {
        return Err(Error::InvalidLabel { label, num_classes });
    }
    Ok(())
}

/// Single-step sign-gradient attack: `clamp01(x + eps * sign(grad))`.
pub fn fgsm(
    pipeline: &dyn Pipeline,
    x: &ImageTensor,
    label: usize,
    cfg: &AttackConfig,
    root: &RngStream,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    check_label(pipeline.num_classes(), label)?;
    let mut grad_rng = root.derive(b"fgsm-grad");
    let (_, grad) = pipeline.ce_loss_and_input_grad(x, label, &mut grad_rng)?;
    let mut adv = x.clone();
    for (a, g) in adv.as_mut_slice().iter_mut().zip(grad.as_slice()) {
        *a = (*a + cfg.epsilon * sign(*g)).clamp(0.0, 1.0);
    }
    let (success, final_margin) = evaluate_final(pipeline, &adv, label, root)?;
    Ok(AttackOutcome::checked(
        x,
        adv,
        cfg.epsilon,
        success,
        1,
        final_margin,
    ))
}

/// Iterated sign-gradient attack with projection onto the `eps`-ball and
/// `[0, 1]`, optional random start per restart, best iterate by loss kept.
///
/// Untargeted (`target = None`) ascends the cross-entropy of the true label;
/// targeted descends the cross-entropy of the target class.
pub fn pgd(
    pipeline: &dyn Pipeline,
    x: &ImageTensor,
    label: usize,
    cfg: &AttackConfig,
    target: Option<usize>,
    root: &RngStream,
) -> Result<AttackOutcome> {
    pgd_observed(pipeline, x, label, cfg, target, root, |_, _| {})
}

/// [`pgd`] with a per-step observer receiving the trace record and the
/// current iterate (before the step is applied).
pub fn pgd_observed(
    pipeline: &dyn Pipeline,
    x: &ImageTensor,
    label: usize,
    cfg: &AttackConfig,
    target: Option<usize>,
    root: &RngStream,
    mut on_step: impl FnMut(&TraceRecord, &ImageTensor),
) -> Result<AttackOutcome> {
    cfg.validate()?;
    let num_classes = pipeline.num_classes();
    check_label(num_classes, label)?;
    if let Some(t) = target {
        if t >= num_classes || t == label {
            return Err(Error::InvalidTarget(format!(
                "target {t} invalid for label {label} with {num_classes} classes"
            )));
        }
    }
    let attacked_class = target.unwrap_or(label);
    // Untargeted maximizes CE(label); targeted minimizes CE(target).
    let direction = if target.is_none() { 1.0 } else { -1.0 };
    let objective = |loss: f64| direction * loss;

    let mut queries = 0usize;
    let mut best: Option<(f64, ImageTensor)> = None;
    let consider = |obj: f64, img: &ImageTensor, best: &mut Option<(f64, ImageTensor)>| {
        if best.as_ref().is_none_or(|(b, _)| obj > *b) {
            *best = Some((obj, img.clone()));
        }
    };

    for restart in 0..cfg.restarts {
        let mut work = root.derive_indexed("pgd-restart", restart);
        let mut current = if cfg.random_start {
            let mut c = x.clone();
            for v in c.as_mut_slice() {
                *v = (*v + (2.0 * work.next_f64() - 1.0) * cfg.epsilon).clamp(0.0, 1.0);
            }
            c
        } else {
            x.clone()
        };

        for iteration in 0..cfg.iterations {
            let (loss, grad) =
                pipeline.ce_loss_and_input_grad(&current, attacked_class, &mut work)?;
            queries += 1;
            consider(objective(loss), &current, &mut best);
            on_step(
                &TraceRecord {
                    iteration,
                    loss,
                    accepted: true,
                    queries,
                },
                &current,
            );
            for ((v, &g), &orig) in current
                .as_mut_slice()
                .iter_mut()
                .zip(grad.as_slice())
                .zip(x.as_slice())
            {
                let stepped = *v + direction * cfg.step_size * sign(g);
                *v = stepped
                    .clamp(orig - cfg.epsilon, orig + cfg.epsilon)
                    .clamp(0.0, 1.0);
            }
        }

        // Score the final iterate of this restart from its probabilities.
        let probs = pipeline.probs(&current, &mut work)?;
        queries += 1;
        let p = probs[attacked_class].max(f64::MIN_POSITIVE);
        let final_loss = -p.ln();
        consider(objective(final_loss), &current, &mut best);
        on_step(
            &TraceRecord {
                iteration: cfg.iterations,
                loss: final_loss,
                accepted: true,
                queries,
            },
            &current,
        );
    }

    let (_, adv) = best.expect("at least one PGD iterate was scored");
    let (success, final_margin) = evaluate_final(pipeline, &adv, label, root)?;
    Ok(AttackOutcome::checked(
        x,
        adv,
        cfg.epsilon,
        success,
        queries,
        final_margin,
    ))
}

/// Standard breakpoints at which the square-area fraction halves, stated for
/// a 10,000-query budget and scaled linearly to the configured budget.
const SQUARE_SCHEDULE_BREAKS: [usize; 9] = [10, 50, 200, 500, 1000, 2000, 4000, 6000, 8000];

fn square_side(iteration: usize, budget: usize, p_init: f64, height: usize, width: usize) -> usize {
    let scale = budget as f64 / 10_000.0;
    let passed = SQUARE_SCHEDULE_BREAKS
        .iter()
        .filter(|&&b| iteration >= ((b as f64 * scale).round() as usize).max(1))
        .count();
    let p = p_init / f64::powi(2.0, passed as i32);
    let side = (p * (height * width) as f64).sqrt().round() as usize;
    side.clamp(1, height.min(width))
}

/// Black-box random search over square `±eps` patches.
///
/// Starts from a vertical-stripe `±eps` perturbation (one sign per column and
/// channel); each iteration proposes one random square region re-signed per
/// channel and accepts it iff the margin loss strictly decreases. Stops at
/// success (negative margin) or when the query budget is exhausted — the
/// latter is a normal unsuccessful outcome.
pub fn square_attack(
    oracle: &dyn Oracle,
    x: &ImageTensor,
    label: usize,
    cfg: &AttackConfig,
    root: &RngStream,
) -> Result<AttackOutcome> {
    square_attack_observed(oracle, x, label, cfg, root, |_| {})
}

/// [`square_attack`] with a per-proposal trace observer.
pub fn square_attack_observed(
    oracle: &dyn Oracle,
    x: &ImageTensor,
    label: usize,
    cfg: &AttackConfig,
    root: &RngStream,
    mut on_step: impl FnMut(&TraceRecord),
) -> Result<AttackOutcome> {
    cfg.validate()?;
    check_label(oracle.num_classes(), label)?;
    let (height, width, channels) = x.shape();
    let mut proposals = root.derive(b"square-proposals");
    let mut queries_rng = root.derive(b"square-oracle");

    // Vertical stripe init: one sign per (column, channel), all rows.
    let mut delta = vec![0.0; x.len()];
    for col in 0..width {
        for ch in 0..channels {
            let s = proposals.next_sign() * cfg.epsilon;
            for row in 0..height {
                delta[(row * width + col) * channels + ch] = s;
            }
        }
    }
    let apply = |delta: &[f64]| -> ImageTensor {
        let mut img = x.clone();
        for (v, d) in img.as_mut_slice().iter_mut().zip(delta) {
            *v = (*v + d).clamp(0.0, 1.0);
        }
        img
    };

    let mut current = apply(&delta);
    let mut queries = 1usize;
    let mut margin_cur = margin_loss(&oracle.probs(&current, &mut queries_rng)?, label);
    on_step(&TraceRecord {
        iteration: 0,
        loss: margin_cur,
        accepted: true,
        queries,
    });

    let mut iteration = 0usize;
    // Proposals identical to the current image are skipped without spending a
    // query; the cap keeps the loop finite when everything is skipped.
    let proposal_cap = cfg.query_budget.saturating_mul(50);
    while margin_cur >= 0.0 && queries < cfg.query_budget && iteration < proposal_cap {
        iteration += 1;
        let side = square_side(iteration, cfg.query_budget, cfg.p_init, height, width);
        let row0 = proposals.next_below((height - side + 1) as u64) as usize;
        let col0 = proposals.next_below((width - side + 1) as u64) as usize;
        let mut cand_delta = delta.clone();
        for ch in 0..channels {
            let s = proposals.next_sign() * cfg.epsilon;
            for row in row0..row0 + side {
                for col in col0..col0 + side {
                    cand_delta[(row * width + col) * channels + ch] = s;
                }
            }
        }
        let candidate = apply(&cand_delta);
        if candidate == current {
            on_step(&TraceRecord {
                iteration,
                loss: margin_cur,
                accepted: false,
                queries,
            });
            continue;
        }
        let margin_new = margin_loss(&oracle.probs(&candidate, &mut queries_rng)?, label);
        queries += 1;
        let accepted = margin_new < margin_cur;
        if accepted {
            delta = cand_delta;
            current = candidate;
            margin_cur = margin_new;
        }
        on_step(&TraceRecord {
            iteration,
            loss: margin_new,
            accepted,
            queries,
        });
    }

    let (success, final_margin) = evaluate_final(oracle, &current, label, root)?;
    Ok(AttackOutcome::checked(
        x,
        current,
        cfg.epsilon,
        success,
        queries,
        final_margin,
    ))
}

/// Runs one attack of the given kind. Targeted PGD aims at the most likely
/// wrong class under one clean prediction (ties to the lowest class index).
pub fn run_attack(
    kind: AttackKind,
    pipeline: &dyn Pipeline,
    x: &ImageTensor,
    label: usize,
    cfg: &AttackConfig,
    root: &RngStream,
) -> Result<AttackOutcome> {
    match kind {
        AttackKind::Fgsm => fgsm(pipeline, x, label, cfg, root),
        AttackKind::Pgd => pgd(pipeline, x, label, cfg, None, root),
        AttackKind::PgdTargeted => {
            let mut select_rng = root.derive(b"target-select");
            let probs = pipeline.probs(x, &mut select_rng)?;
            let mut target = usize::from(label == 0);
            for (k, &p) in probs.iter().enumerate() {
                if k != label && p > probs[target] {
                    target = k;
                }
            }
            pgd(pipeline, x, label, cfg, Some(target), root)
        }
        AttackKind::Square => square_attack(pipeline, x, label, cfg, root),
    }
}

/// Crafts adversarial examples against `source` and measures the robust
/// accuracy of `target` on them (per-example fresh evaluation draws).
pub fn transfer_eval(
    source: &dyn Pipeline,
    target: &dyn Oracle,
    dataset: &Dataset,
    attack: AttackKind,
    cfg: &AttackConfig,
) -> Result<f64> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("transfer evaluation needs examples".into()));
    }
    let root = RngStream::new(cfg.rng_seed);
    let survived: Vec<bool> = (0..dataset.len())
        .into_par_iter()
        .map(|i| -> Result<bool> {
            let example_root = root.derive_indexed("transfer-example", i);
            let outcome = run_attack(
                attack,
                source,
                &dataset.images()[i],
                dataset.labels()[i],
                cfg,
                &example_root,
            )?;
            let mut eval_rng = example_root.derive(b"target-eval");
            let probs = target.probs(&outcome.adversarial, &mut eval_rng)?;
            Ok(argmax(&probs) == dataset.labels()[i])
        })
        .collect::<Result<_>>()?;
    Ok(percentage(survived.iter().filter(|&&s| s).count(), survived.len()))
}

/// Per-attack robust accuracies plus the per-example worst case.
#[derive(Debug, Clone)]
pub struct WorstCaseReport {
    /// Robust accuracy (%) per attack, in the order attacks were given.
    pub per_attack: Vec<(AttackKind, f64)>,
    /// Robust accuracy (%) counting an example only if it survived every
    /// attack in the list.
    pub combined: f64,
    /// Per-attack survival bitmaps, one bool per example.
    pub survived: Vec<(AttackKind, Vec<bool>)>,
    pub num_examples: usize,
}

impl WorstCaseReport {
    /// Recomputes the combined column from the stored bitmaps.
    pub fn combined_from_bitmaps(&self) -> f64 {
        let n = self.num_examples;
        let all = (0..n)
            .filter(|&i| self.survived.iter().all(|(_, bits)| bits[i]))
            .count();
        percentage(all, n)
    }
}

fn percentage(count: usize, total: usize) -> f64 {
    100.0 * count as f64 / total as f64
}

/// Runs every attack in the list against every example; an example counts as
/// robust in the combined column only if it survives all of them.
pub fn worst_case_eval(
    pipeline: &dyn Pipeline,
    dataset: &Dataset,
    attacks: &[AttackKind],
    cfg: &AttackConfig,
) -> Result<WorstCaseReport> {
    cfg.validate()?;
    if attacks.is_empty() {
        return Err(Error::InvalidAttackConfig(
            "worst-case evaluation needs at least one attack".into(),
        ));
    }
    if dataset.is_empty() {
        return Err(Error::Data("worst-case evaluation needs examples".into()));
    }
    let root = RngStream::new(cfg.rng_seed);
    let n = dataset.len();
    // survived_by_example[i][a]
    let survived_by_example: Vec<Vec<bool>> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<Vec<bool>> {
            let example_root = root.derive_indexed("worst-case-example", i);
            attacks
                .iter()
                .enumerate()
                .map(|(ai, &kind)| {
                    let attack_root = example_root.derive_indexed("attack", ai);
                    let outcome = run_attack(
                        kind,
                        pipeline,
                        &dataset.images()[i],
                        dataset.labels()[i],
                        cfg,
                        &attack_root,
                    )?;
                    Ok(!outcome.success)
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut survived = Vec::with_capacity(attacks.len());
    let mut per_attack = Vec::with_capacity(attacks.len());
    for (ai, &kind) in attacks.iter().enumerate() {
        let bits: Vec<bool> = survived_by_example.iter().map(|row| row[ai]).collect();
        per_attack.push((kind, percentage(bits.iter().filter(|&&b| b).count(), n)));
        survived.push((kind, bits));
    }
    let combined_count = survived_by_example
        .iter()
        .filter(|row| row.iter().all(|&b| b))
        .count();
    Ok(WorstCaseReport {
        per_attack,
        combined: percentage(combined_count, n),
        survived,
        num_examples: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SubModel;
    use crate::pipeline::{OracleOnly, SingleModelPipeline};
    use crate::transform::ShuffleKey;
    use std::sync::atomic::{AtomicUsize, Ordering};

    /// 2x2x1 identity-key pipeline around a hand-built linear model.
    struct LinearFixture {
        key: ShuffleKey,
        model: SubModel,
    }

    impl LinearFixture {
        fn new(weights: Vec<f64>, biases: Vec<f64>) -> Self {
            let classes = biases.len();
            Self {
                key: ShuffleKey::identity(2, 1).unwrap(),
                model: SubModel::from_parts(vec![4, classes], vec![weights], vec![biases])
                    .unwrap(),
            }
        }

        fn pipeline(&self) -> SingleModelPipeline<'_> {
            SingleModelPipeline::new(&self.key, &self.model).unwrap()
        }
    }

    fn mid_image() -> ImageTensor {
        ImageTensor::new(2, 2, 1, vec![0.5, 0.5, 0.5, 0.5]).unwrap()
    }

    fn cfg_with(eps: f64) -> AttackConfig {
        AttackConfig {
            epsilon: eps,
            step_size: eps.max(1e-3) / 4.0,
            ..AttackConfig::default()
        }
    }

    /// Counting wrapper for query-accounting checks.
    struct CountingOracle<'a> {
        inner: &'a dyn Oracle,
        calls: AtomicUsize,
    }

    impl Oracle for CountingOracle<'_> {
        fn num_classes(&self) -> usize {
            self.inner.num_classes()
        }

        fn probs(&self, x: &ImageTensor, rng: &mut RngStream) -> Result<Vec<f64>> {
            self.calls.fetch_add(1, Ordering::Relaxed);
            self.inner.probs(x, rng)
        }
    }

    #[test]
    fn fgsm_zero_epsilon_returns_input() {
        let fx = LinearFixture::new(vec![1.0, -0.5, 0.2, 0.8, -1.0, 0.5, -0.2, -0.8], vec![0.0, 0.0]);
        let p = fx.pipeline();
        let x = mid_image();
        let out = fgsm(&p, &x, 0, &cfg_with(0.0), &RngStream::new(1)).unwrap();
        assert_eq!(out.adversarial, x);
        // Label 0 logit is positive at 0.5-gray, so the clean prediction is
        // correct and the zero-budget attack fails.
        assert!(!out.success);
    }

    #[test]
    fn fgsm_achieves_linear_worst_case_exactly() {
        // Binary linear model: the worst loss in the eps-ball is attained at
        // x + eps * sign(w1 - w0), raising the cross-entropy to
        // ln(1 + exp(-(m - eps * |w0 - w1|_1))) where m is the clean margin.
        let w0 = [1.0, -0.5, 0.25, 0.75];
        let w1 = [-0.5, 0.25, -1.0, 0.5];
        let fx = LinearFixture::new(w0.iter().chain(&w1).copied().collect(), vec![0.0, 0.0]);
        let p = fx.pipeline();
        let x = mid_image();
        let eps = 0.05;
        let out = fgsm(&p, &x, 0, &cfg_with(eps), &RngStream::new(2)).unwrap();

        let margin_clean: f64 = (0..4).map(|i| (w0[i] - w1[i]) * 0.5).sum();
        let l1: f64 = (0..4).map(|i| (w0[i] - w1[i]).abs()).sum();
        let worst_loss = (1.0 + (-(margin_clean - eps * l1)).exp()).ln();

        let enc = fx.key.encrypt(&out.adversarial).unwrap();
        let (adv_loss, _, _) = fx.model.loss_and_grads(enc.as_slice(), 0).unwrap();
        assert!(
            (adv_loss - worst_loss).abs() < 1e-12,
            "adv loss {adv_loss} vs closed form {worst_loss}"
        );
    }

    #[test]
    fn fgsm_zero_gradient_leaves_input_unchanged() {
        let fx = LinearFixture::new(vec![0.0; 8], vec![0.0, 0.0]);
        let p = fx.pipeline();
        let x = mid_image();
        let out = fgsm(&p, &x, 0, &cfg_with(0.05), &RngStream::new(3)).unwrap();
        assert_eq!(out.adversarial, x);
    }

    #[test]
    fn fgsm_requires_gradients() {
        let fx = LinearFixture::new(vec![0.5; 8], vec![0.0, 0.0]);
        let p = fx.pipeline();
        let blackbox = OracleOnly::new(&p);
        assert!(matches!(
            fgsm(&blackbox, &mid_image(), 0, &cfg_with(0.05), &RngStream::new(4)),
            Err(Error::GradientUnavailable(_))
        ));
    }

    #[test]
    fn single_step_pgd_reduces_to_fgsm() {
        let fx = LinearFixture::new(
            vec![0.9, -0.3, 0.6, -0.1, -0.7, 0.4, -0.5, 0.2],
            vec![0.1, -0.1],
        );
        let p = fx.pipeline();
        let x = mid_image();
        let eps = 0.04;
        let cfg = AttackConfig {
            epsilon: eps,
            step_size: eps,
            iterations: 1,
            restarts: 1,
            random_start: false,
            ..AttackConfig::default()
        };
        let a = fgsm(&p, &x, 0, &cfg, &RngStream::new(5)).unwrap();
        let b = pgd(&p, &x, 0, &cfg, None, &RngStream::new(5)).unwrap();
        assert_eq!(a.adversarial, b.adversarial);
        assert_eq!(a.success, b.success);
    }

    #[test]
    fn pgd_iterates_respect_ball_and_box() {
        let key = ShuffleKey::generate(10, 2, 1).unwrap();
        let model = SubModel::init(&[16, 8, 3], 11).unwrap();
        let p = SingleModelPipeline::new(&key, &model).unwrap();
        let mut rng = RngStream::new(12);
        let x = ImageTensor::from_fn(4, 4, 1, |_, _, _| rng.next_f64()).unwrap();
        let cfg = AttackConfig {
            epsilon: 0.06,
            step_size: 0.02,
            iterations: 10,
            restarts: 2,
            random_start: true,
            ..AttackConfig::default()
        };
        let mut iterates = Vec::new();
        let out = pgd_observed(&p, &x, 1, &cfg, None, &RngStream::new(13), |_, img| {
            iterates.push(img.clone());
        })
        .unwrap();
        assert!(!iterates.is_empty());
        for it in &iterates {
            assert!(it.linf_distance(&x).unwrap() <= cfg.epsilon + 1e-9);
            assert!(it.within_unit_range(1e-12));
        }
        assert!(out.adversarial.linf_distance(&x).unwrap() <= cfg.epsilon + 1e-9);
    }

    #[test]
    fn pgd_rejects_bad_targets() {
        let fx = LinearFixture::new(vec![0.5; 8], vec![0.0, 0.0]);
        let p = fx.pipeline();
        let x = mid_image();
        let cfg = cfg_with(0.05);
        assert!(matches!(
            pgd(&p, &x, 0, &cfg, Some(0), &RngStream::new(6)),
            Err(Error::InvalidTarget(_))
        ));
        assert!(matches!(
            pgd(&p, &x, 0, &cfg, Some(9), &RngStream::new(6)),
            Err(Error::InvalidTarget(_))
        ));
    }

    #[test]
    fn square_accepted_margins_strictly_decrease_on_deterministic_oracle() {
        let fx = LinearFixture::new(
            vec![2.0, -1.0, 1.5, -0.5, -2.0, 1.0, -1.5, 0.5],
            vec![0.0, 0.0],
        );
        let p = fx.pipeline();
        let x = mid_image();
        let cfg = AttackConfig {
            epsilon: 0.1,
            query_budget: 300,
            p_init: 0.5,
            ..AttackConfig::default()
        };
        let mut accepted_margins = Vec::new();
        let out = square_attack_observed(&p, &x, 0, &cfg, &RngStream::new(21), |rec| {
            if rec.accepted {
                accepted_margins.push(rec.loss);
            }
        })
        .unwrap();
        assert!(accepted_margins.len() >= 2, "no proposals accepted");
        for w in accepted_margins.windows(2) {
            assert!(w[1] < w[0], "accepted margins not strictly decreasing");
        }
        assert!(out.queries_used <= cfg.query_budget);
    }

    #[test]
    fn square_breaks_linear_model_when_ball_crosses_boundary() {
        // Clean logit margin is (w0 - w1) . x + b0 - b1 = 0.3, while the ball
        // allows a logit shift of eps * |w0 - w1|_1 = 0.125 * 8 = 1.0, so the
        // boundary is well inside the ball and random search should cross it
        // within budget for essentially every seed.
        let fx = LinearFixture::new(
            vec![1.0, -1.0, 1.0, -1.0, -1.0, 1.0, -1.0, 1.0],
            vec![0.3, 0.0],
        );
        let p = fx.pipeline();
        let x = mid_image();
        let cfg = AttackConfig {
            epsilon: 0.125,
            query_budget: 10_000,
            p_init: 0.8,
            ..AttackConfig::default()
        };
        let successes = (0..30)
            .filter(|&s| {
                square_attack(&p, &x, 0, &cfg, &RngStream::new(1000 + s))
                    .unwrap()
                    .success
            })
            .count();
        assert!(successes >= 29, "only {successes}/30 seeds succeeded");
    }

    #[test]
    fn square_query_accounting_is_exact() {
        let fx = LinearFixture::new(vec![0.5, -0.5, 0.25, -0.25, 0.0, 0.0, 0.0, 0.0], vec![0.4, 0.0]);
        let p = fx.pipeline();
        let counting = CountingOracle {
            inner: &p,
            calls: AtomicUsize::new(0),
        };
        let x = mid_image();
        let cfg = AttackConfig {
            epsilon: 0.03,
            query_budget: 50,
            p_init: 0.4,
            ..AttackConfig::default()
        };
        let out = square_attack(&counting, &x, 0, &cfg, &RngStream::new(31)).unwrap();
        // Search queries plus the single final evaluation draw.
        assert_eq!(counting.calls.load(Ordering::Relaxed), out.queries_used + 1);
        assert!(out.queries_used <= cfg.query_budget);
    }

    #[test]
    fn square_budget_exhaustion_is_a_normal_outcome() {
        // Constant model: margins never change, nothing is ever accepted.
        let fx = LinearFixture::new(vec![0.0; 8], vec![3.0, 0.0]);
        let p = fx.pipeline();
        let cfg = AttackConfig {
            epsilon: 0.05,
            query_budget: 40,
            ..AttackConfig::default()
        };
        let out = square_attack(&p, &mid_image(), 0, &cfg, &RngStream::new(41)).unwrap();
        assert!(!out.success);
        assert!(out.queries_used <= 40);
    }

    #[test]
    fn square_rejects_bad_p_init() {
        let fx = LinearFixture::new(vec![0.5; 8], vec![0.0, 0.0]);
        let p = fx.pipeline();
        for bad in [0.0, 1.5] {
            let cfg = AttackConfig {
                p_init: bad,
                ..AttackConfig::default()
            };
            assert!(matches!(
                square_attack(&p, &mid_image(), 0, &cfg, &RngStream::new(1)),
                Err(Error::InvalidAttackConfig(_))
            ));
        }
    }

    #[test]
    fn square_schedule_halves_at_scaled_breakpoints() {
        // Budget 1000 scales the first break from 10 to 1.
        let s0 = square_side(0, 1000, 0.8, 16, 16);
        let s1 = square_side(1, 1000, 0.8, 16, 16);
        assert!(s1 <= s0);
        // Deep into the schedule the side collapses to 1.
        assert_eq!(square_side(999, 1000, 0.05, 16, 16), 1);
    }

    #[test]
    fn attack_kind_parsing() {
        assert_eq!("pgd".parse::<AttackKind>().unwrap(), AttackKind::Pgd);
        assert_eq!("pgd-t".parse::<AttackKind>().unwrap(), AttackKind::PgdTargeted);
        assert_eq!("square".parse::<AttackKind>().unwrap(), AttackKind::Square);
        assert_eq!("fgsm".parse::<AttackKind>().unwrap(), AttackKind::Fgsm);
        assert!("apgd".parse::<AttackKind>().is_err());
    }

    fn trained_fixture() -> (crate::ensemble::RandomEnsemble, crate::harness::Dataset) {
        use crate::harness::{gen_synthetic_split, Split, SyntheticSpec};
        let spec = SyntheticSpec {
            num_classes: 3,
            height: 4,
            width: 4,
            channels: 1,
            per_class: 60,
            signal: 0.1,
            noise: 0.05,
            seed: 91,
        };
        let train = gen_synthetic_split(&spec, Split::Train).unwrap();
        let test = gen_synthetic_split(
            &SyntheticSpec {
                per_class: 15,
                ..spec
            },
            Split::Test,
        )
        .unwrap();
        let cfg = crate::model::TrainConfig {
            epochs: 3,
            batch_size: 16,
            learning_rate: 0.005,
            momentum: 0.9,
            rng_seed: 92,
            hidden_dims: vec![16],
        };
        let ensemble =
            crate::ensemble::build_ensemble(&train, 4, 3, &[1, 2, 3, 4], 2, &cfg).unwrap();
        (ensemble, test)
    }

    #[test]
    fn transfer_with_zero_epsilon_equals_clean_accuracy() {
        use crate::pipeline::SimpleEnsemblePipeline;
        let (ensemble, test) = trained_fixture();
        let p = SimpleEnsemblePipeline::new(&ensemble);
        let cfg = AttackConfig {
            epsilon: 0.0,
            rng_seed: 7,
            ..AttackConfig::default()
        };
        let robust = transfer_eval(&p, &p, &test, AttackKind::Pgd, &cfg).unwrap();
        let clean = crate::harness::evaluate_clean(&p, &test, 0).unwrap();
        assert_eq!(robust, clean);
    }

    #[test]
    fn worst_case_single_attack_equals_its_column() {
        use crate::pipeline::SimpleEnsemblePipeline;
        let (ensemble, test) = trained_fixture();
        let p = SimpleEnsemblePipeline::new(&ensemble);
        let small = test.take(20);
        let cfg = AttackConfig {
            query_budget: 150,
            rng_seed: 5,
            ..AttackConfig::default()
        };
        let one = worst_case_eval(&p, &small, &[AttackKind::Square], &cfg).unwrap();
        assert_eq!(one.combined, one.per_attack[0].1);
        assert_eq!(one.combined, one.combined_from_bitmaps());

        let two = worst_case_eval(&p, &small, &[AttackKind::Pgd, AttackKind::Square], &cfg)
            .unwrap();
        let min_col = two
            .per_attack
            .iter()
            .map(|(_, r)| *r)
            .fold(f64::INFINITY, f64::min);
        assert!(two.combined <= min_col + 1e-9);
        assert_eq!(two.combined, two.combined_from_bitmaps());
    }

    #[test]
    fn worst_case_rejects_empty_attack_list_and_oracle_only_gradients() {
        use crate::pipeline::{OracleOnly, SimpleEnsemblePipeline};
        let (ensemble, test) = trained_fixture();
        let p = SimpleEnsemblePipeline::new(&ensemble);
        let small = test.take(4);
        let cfg = AttackConfig {
            query_budget: 50,
            ..AttackConfig::default()
        };
        assert!(matches!(
            worst_case_eval(&p, &small, &[], &cfg),
            Err(Error::InvalidAttackConfig(_))
        ));
        let blackbox = OracleOnly::new(&p);
        assert!(matches!(
            worst_case_eval(&blackbox, &small, &[AttackKind::Pgd], &cfg),
            Err(Error::GradientUnavailable(_))
        ));
        // A square-only list runs fine against a query-only target.
        assert!(worst_case_eval(&blackbox, &small, &[AttackKind::Square], &cfg).is_ok());
    }

    #[test]
    fn randomized_oracle_blunts_square_relative_to_simple() {
        use crate::harness::{gen_synthetic_split, Split, SyntheticSpec};
        use crate::pipeline::{GradientMode, RandomEnsemblePipeline, SimpleEnsemblePipeline};

        // Lightly trained members with margins near the attack frontier:
        // greedy query search succeeds against the deterministic mean but its
        // accept/reject feedback is corrupted by random subset draws.
        let spec = SyntheticSpec {
            num_classes: 3,
            height: 8,
            width: 8,
            channels: 1,
            per_class: 150,
            signal: 0.05,
            noise: 0.04,
            seed: 95,
        };
        let train = gen_synthetic_split(&spec, Split::Train).unwrap();
        let test = gen_synthetic_split(
            &SyntheticSpec {
                per_class: 20,
                ..spec
            },
            Split::Test,
        )
        .unwrap();
        let cfg_train = crate::model::TrainConfig {
            epochs: 4,
            batch_size: 32,
            learning_rate: 0.003,
            momentum: 0.9,
            rng_seed: 96,
            hidden_dims: vec![16],
        };
        let ensemble =
            crate::ensemble::build_ensemble(&train, 4, 3, &[1, 2, 3, 4], 2, &cfg_train).unwrap();

        let simple = SimpleEnsemblePipeline::new(&ensemble);
        let random = RandomEnsemblePipeline::new(&ensemble, GradientMode::Stochastic);
        let small = test.take(30);
        let cfg = AttackConfig {
            query_budget: 300,
            rng_seed: 17,
            ..AttackConfig::default()
        };
        let s = worst_case_eval(&simple, &small, &[AttackKind::Square], &cfg).unwrap();
        let r = worst_case_eval(&random, &small, &[AttackKind::Square], &cfg).unwrap();
        assert!(
            r.combined > s.combined,
            "random {:.1}% vs simple {:.1}%",
            r.combined,
            s.combined
        );
    }
}
