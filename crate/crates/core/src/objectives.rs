//! Group-relative advantages and the four surrogate objectives.
//!
//! Advantages normalize shaped rewards within each rollout group and broadcast
//! one scalar to every token of the rollout. The surrogates consume per-token
//! importance ratios built in log space: GRPO/DAPO clip per token, GSPO clips
//! a length-normalized sequence ratio, GMPO clips token ratios inside a
//! geometric mean. All four return a loss to minimize.

use crate::contrastive::ShapedRewardSet;
use crate::error::{CoreError, Result};
use crate::policy::RolloutGroup;
use crate::tape::{Tape, Var};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Grpo,
    Gspo,
    Dapo,
    Gmpo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggMode {
    TokenMean,
    SeqMeanTokenMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub method: Method,
    pub eps_low: f64,
    pub eps_high: f64,
    pub kl_coef: f64,
    pub agg_mode: AggMode,
    pub dynamic_sampling: bool,
    pub std_guard: f64,
    /// PPO-style pessimism `min(rho*A, clip(rho)*A)` for token/sequence
    /// clipping; GMPO ignores this (its clip lives inside the geometric mean).
    pub pessimistic: bool,
}

impl SurrogateConfig {
    /// Published per-method defaults.
    pub fn for_method(method: Method) -> Self {
        match method {
            Method::Grpo => SurrogateConfig {
                method,
                eps_low: 0.2,
                eps_high: 0.2,
                kl_coef: 0.001,
                agg_mode: AggMode::TokenMean,
                dynamic_sampling: false,
                std_guard: 1e-6,
                pessimistic: true,
            },
            Method::Gspo => SurrogateConfig {
                method,
                eps_low: 3e-4,
                eps_high: 4e-4,
                kl_coef: 0.0,
                agg_mode: AggMode::SeqMeanTokenMean,
                dynamic_sampling: false,
                std_guard: 1e-6,
                pessimistic: true,
            },
            Method::Dapo => SurrogateConfig {
                method,
                eps_low: 0.2,
                eps_high: 0.28,
                kl_coef: 0.0,
                agg_mode: AggMode::TokenMean,
                dynamic_sampling: true,
                std_guard: 1e-6,
                pessimistic: true,
            },
            Method::Gmpo => SurrogateConfig {
                method,
                eps_low: 0.4,
                eps_high: 0.4,
                kl_coef: 0.0,
                agg_mode: AggMode::TokenMean,
                dynamic_sampling: false,
                std_guard: 1e-6,
                pessimistic: true,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.eps_low < 0.0 || self.eps_high < 0.0 {
            problems.push(format!(
                "clip ranges must be non-negative, got {}/{}",
                self.eps_low, self.eps_high
            ));
        }
        if self.kl_coef < 0.0 {
            problems.push(format!("kl_coef must be non-negative, got {}", self.kl_coef));
        }
        if self.std_guard <= 0.0 {
            problems.push(format!("std_guard must be positive, got {}", self.std_guard));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Config(problems))
        }
    }
}

/// Per-rollout normalized advantages; every token of rollout `i` carries the
/// identical scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageSet {
    pub values: Vec<f64>,
}

impl AdvantageSet {
    pub fn broadcast(&self, rollout: usize, len: usize) -> Vec<f64> {
        vec![self.values[rollout]; len]
    }
}

/// `(r'_i - mean) / popstd`, all-zero when the population std is below the
/// guard. Dividing by the std itself (rather than std + guard) keeps the
/// normalized std at exactly 1 for every non-degenerate group.
pub fn group_advantages(shaped: &ShapedRewardSet, std_guard: f64) -> AdvantageSet {
    let n = shaped.total.len();
    assert!(n >= 2, "advantage estimation needs a group of at least 2");
    let mean = shaped.total.iter().sum::<f64>() / n as f64;
    let var = shaped.total.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std <= std_guard {
        return AdvantageSet { values: vec![0.0; n] };
    }
    AdvantageSet { values: shaped.total.iter().map(|r| (r - mean) / std).collect() }
}

/// One rollout's contribution to a surrogate batch.
pub struct SequenceItem {
    /// Differentiable log pi_new per response token.
    pub logp_new: Var,
    /// Stored sampling-time log pi_old.
    pub logp_old: Vec<f64>,
    /// log pi_ref for the KL penalty, when tracked.
    pub logp_ref: Option<Vec<f64>>,
    pub advantage: f64,
}

pub struct SequenceBatch {
    pub items: Vec<SequenceItem>,
}

/// `rho_t = exp(log pi_new - log pi_old)`, differentiable through the new
/// log-probabilities only.
pub fn token_ratios(tape: &mut Tape, logp_new: Var, logp_old: &[f64]) -> Result<Var> {
    if tape.value(logp_new).len() != logp_old.len() {
        return Err(CoreError::Contract {
            op: "token_ratios",
            detail: format!(
                "token grids misaligned: new {} vs old {}",
                tape.value(logp_new).len(),
                logp_old.len()
            ),
        });
    }
    let old = tape.constant(logp_old.to_vec());
    let delta = tape.sub(logp_new, old)?;
    Ok(tape.exp(delta))
}

/// Per-token estimator `exp(ref - new) - (ref - new) - 1`; non-negative and
/// zero iff new == ref.
pub fn kl_estimate(tape: &mut Tape, logp_new: Var, logp_ref: &[f64]) -> Result<Var> {
    if tape.value(logp_new).len() != logp_ref.len() {
        return Err(CoreError::Contract {
            op: "kl_estimate",
            detail: format!(
                "token grids misaligned: new {} vs ref {}",
                tape.value(logp_new).len(),
                logp_ref.len()
            ),
        });
    }
    let r = tape.constant(logp_ref.to_vec());
    let d = tape.sub(r, logp_new)?;
    let e = tape.exp(d);
    let lin = tape.sub(e, d)?;
    Ok(tape.add_const(lin, -1.0))
}

/// Plain-value variant for metrics.
pub fn kl_estimate_value(logp_new: &[f64], logp_ref: &[f64]) -> Vec<f64> {
    logp_new
        .iter()
        .zip(logp_ref)
        .map(|(n, r)| {
            let d = r - n;
            d.exp() - d - 1.0
        })
        .collect()
}

fn aggregate(tape: &mut Tape, per_token: &[Var], agg: AggMode) -> Var {
    match agg {
        AggMode::TokenMean => {
            let all = tape.concat_1d(per_token);
            tape.mean(all)
        }
        AggMode::SeqMeanTokenMean => {
            let seq_means: Vec<Var> = per_token.iter().map(|&v| tape.mean(v)).collect();
            let stacked = tape.concat_1d(&seq_means);
            tape.mean(stacked)
        }
    }
}

fn kl_term(tape: &mut Tape, batch: &SequenceBatch) -> Result<Option<Var>> {
    let mut per_token = Vec::new();
    for item in &batch.items {
        let reference = item.logp_ref.as_ref().ok_or_else(|| CoreError::Contract {
            op: "kl_term",
            detail: "kl_coef > 0 but reference logprobs missing".into(),
        })?;
        per_token.push(kl_estimate(tape, item.logp_new, reference)?);
    }
    if per_token.is_empty() {
        return Ok(None);
    }
    let all = tape.concat_1d(&per_token);
    Ok(Some(tape.mean(all)))
}

/// Token-level clipped surrogate shared by GRPO and DAPO.
fn clipped_token_loss(tape: &mut Tape, batch: &SequenceBatch, cfg: &SurrogateConfig) -> Result<Var> {
    let mut terms = Vec::with_capacity(batch.items.len());
    for item in &batch.items {
        let rho = token_ratios(tape, item.logp_new, &item.logp_old)?;
        let clipped = tape.clamp(rho, 1.0 - cfg.eps_low, 1.0 + cfg.eps_high);
        let clipped_adv = tape.scale(clipped, item.advantage);
        let term = if cfg.pessimistic {
            let unclipped_adv = tape.scale(rho, item.advantage);
            tape.min_elem(unclipped_adv, clipped_adv)?
        } else {
            clipped_adv
        };
        terms.push(term);
    }
    let objective = aggregate(tape, &terms, cfg.agg_mode);
    let mut loss = tape.scale(objective, -1.0);
    if cfg.kl_coef > 0.0 {
        if let Some(kl) = kl_term(tape, batch)? {
            let scaled = tape.scale(kl, cfg.kl_coef);
            loss = tape.add(loss, scaled)?;
        }
    }
    Ok(loss)
}

/// PPO-style per-token clipped objective with KL regularization.
pub fn grpo_surrogate(tape: &mut Tape, batch: &SequenceBatch, cfg: &SurrogateConfig) -> Result<Var> {
    clipped_token_loss(tape, batch, cfg)
}

/// GRPO's clipped term with asymmetric bounds and no KL.
pub fn dapo_surrogate(tape: &mut Tape, batch: &SequenceBatch, cfg: &SurrogateConfig) -> Result<Var> {
    clipped_token_loss(tape, batch, cfg)
}

/// Sequence-level ratio `s_i = exp(mean_t(log pi_new - log pi_old))` with a
/// narrow clip; the per-sequence term is constant across the sequence's
/// tokens, so seq-mean-token-mean reduces to a mean over sequences.
pub fn gspo_surrogate(tape: &mut Tape, batch: &SequenceBatch, cfg: &SurrogateConfig) -> Result<Var> {
    let mut terms = Vec::with_capacity(batch.items.len());
    let mut lengths = Vec::with_capacity(batch.items.len());
    for item in &batch.items {
        let old = tape.constant(item.logp_old.clone());
        let delta = tape.sub(item.logp_new, old)?;
        let mean_delta = tape.mean(delta);
        let seq_ratio = tape.exp(mean_delta);
        let clipped = tape.clamp(seq_ratio, 1.0 - cfg.eps_low, 1.0 + cfg.eps_high);
        let clipped_adv = tape.scale(clipped, item.advantage);
        let term = if cfg.pessimistic {
            let unclipped_adv = tape.scale(seq_ratio, item.advantage);
            tape.min_elem(unclipped_adv, clipped_adv)?
        } else {
            clipped_adv
        };
        terms.push(term);
        lengths.push(tape.value(item.logp_new).len());
    }
    let objective = match cfg.agg_mode {
        AggMode::SeqMeanTokenMean => {
            let stacked = tape.concat_1d(&terms);
            tape.mean(stacked)
        }
        AggMode::TokenMean => weighted_by_length(tape, &terms, &lengths)?,
    };
    let mut loss = tape.scale(objective, -1.0);
    if cfg.kl_coef > 0.0 {
        if let Some(kl) = kl_term(tape, batch)? {
            let scaled = tape.scale(kl, cfg.kl_coef);
            loss = tape.add(loss, scaled)?;
        }
    }
    Ok(loss)
}

/// Geometric mean of clipped token ratios, computed in log space, weighted by
/// the advantage. Clipping happens inside the mean so the objective stays
/// finite and sign-stable.
pub fn gmpo_surrogate(tape: &mut Tape, batch: &SequenceBatch, cfg: &SurrogateConfig) -> Result<Var> {
    let mut terms = Vec::with_capacity(batch.items.len());
    let mut lengths = Vec::with_capacity(batch.items.len());
    for item in &batch.items {
        let rho = token_ratios(tape, item.logp_new, &item.logp_old)?;
        let clipped = tape.clamp(rho, 1.0 - cfg.eps_low, 1.0 + cfg.eps_high);
        let logs = tape.ln(clipped);
        let mean_log = tape.mean(logs);
        let geo = tape.exp(mean_log);
        terms.push(tape.scale(geo, item.advantage));
        lengths.push(tape.value(item.logp_new).len());
    }
    let objective = match cfg.agg_mode {
        AggMode::TokenMean => weighted_by_length(tape, &terms, &lengths)?,
        AggMode::SeqMeanTokenMean => {
            let stacked = tape.concat_1d(&terms);
            tape.mean(stacked)
        }
    };
    let mut loss = tape.scale(objective, -1.0);
    if cfg.kl_coef > 0.0 {
        if let Some(kl) = kl_term(tape, batch)? {
            let scaled = tape.scale(kl, cfg.kl_coef);
            loss = tape.add(loss, scaled)?;
        }
    }
    Ok(loss)
}

/// Token-mean over per-sequence scalars: each sequence's term counts once per
/// token it contains.
fn weighted_by_length(tape: &mut Tape, terms: &[Var], lengths: &[usize]) -> Result<Var> {
    let total: usize = lengths.iter().sum();
    let weighted: Vec<Var> = terms
        .iter()
        .zip(lengths)
        .map(|(&t, &len)| tape.scale(t, len as f64 / total as f64))
        .collect();
    let stacked = tape.concat_1d(&weighted);
    Ok(tape.sum(stacked))
}

/// Dispatches on the configured method.
pub fn surrogate_loss(tape: &mut Tape, batch: &SequenceBatch, cfg: &SurrogateConfig) -> Result<Var> {
    match cfg.method {
        Method::Grpo => grpo_surrogate(tape, batch, cfg),
        Method::Dapo => dapo_surrogate(tape, batch, cfg),
        Method::Gspo => gspo_surrogate(tape, batch, cfg),
        Method::Gmpo => gmpo_surrogate(tape, batch, cfg),
    }
}

/// Drops groups whose VERIFIABLE rewards are all equal (zero advantage
/// variance before shaping). Returns retained indices plus the dropped count.
pub fn dynamic_sampling_filter(groups: &[RolloutGroup]) -> (Vec<usize>, usize) {
    let mut retained = Vec::with_capacity(groups.len());
    let mut dropped = 0;
    for (i, g) in groups.iter().enumerate() {
        let first = g.rollouts[0].reward;
        if g.rollouts.iter().all(|r| r.reward == first) {
            dropped += 1;
        } else {
            retained.push(i);
        }
    }
    (retained, dropped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn shaped(total: Vec<f64>) -> ShapedRewardSet {
        let n = total.len();
        ShapedRewardSet {
            base: total.clone(),
            contrastive: vec![0.0; n],
            total,
            group_valid: false,
            clipped_mask: vec![false; n],
        }
    }

    fn batch_from(
        tape: &mut Tape,
        rows: &[(Vec<f64>, Vec<f64>, f64)], // (logp_new, logp_old, advantage)
        grad: bool,
    ) -> SequenceBatch {
        let items = rows
            .iter()
            .map(|(new, old, adv)| SequenceItem {
                logp_new: tape.leaf(vec![new.len()], new.clone(), grad),
                logp_old: old.clone(),
                logp_ref: None,
                advantage: *adv,
            })
            .collect();
        SequenceBatch { items }
    }

    #[test]
    fn advantages_symmetric_case() {
        let a = group_advantages(&shaped(vec![1.0, 1.0, 0.0, 0.0]), 1e-6);
        assert_eq!(a.values, vec![1.0, 1.0, -1.0, -1.0]);
    }

    #[test]
    fn advantages_all_equal_are_zero() {
        let a = group_advantages(&shaped(vec![1.0, 1.0, 1.0, 1.0]), 1e-6);
        assert_eq!(a.values, vec![0.0; 4]);
    }

    #[test]
    fn advantages_shaped_case_vs_direct_oracle() {
        let r = vec![1.0 - 0.1535, 0.8465, 0.0, 0.0];
        let a = group_advantages(&shaped(r.clone()), 1e-6);
        let mean = r.iter().sum::<f64>() / 4.0;
        let std = (r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0).sqrt();
        for i in 0..4 {
            assert!((a.values[i] - (r[i] - mean) / std).abs() < 1e-12);
        }
    }

    #[test]
    fn advantages_normalization_contract() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        for _ in 0..200 {
            let n = rng.gen_range(2..20);
            let r: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0_f64).round()).collect();
            let a = group_advantages(&shaped(r.clone()), 1e-6);
            let distinct = r.iter().any(|&x| (x - r[0]).abs() > 0.0);
            let mean = a.values.iter().sum::<f64>() / n as f64;
            assert!(mean.abs() < 1e-9);
            if distinct {
                let std =
                    (a.values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64)
                        .sqrt();
                assert!((std - 1.0).abs() < 1e-6);
            } else {
                assert!(a.values.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn advantages_shift_invariant() {
        let r = vec![0.3, 1.0, -0.4, 0.9];
        let a = group_advantages(&shaped(r.clone()), 1e-6);
        let b = group_advantages(&shaped(r.iter().map(|x| x + 17.5).collect()), 1e-6);
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn advantages_broadcast_is_constant_per_rollout() {
        let a = group_advantages(&shaped(vec![1.0, 0.0]), 1e-6);
        let toks = a.broadcast(0, 5);
        assert!(toks.iter().all(|&t| t == a.values[0]));
        assert_eq!(toks.len(), 5);
    }

    #[test]
    fn ratios_identity_on_policy() {
        let mut t = Tape::new();
        let lp = vec![-0.5, -1.0, -0.1];
        let new = t.leaf(vec![3], lp.clone(), false);
        let rho = token_ratios(&mut t, new, &lp).unwrap();
        for &r in t.value(rho) {
            assert!((r - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn ratio_of_ln2_shift_is_two() {
        let mut t = Tape::new();
        let new = t.leaf(vec![1], vec![-0.5 + (2.0f64).ln()], false);
        let rho = token_ratios(&mut t, new, &[-0.5]).unwrap();
        assert!((t.value(rho)[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ratios_random_vs_exp_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let old: Vec<f64> = (0..16).map(|_| -rng.gen_range(0.01..3.0)).collect();
        let new: Vec<f64> = old.iter().map(|o| o + rng.gen_range(-0.5..0.5)).collect();
        let mut t = Tape::new();
        let lp = t.leaf(vec![16], new.clone(), false);
        let rho = token_ratios(&mut t, lp, &old).unwrap();
        for i in 0..16 {
            assert!((t.value(rho)[i] - (new[i] - old[i]).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn ratios_misaligned_grids_error() {
        let mut t = Tape::new();
        let new = t.leaf(vec![2], vec![-0.5, -0.5], false);
        assert!(token_ratios(&mut t, new, &[-0.5]).is_err());
    }

    #[test]
    fn grpo_on_policy_equals_negative_mean_advantage() {
        let mut t = Tape::new();
        let rows = vec![
            (vec![-0.5, -0.2], vec![-0.5, -0.2], 1.0),
            (vec![-1.0], vec![-1.0], -1.0),
        ];
        let batch = batch_from(&mut t, &rows, false);
        let mut cfg = SurrogateConfig::for_method(Method::Grpo);
        cfg.kl_coef = 0.0;
        let loss = grpo_surrogate(&mut t, &batch, &cfg).unwrap();
        // token-mean of advantages: (1 + 1 - 1)/3
        assert!((t.scalar_value(loss) + 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn grpo_clip_caps_positive_direction() {
        let mut t = Tape::new();
        // rho = 10 at a single token, A = 1 -> capped at 1 + eps
        let rows = vec![(vec![-0.1], vec![-0.1 - (10.0f64).ln()], 1.0)];
        let batch = batch_from(&mut t, &rows, false);
        let mut cfg = SurrogateConfig::for_method(Method::Grpo);
        cfg.kl_coef = 0.0;
        let loss = grpo_surrogate(&mut t, &batch, &cfg).unwrap();
        assert!((t.scalar_value(loss) + 1.2).abs() < 1e-12);
    }

    #[test]
    fn grpo_random_batch_vs_naive_loop_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        for _ in 0..50 {
            let n_seq = rng.gen_range(1..5);
            let rows: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..n_seq)
                .map(|_| {
                    let len = rng.gen_range(1..6);
                    let old: Vec<f64> = (0..len).map(|_| -rng.gen_range(0.05..2.0)).collect();
                    let new: Vec<f64> =
                        old.iter().map(|o| o + rng.gen_range(-0.6..0.6)).collect();
                    (new, old, rng.gen_range(-2.0..2.0))
                })
                .collect();
            let mut t = Tape::new();
            let batch = batch_from(&mut t, &rows, false);
            let mut cfg = SurrogateConfig::for_method(Method::Grpo);
            cfg.kl_coef = 0.0;
            let loss = grpo_surrogate(&mut t, &batch, &cfg).unwrap();

            let mut acc = 0.0;
            let mut count = 0usize;
            for (new, old, adv) in &rows {
                for (n, o) in new.iter().zip(old) {
                    let rho = (n - o).exp();
                    let clipped = rho.clamp(0.8, 1.2);
                    acc += (rho * adv).min(clipped * adv);
                    count += 1;
                }
            }
            let expect = -acc / count as f64;
            assert!((t.scalar_value(loss) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn dapo_matches_grpo_when_parameters_coincide() {
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        for _ in 0..20 {
            let rows: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..3)
                .map(|_| {
                    let len = rng.gen_range(1..5);
                    let old: Vec<f64> = (0..len).map(|_| -rng.gen_range(0.05..2.0)).collect();
                    let new: Vec<f64> =
                        old.iter().map(|o| o + rng.gen_range(-0.5..0.5)).collect();
                    (new, old, rng.gen_range(-2.0..2.0))
                })
                .collect();
            let mut t = Tape::new();
            let batch = batch_from(&mut t, &rows, false);
            let mut dapo = SurrogateConfig::for_method(Method::Dapo);
            dapo.eps_high = 0.2;
            let mut grpo = SurrogateConfig::for_method(Method::Grpo);
            grpo.kl_coef = 0.0;
            let a = dapo_surrogate(&mut t, &batch, &dapo).unwrap();
            let b = grpo_surrogate(&mut t, &batch, &grpo).unwrap();
            assert_eq!(t.scalar_value(a), t.scalar_value(b));
        }
    }

    #[test]
    fn dapo_asymmetric_bounds() {
        let cfg = SurrogateConfig::for_method(Method::Dapo);
        // rho = 1.25 with A > 0 stays unclipped (below 1.28)
        let mut t = Tape::new();
        let rows = vec![(vec![(1.25f64).ln() - 0.5], vec![-0.5], 1.0)];
        let batch = batch_from(&mut t, &rows, false);
        let loss = dapo_surrogate(&mut t, &batch, &cfg).unwrap();
        assert!((t.scalar_value(loss) + 1.25).abs() < 1e-12);
        // rho = 1.5 clips at 1.28
        let mut t = Tape::new();
        let rows = vec![(vec![(1.5f64).ln() - 0.5], vec![-0.5], 1.0)];
        let batch = batch_from(&mut t, &rows, false);
        let loss = dapo_surrogate(&mut t, &batch, &cfg).unwrap();
        assert!((t.scalar_value(loss) + 1.28).abs() < 1e-12);
    }

    #[test]
    fn gspo_on_policy_loss_is_negative_mean_advantage() {
        let mut t = Tape::new();
        let rows = vec![
            (vec![-0.5, -0.2, -0.9], vec![-0.5, -0.2, -0.9], 1.5),
            (vec![-1.0], vec![-1.0], -0.5),
        ];
        let batch = batch_from(&mut t, &rows, false);
        let cfg = SurrogateConfig::for_method(Method::Gspo);
        let loss = gspo_surrogate(&mut t, &batch, &cfg).unwrap();
        assert!((t.scalar_value(loss) + (1.5 - 0.5) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn gspo_length_normalized_ratio_clips() {
        // one token of a length-10 sequence shifted by ln 2:
        // s = 2^(1/10) ~ 1.0718, clipped to 1.0004 for A > 0
        let mut t = Tape::new();
        let old = vec![-0.5; 10];
        let mut new = old.clone();
        new[3] += (2.0f64).ln();
        let rows = vec![(new, old, 1.0)];
        let batch = batch_from(&mut t, &rows, false);
        let cfg = SurrogateConfig::for_method(Method::Gspo);
        let loss = gspo_surrogate(&mut t, &batch, &cfg).unwrap();
        let s = (2.0f64).powf(0.1);
        assert!((s - 1.0717734625362931).abs() < 1e-12);
        assert!((t.scalar_value(loss) + 1.0004).abs() < 1e-12);
    }

    #[test]
    fn gspo_sequence_ratio_equals_token_ratio_on_length_one() {
        let mut t = Tape::new();
        let delta = 0.37;
        let rows = vec![(vec![-0.5 + delta], vec![-0.5], 1.0)];
        let batch = batch_from(&mut t, &rows, false);
        let mut cfg = SurrogateConfig::for_method(Method::Gspo);
        cfg.eps_low = 10.0; // disable the clip to observe the raw ratio
        cfg.eps_high = 10.0;
        let loss = gspo_surrogate(&mut t, &batch, &cfg).unwrap();
        assert!((t.scalar_value(loss) + delta.exp()).abs() < 1e-12);
    }

    #[test]
    fn gmpo_length_one_equals_plain_clipped_grpo() {
        let mut rng = ChaCha12Rng::seed_from_u64(55);
        for _ in 0..100 {
            let rows: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..4)
                .map(|_| {
                    let old = vec![-rng.gen_range(0.05..2.0)];
                    let new = vec![old[0] + rng.gen_range(-0.9..0.9)];
                    (new, old, rng.gen_range(-2.0..2.0))
                })
                .collect();
            let mut t = Tape::new();
            let batch = batch_from(&mut t, &rows, false);
            let gmpo = SurrogateConfig::for_method(Method::Gmpo);
            let mut grpo = SurrogateConfig::for_method(Method::Grpo);
            grpo.eps_low = 0.4;
            grpo.eps_high = 0.4;
            grpo.kl_coef = 0.0;
            grpo.pessimistic = false;
            let a = gmpo_surrogate(&mut t, &batch, &gmpo).unwrap();
            let b = grpo_surrogate(&mut t, &batch, &grpo).unwrap();
            assert!((t.scalar_value(a) - t.scalar_value(b)).abs() < 1e-12);
        }
    }

    #[test]
    fn gmpo_all_ratios_one_gives_mean_advantage() {
        let mut t = Tape::new();
        let rows = vec![
            (vec![-0.5, -0.2], vec![-0.5, -0.2], 2.0),
            (vec![-1.0, -0.3], vec![-1.0, -0.3], -1.0),
        ];
        let batch = batch_from(&mut t, &rows, false);
        let cfg = SurrogateConfig::for_method(Method::Gmpo);
        let loss = gmpo_surrogate(&mut t, &batch, &cfg).unwrap();
        assert!((t.scalar_value(loss) + (2.0 - 1.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn gmpo_geometric_mean_of_reciprocal_ratios_is_one() {
        // rho = (2, 0.5) in the unclipped region: g = sqrt(2 * 0.5) = 1
        let mut t = Tape::new();
        let old = vec![-0.5, -0.5];
        let new = vec![-0.5 + (2.0f64).ln(), -0.5 + (0.5f64).ln()];
        let rows = vec![(new, old, 1.0)];
        let batch = batch_from(&mut t, &rows, false);
        let mut cfg = SurrogateConfig::for_method(Method::Gmpo);
        cfg.eps_low = 1.5; // wide clip so neither token binds
        cfg.eps_high = 1.5;
        let loss = gmpo_surrogate(&mut t, &batch, &cfg).unwrap();
        assert!((t.scalar_value(loss) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_zero_on_policy() {
        let mut t = Tape::new();
        let lp = vec![-0.4, -1.2];
        let new = t.leaf(vec![2], lp.clone(), false);
        let kl = kl_estimate(&mut t, new, &lp).unwrap();
        for &v in t.value(kl) {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn kl_ln2_closed_form() {
        let mut t = Tape::new();
        let new = t.leaf(vec![1], vec![-0.5 - (2.0f64).ln()], false);
        let kl = kl_estimate(&mut t, new, &[-0.5]).unwrap();
        let expect = 2.0 - (2.0f64).ln() - 1.0;
        assert!((t.value(kl)[0] - expect).abs() < 1e-12);
        assert!((expect - 0.30685).abs() < 1e-5);
    }

    #[test]
    fn kl_non_negative_fuzz() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        for _ in 0..1_000_000 {
            let n = -rng.gen_range(0.001..8.0);
            let r = -rng.gen_range(0.001..8.0);
            let v = kl_estimate_value(&[n], &[r])[0];
            assert!(v >= 0.0, "kl estimator went negative: {v}");
        }
    }

    #[test]
    fn surrogate_gradients_match_finite_differences() {
        use crate::gradcheck::{finite_diff_grad, max_rel_error};
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        for method in [Method::Grpo, Method::Gspo, Method::Dapo, Method::Gmpo] {
            for _ in 0..10 {
                let len = 3;
                let old: Vec<f64> = (0..len).map(|_| -rng.gen_range(0.05..2.0)).collect();
                let new: Vec<f64> = old.iter().map(|o| o + rng.gen_range(-0.4..0.4)).collect();
                let ref_lp: Vec<f64> =
                    old.iter().map(|o| o + rng.gen_range(-0.2..0.2)).collect();
                let adv = rng.gen_range(-1.5..1.5);
                let cfg = SurrogateConfig::for_method(method);

                let eval = |x: &[f64]| -> f64 {
                    let mut t = Tape::new();
                    let item = SequenceItem {
                        logp_new: t.leaf(vec![len], x.to_vec(), false),
                        logp_old: old.clone(),
                        logp_ref: Some(ref_lp.clone()),
                        advantage: adv,
                    };
                    let loss =
                        surrogate_loss(&mut t, &SequenceBatch { items: vec![item] }, &cfg)
                            .unwrap();
                    t.scalar_value(loss)
                };

                let mut t = Tape::new();
                let leaf = t.leaf(vec![len], new.clone(), true);
                let item = SequenceItem {
                    logp_new: leaf,
                    logp_old: old.clone(),
                    logp_ref: Some(ref_lp.clone()),
                    advantage: adv,
                };
                let loss =
                    surrogate_loss(&mut t, &SequenceBatch { items: vec![item] }, &cfg).unwrap();
                t.backward(loss).unwrap();
                let analytic = t.grad(leaf).unwrap().to_vec();
                let numeric = finite_diff_grad(eval, &new, 1e-6);
                let coords: Vec<usize> = (0..len).collect();
                let err = max_rel_error(&analytic, &numeric, &coords);
                assert!(err < 1e-5, "{method:?}: rel err {err}");
            }
        }
    }

    #[test]
    fn dynamic_filter_counts() {
        use crate::policy::{RolloutRecord, RolloutGroup};
        use crate::tasks::{self, TaskSuiteConfig};
        use crate::tensor::Tensor;
        let inst = tasks::generate(&TaskSuiteConfig::default().base_family(), 1);
        let mk = |rewards: &[u8]| {
            let rollouts = rewards
                .iter()
                .map(|&r| RolloutRecord {
                    prompt_len: inst.prompt_tokens.len(),
                    tokens: inst.prompt_tokens.clone(),
                    response_len: 1,
                    response_logprobs: vec![-0.1],
                    hidden_states: Tensor::matrix(1, 2, vec![0.0, 1.0]),
                    reward: r,
                    truncated: false,
                })
                .collect();
            RolloutGroup::new(inst.clone(), rollouts)
        };
        let mut groups = Vec::new();
        for i in 0..10 {
            groups.push(match i {
                0 | 4 => mk(&[1, 1, 1]),
                7 => mk(&[0, 0, 0]),
                _ => mk(&[1, 0, 1]),
            });
        }
        let (retained, dropped) = dynamic_sampling_filter(&groups);
        assert_eq!(dropped, 3);
        assert_eq!(retained.len(), 7);
        assert!(!retained.contains(&0) && !retained.contains(&4) && !retained.contains(&7));
    }

    #[test]
    fn method_defaults_table() {
        let g = SurrogateConfig::for_method(Method::Grpo);
        assert_eq!((g.eps_low, g.eps_high, g.kl_coef), (0.2, 0.2, 0.001));
        assert_eq!(g.agg_mode, AggMode::TokenMean);
        let s = SurrogateConfig::for_method(Method::Gspo);
        assert_eq!((s.eps_low, s.eps_high, s.kl_coef), (3e-4, 4e-4, 0.0));
        assert_eq!(s.agg_mode, AggMode::SeqMeanTokenMean);
        let d = SurrogateConfig::for_method(Method::Dapo);
        assert_eq!((d.eps_low, d.eps_high, d.kl_coef), (0.2, 0.28, 0.0));
        assert!(d.dynamic_sampling);
        let m = SurrogateConfig::for_method(Method::Gmpo);
        assert_eq!((m.eps_low, m.eps_high, m.kl_coef), (0.4, 0.4, 0.0));
    }
}
