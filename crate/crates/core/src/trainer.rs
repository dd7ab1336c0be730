//! Training orchestration: sampling, verification, reward shaping, advantage
//! estimation, the policy and head updates, warmup, evaluation, and
//! checkpointing.
//!
//! One training step samples a batch of rollout groups under the current
//! policy, embeds every valid group through the contrastive head (detached
//! from the policy tape), shapes rewards, filters degenerate groups when the
//! method asks for it, recomputes log-probabilities under the current
//! parameters, and takes one AdamW step on the surrogate plus KL penalty,
//! then one AdamW step on the head against the mean anchor loss. During the
//! head warmup phase the policy is untouched and contrastive rewards are
//! withheld.

use crate::checkpoint::{self, CheckpointData, CheckpointKind};
use crate::contrastive::{
    contrastive_rewards, embed_group, group_gate, head_update, mean_pos_neg_cosine,
    mean_positive_pair_cosine, mi_lower_bound, ContrastiveConfig, ContrastiveHead,
    GroupEmbeddings, ShapedRewardSet,
};
use crate::error::{CoreError, Result};
use crate::metrics::MetricsRecord;
use crate::objectives::{
    dynamic_sampling_filter, group_advantages, kl_estimate_value, surrogate_loss, SequenceBatch,
    SequenceItem, SurrogateConfig,
};
use crate::optim::AdamWState;
use crate::policy::{
    self, logprobs_under, sample_group, sample_response, PolicyParams, RolloutGroup,
    SamplingConfig,
};
use crate::rng::{self, Domain};
use crate::tape::{Tape, Var};
use crate::tasks::{TaskInstance, TaskSuite, TaskSuiteConfig, Vocabulary};
use crate::tensor::Tensor;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub eval_every: usize,
    pub eval_samples_per_prompt: usize,
    pub eval_temperature: f64,
    pub eval_top_p: f64,
    /// Prompts per suite during in-run evaluation.
    pub eval_prompts: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            eval_every: 25,
            eval_samples_per_prompt: 16,
            eval_temperature: 0.6,
            eval_top_p: 0.95,
            eval_prompts: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub prompts_per_step: usize,
    pub total_steps: usize,
    pub head_warmup_steps: usize,
    pub policy_lr: f64,
    pub seed: u64,
    pub fixed_head: bool,
    pub contrastive_enabled: bool,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// 1 pins deterministic single-worker sampling; more workers fan rollout
    /// groups across threads (results are identical either way because every
    /// stream is derived from position, not scheduling).
    pub workers: usize,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            prompts_per_step: 8,
            total_steps: 300,
            head_warmup_steps: 25,
            policy_lr: 3e-4,
            seed: 0,
            fixed_head: false,
            contrastive_enabled: true,
            checkpoint_every: 0,
            workers: 1,
            pretrain_steps: 1500,
            pretrain_lr: 1e-3,
            pretrain_batch: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: SurrogateConfig,
    pub contrastive: ContrastiveConfig,
    pub sampling: SamplingConfig,
    pub tasks: TaskSuiteConfig,
    pub eval: EvalConfig,
    pub run: RunConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: SurrogateConfig::for_method(crate::objectives::Method::Grpo),
            contrastive: ContrastiveConfig::default(),
            sampling: SamplingConfig::default(),
            tasks: TaskSuiteConfig::default(),
            eval: EvalConfig::default(),
            run: RunConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Collects every config problem at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(CoreError::Config(p)) = self.method.validate() {
            problems.extend(p);
        }
        if let Err(CoreError::Config(p)) = self.contrastive.validate() {
            problems.extend(p);
        }
        if self.sampling.group_size < 2 {
            problems.push(format!(
                "sampling.group_size must be at least 2, got {}",
                self.sampling.group_size
            ));
        }
        if !(self.sampling.temperature > 0.0) {
            problems.push(format!(
                "sampling.temperature must be positive, got {}",
                self.sampling.temperature
            ));
        }
        if !(self.sampling.top_p > 0.0 && self.sampling.top_p <= 1.0) {
            problems.push(format!("sampling.top_p must lie in (0, 1], got {}", self.sampling.top_p));
        }
        if self.sampling.max_response_len == 0 {
            problems.push("sampling.max_response_len must be positive".into());
        }
        if !(self.eval.eval_temperature > 0.0) {
            problems.push(format!(
                "eval.eval_temperature must be positive, got {}",
                self.eval.eval_temperature
            ));
        }
        if !(self.eval.eval_top_p > 0.0 && self.eval.eval_top_p <= 1.0) {
            problems.push(format!("eval.eval_top_p must lie in (0, 1], got {}", self.eval.eval_top_p));
        }
        if self.eval.eval_samples_per_prompt == 0 {
            problems.push("eval.eval_samples_per_prompt must be positive".into());
        }
        if self.run.head_warmup_steps > self.run.total_steps {
            problems.push(format!(
                "run.head_warmup_steps ({}) must not exceed run.total_steps ({})",
                self.run.head_warmup_steps, self.run.total_steps
            ));
        }
        if self.run.prompts_per_step == 0 {
            problems.push("run.prompts_per_step must be positive".into());
        }
        if !(self.run.policy_lr > 0.0) {
            problems.push(format!("run.policy_lr must be positive, got {}", self.run.policy_lr));
        }
        if self.run.workers == 0 {
            problems.push("run.workers must be at least 1".into());
        }
        if self.tasks.modulus < 2 {
            problems.push(format!("tasks.modulus must be at least 2, got {}", self.tasks.modulus));
        }
        if self.tasks.n_operands == 0 {
            problems.push("tasks.n_operands must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Config(problems))
        }
    }

    /// Sequence-budget check against the policy's context window.
    pub fn validate_lengths(&self, dims: &crate::policy::Dims) -> Result<()> {
        let mut problems = Vec::new();
        for family in [
            self.tasks.base_family(),
            self.tasks.perturbed1_family(),
            self.tasks.perturbed2_family(),
        ] {
            let need = family.max_prompt_len() + self.sampling.max_response_len;
            if need > dims.max_seq {
                problems.push(format!(
                    "family {:?}: prompt+response budget {} exceeds max_seq {}",
                    family.label, need, dims.max_seq
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Config(problems))
        }
    }
}

/// Mutable training state. The reference policy is snapshotted when the state
/// is created and never changes afterwards.
pub struct RunState {
    pub policy: PolicyParams,
    pub reference: PolicyParams,
    pub head: ContrastiveHead,
    pub policy_opt: AdamWState,
    pub step: u64,
    pub seed: u64,
}

impl RunState {
    pub fn new(policy: PolicyParams, cfg: &TrainConfig) -> Self {
        let mut head = ContrastiveHead::init(cfg.contrastive.d, policy.dims.dim, cfg.run.seed);
        head.frozen = cfg.run.fixed_head;
        let policy_opt = AdamWState::new(cfg.run.policy_lr, 0.0, &policy.shapes());
        RunState {
            reference: policy.clone(),
            policy,
            head,
            policy_opt,
            step: 0,
            seed: cfg.run.seed,
        }
    }

    pub fn from_checkpoint(data: CheckpointData, cfg: &TrainConfig) -> Self {
        match data.kind {
            CheckpointKind::Policy => {
                let mut state = RunState::new(data.policy, cfg);
                state.seed = cfg.run.seed;
                state
            }
            CheckpointKind::Run => RunState {
                policy_opt: data.policy_opt.expect("run checkpoint carries optimizer"),
                head: data.head.expect("run checkpoint carries head"),
                reference: data.reference.expect("run checkpoint carries reference"),
                policy: data.policy,
                step: data.step,
                seed: data.seed,
            },
        }
    }

    pub fn to_checkpoint(&self) -> CheckpointData {
        CheckpointData {
            kind: CheckpointKind::Run,
            step: self.step,
            seed: self.seed,
            policy: self.policy.clone(),
            reference: Some(self.reference.clone()),
            head: Some(self.head.clone()),
            policy_opt: Some(self.policy_opt.clone()),
        }
    }
}

/// Per-step aggregates; evaluation fields are filled in by the run driver.
#[derive(Debug, Clone)]
pub struct StepStats {
    pub mean_base_reward: f64,
    pub mean_shaped_reward: f64,
    pub mean_contrastive_loss: Option<f64>,
    pub mi_lower_bound: Option<f64>,
    pub mean_pos_pair_cosine: Option<f64>,
    pub mean_pos_neg_cosine: Option<f64>,
    pub frac_valid_groups: f64,
    pub frac_clipped_rewards: f64,
    pub kl_to_ref: f64,
    pub dropped_groups: u64,
    pub policy_updated: bool,
}

fn mean(xs: impl Iterator<Item = f64>, count: usize) -> f64 {
    if count == 0 {
        return 0.0;
    }
    xs.sum::<f64>() / count as f64
}

/// Samples the step's rollout groups; group streams depend only on
/// `(seed, step, group index, member index)`, so worker count cannot change
/// results.
fn sample_step_groups(
    state: &RunState,
    cfg: &TrainConfig,
    batch: &[TaskInstance],
    step: u64,
) -> Result<Vec<RolloutGroup>> {
    let stream_of = |gi: usize| rng::mix(state.seed, &[Domain::Rollout as u64, step, gi as u64]);
    if cfg.run.workers > 1 {
        batch
            .par_iter()
            .enumerate()
            .map(|(gi, inst)| sample_group(&state.policy, inst, &cfg.sampling, stream_of(gi)))
            .collect()
    } else {
        batch
            .iter()
            .enumerate()
            .map(|(gi, inst)| sample_group(&state.policy, inst, &cfg.sampling, stream_of(gi)))
            .collect()
    }
}

/// One full training (or warmup) step over pre-sampled groups.
pub fn step_on_groups(
    state: &mut RunState,
    cfg: &TrainConfig,
    groups: &[RolloutGroup],
    step: u64,
) -> Result<StepStats> {
    let contrastive_on = cfg.run.contrastive_enabled;
    let warmup = contrastive_on && step <= cfg.run.head_warmup_steps as u64;
    let backprop = contrastive_on && cfg.contrastive.backprop_into_policy && !warmup;
    let dims = state.policy.dims;

    let mut shaped: Vec<ShapedRewardSet> =
        groups.iter().map(|g| ShapedRewardSet::pass_through(g.rewards())).collect();

    let mut anchor_values: Vec<f64> = Vec::new();
    let mut clipped_count = 0usize;
    let mut pos_pair_vals: Vec<f64> = Vec::new();
    let mut pos_neg_vals: Vec<f64> = Vec::new();

    let mut collect_embedding_metrics = |ge: &GroupEmbeddings, group: &RolloutGroup| {
        if let Some(c) = mean_positive_pair_cosine(ge, &group.positive_indices) {
            pos_pair_vals.push(c);
        }
        if let Some(c) = mean_pos_neg_cosine(ge, &group.positive_indices, group.size()) {
            pos_neg_vals.push(c);
        }
    };

    // Detached contrastive path: embeddings and anchor losses on a head tape,
    // hidden states taken from the sampling-time records.
    let mut head_tape = Tape::new();
    let mut head_w: Option<Var> = None;
    let mut head_losses: Vec<Var> = Vec::new();
    if contrastive_on && !backprop {
        let mut w_tensor = state.head.w.clone();
        w_tensor.requires_grad = !state.head.frozen;
        let w = head_tape.leaf_tensor(&w_tensor);
        head_w = Some(w);
        for (gi, group) in groups.iter().enumerate() {
            if !group_gate(group) {
                continue;
            }
            let hidden: Vec<Var> =
                group.rollouts.iter().map(|r| head_tape.leaf_tensor(&r.hidden_states)).collect();
            let (embs, sim) = embed_group(&mut head_tape, w, &hidden, cfg.contrastive.tau)?;
            let mut pick = rng::stream(state.seed, Domain::PositivePick, &[step, gi as u64]);
            let (sh, losses) =
                contrastive_rewards(&mut head_tape, sim, group, &cfg.contrastive, &mut pick)?;
            let ge = GroupEmbeddings::from_tape(&head_tape, &embs, sim);
            collect_embedding_metrics(&ge, group);
            anchor_values.extend(losses.iter().map(|&(_, v)| head_tape.scalar_value(v)));
            head_losses.extend(losses.iter().map(|&(_, v)| v));
            if !warmup {
                clipped_count += sh.clipped_mask.iter().filter(|&&c| c).count();
                shaped[gi] = sh;
            }
        }
    }

    // Policy phase.
    let mut kl_to_ref = 0.0;
    let mut dropped = 0u64;
    let mut policy_updated = false;
    if !warmup {
        let (retained, dropped_count) = if cfg.method.dynamic_sampling {
            dynamic_sampling_filter(groups)
        } else {
            ((0..groups.len()).collect(), 0)
        };
        dropped = dropped_count as u64;
        if !retained.is_empty() {
            let mut tape = Tape::new();
            let vars = state.policy.leaves(&mut tape, true);
            let mut ref_tape = Tape::new();
            let ref_vars = state.reference.leaves(&mut ref_tape, false);

            let bp_w = if backprop {
                let mut w_tensor = state.head.w.clone();
                w_tensor.requires_grad = !state.head.frozen;
                Some(tape.leaf_tensor(&w_tensor))
            } else {
                None
            };

            let mut items = Vec::new();
            let mut bp_losses: Vec<Var> = Vec::new();
            let mut kl_sum = 0.0;
            let mut kl_tokens = 0usize;
            for &gi in &retained {
                let group = &groups[gi];
                let mut passes = Vec::with_capacity(group.size());
                for rollout in &group.rollouts {
                    let out = logprobs_under(&mut tape, &vars, &dims, rollout)?;
                    let ref_out = logprobs_under(&mut ref_tape, &ref_vars, &dims, rollout)?;
                    let ref_vals = ref_tape.value(ref_out.logprobs).to_vec();
                    let kl = kl_estimate_value(tape.value(out.logprobs), &ref_vals);
                    kl_sum += kl.iter().sum::<f64>();
                    kl_tokens += kl.len();
                    passes.push((out, ref_vals));
                }
                if backprop && group_gate(group) {
                    let hidden: Vec<Var> = passes.iter().map(|(o, _)| o.hidden).collect();
                    let w = bp_w.unwrap();
                    let (embs, sim) = embed_group(&mut tape, w, &hidden, cfg.contrastive.tau)?;
                    let mut pick =
                        rng::stream(state.seed, Domain::PositivePick, &[step, gi as u64]);
                    let (sh, losses) =
                        contrastive_rewards(&mut tape, sim, group, &cfg.contrastive, &mut pick)?;
                    let ge = GroupEmbeddings::from_tape(&tape, &embs, sim);
                    collect_embedding_metrics(&ge, group);
                    anchor_values.extend(losses.iter().map(|&(_, v)| tape.scalar_value(v)));
                    clipped_count += sh.clipped_mask.iter().filter(|&&c| c).count();
                    shaped[gi] = sh;
                    bp_losses.extend(losses.iter().map(|&(_, v)| v));
                }
                let advantages = group_advantages(&shaped[gi], cfg.method.std_guard);
                for (ri, (out, ref_vals)) in passes.into_iter().enumerate() {
                    items.push(SequenceItem {
                        logp_new: out.logprobs,
                        logp_old: group.rollouts[ri].response_logprobs.clone(),
                        logp_ref: Some(ref_vals),
                        advantage: advantages.values[ri],
                    });
                }
            }

            let batch = SequenceBatch { items };
            let mut loss = surrogate_loss(&mut tape, &batch, &cfg.method)?;
            if backprop && !bp_losses.is_empty() {
                let all = tape.concat_1d(&bp_losses);
                let mean_loss = tape.mean(all);
                let weighted = tape.scale(mean_loss, cfg.contrastive.lambda);
                loss = tape.add(loss, weighted)?;
            }
            tape.backward(loss)?;
            state.policy.absorb_grads(&tape, &vars);
            {
                let mut named = state.policy.named_tensors_mut();
                let mut refs: Vec<&mut Tensor> =
                    named.iter_mut().map(|(_, t)| &mut **t).collect();
                state.policy_opt.step_params(&mut refs)?;
            }
            state.policy.clear_grads();
            if let Some(w) = bp_w {
                if !state.head.frozen && !bp_losses.is_empty() {
                    // gradient of the lambda-weighted term; Adam absorbs the scale
                    let g = tape.grad(w).expect("head leaf gradient").to_vec();
                    state.head.w.grad = Some(g);
                    let mut w_owned = std::mem::replace(&mut state.head.w, Tensor::zeros(vec![0]));
                    let res = state.head.adamw.step_params(&mut [&mut w_owned]);
                    state.head.w = w_owned;
                    state.head.w.clear_grad();
                    res?;
                }
            }
            if kl_tokens > 0 {
                kl_to_ref = kl_sum / kl_tokens as f64;
            }
            policy_updated = true;
        }
    }

    // Head update against the step's valid anchor losses (detached path).
    if let Some(w) = head_w {
        head_update(&mut state.head, &mut head_tape, w, &head_losses)?;
    }

    let n_rollouts: usize = groups.iter().map(|g| g.size()).sum();
    let valid = groups.iter().filter(|g| group_gate(g)).count();
    let total_anchors = anchor_values.len();
    let mean_loss = (!anchor_values.is_empty())
        .then(|| anchor_values.iter().sum::<f64>() / anchor_values.len() as f64);
    Ok(StepStats {
        mean_base_reward: mean(
            groups.iter().flat_map(|g| g.rollouts.iter().map(|r| r.reward as f64)),
            n_rollouts,
        ),
        mean_shaped_reward: mean(
            shaped.iter().flat_map(|s| s.total.iter().copied()),
            n_rollouts,
        ),
        mean_contrastive_loss: mean_loss,
        mi_lower_bound: mean_loss.map(|l| mi_lower_bound(l, cfg.sampling.group_size)),
        mean_pos_pair_cosine: (!pos_pair_vals.is_empty())
            .then(|| pos_pair_vals.iter().sum::<f64>() / pos_pair_vals.len() as f64),
        mean_pos_neg_cosine: (!pos_neg_vals.is_empty())
            .then(|| pos_neg_vals.iter().sum::<f64>() / pos_neg_vals.len() as f64),
        frac_valid_groups: if groups.is_empty() { 0.0 } else { valid as f64 / groups.len() as f64 },
        frac_clipped_rewards: if total_anchors == 0 || warmup {
            0.0
        } else {
            clipped_count as f64 / total_anchors as f64
        },
        kl_to_ref,
        dropped_groups: dropped,
        policy_updated,
    })
}

/// Samples groups for the step's task batch, then runs [`step_on_groups`].
pub fn execute_step(
    state: &mut RunState,
    cfg: &TrainConfig,
    batch: &[TaskInstance],
    step: u64,
) -> Result<StepStats> {
    let groups = sample_step_groups(state, cfg, batch, step)?;
    step_on_groups(state, cfg, &groups, step)
}

/// pass@1 = mean over prompts of the fraction of sampled responses the
/// verifier accepts. Deterministic given `(seed, tag)`.
pub fn pass_at_1(
    params: &PolicyParams,
    instances: &[TaskInstance],
    cfg: &EvalConfig,
    max_response_len: usize,
    seed: u64,
    tag: u64,
) -> Result<f64> {
    if instances.is_empty() {
        return Err(CoreError::Contract { op: "pass_at_1", detail: "empty eval set".into() });
    }
    let sampling = SamplingConfig {
        temperature: cfg.eval_temperature,
        top_p: cfg.eval_top_p,
        max_response_len,
        group_size: 2, // unused by sample_response
    };
    let mut total = 0.0;
    for (pi, inst) in instances.iter().enumerate() {
        let mut correct = 0usize;
        for si in 0..cfg.eval_samples_per_prompt {
            let mut rng =
                rng::stream(seed, Domain::Eval, &[tag, pi as u64, si as u64]);
            let record = sample_response(params, inst, &sampling, &mut rng)?;
            correct += record.reward as usize;
        }
        total += correct as f64 / cfg.eval_samples_per_prompt as f64;
    }
    Ok(total / instances.len() as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct EvalReport {
    pub base: f64,
    pub perturbed1: f64,
    pub perturbed2: f64,
}

impl EvalReport {
    pub fn perturbed_mean(&self) -> f64 {
        0.5 * (self.perturbed1 + self.perturbed2)
    }
}

pub fn evaluate(
    params: &PolicyParams,
    suite: &TaskSuite,
    cfg: &TrainConfig,
    tag: u64,
) -> Result<EvalReport> {
    let cap = |set: &[TaskInstance]| -> Vec<TaskInstance> {
        set.iter().take(cfg.eval.eval_prompts.max(1)).cloned().collect()
    };
    let max_len = cfg.sampling.max_response_len;
    Ok(EvalReport {
        base: pass_at_1(params, &cap(&suite.eval_base), &cfg.eval, max_len, cfg.run.seed, tag)?,
        perturbed1: pass_at_1(
            params,
            &cap(&suite.eval_perturbed1),
            &cfg.eval,
            max_len,
            cfg.run.seed,
            tag ^ 0x1000,
        )?,
        perturbed2: pass_at_1(
            params,
            &cap(&suite.eval_perturbed2),
            &cfg.eval,
            max_len,
            cfg.run.seed,
            tag ^ 0x2000,
        )?,
    })
}

fn select_batch(
    train: &[TaskInstance],
    cfg: &TrainConfig,
    seed: u64,
    step: u64,
) -> Result<Vec<TaskInstance>> {
    if train.is_empty() {
        return Err(CoreError::Contract { op: "select_batch", detail: "empty train split".into() });
    }
    let mut rng = rng::stream(seed, Domain::Batch, &[step]);
    let k = cfg.run.prompts_per_step;
    if k <= train.len() {
        let idx = rand::seq::index::sample(&mut rng, train.len(), k);
        Ok(idx.iter().map(|i| train[i].clone()).collect())
    } else {
        Ok((0..k).map(|_| train[rng.gen_range(0..train.len())].clone()).collect())
    }
}

/// Fresh run: snapshot the reference, run warmup then training with periodic
/// evaluation, write the metrics stream and checkpoints into `out_dir`.
pub fn run(cfg: &TrainConfig, policy: PolicyParams, out_dir: &Path) -> Result<RunState> {
    cfg.validate()?;
    cfg.validate_lengths(&policy.dims)?;
    let state = RunState::new(policy, cfg);
    run_with_state(cfg, state, out_dir, true)
}

/// Resume path: `state.step` marks the last completed step; metrics for the
/// remaining steps are written to a fresh stream in `out_dir`.
pub fn run_with_state(
    cfg: &TrainConfig,
    mut state: RunState,
    out_dir: &Path,
    fresh: bool,
) -> Result<RunState> {
    std::fs::create_dir_all(out_dir)?;
    let vocab_hash = Vocabulary::standard().hash();
    let suite = TaskSuite::build(&cfg.tasks, state.seed)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut sink = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);

    let eval_every = cfg.eval.eval_every as u64;
    let last_eval_tag = if fresh {
        0
    } else if eval_every > 0 {
        (state.step / eval_every) * eval_every
    } else {
        0
    };
    let mut evals = evaluate(&state.policy, &suite, cfg, last_eval_tag)?;

    if fresh {
        let record = MetricsRecord {
            step: 0,
            mean_base_reward: 0.0,
            mean_shaped_reward: 0.0,
            pass1_eval_base: evals.base,
            pass1_eval_perturbed: evals.perturbed_mean(),
            mean_contrastive_loss: None,
            mi_lower_bound: None,
            mean_pos_pair_cosine: None,
            mean_pos_neg_cosine: None,
            frac_valid_groups: 0.0,
            frac_clipped_rewards: 0.0,
            kl_to_ref: 0.0,
            dropped_groups: 0,
        };
        record.validate()?;
        record.write_line(&mut sink)?;
        sink.flush()?;
    }

    let total = cfg.run.total_steps as u64;
    for step in (state.step + 1)..=total {
        let batch = select_batch(&suite.train, cfg, state.seed, step)?;
        let stats = execute_step(&mut state, cfg, &batch, step)?;
        state.step = step;

        let eval_now = (eval_every > 0 && step % eval_every == 0) || step == total;
        if eval_now {
            evals = evaluate(&state.policy, &suite, cfg, step)?;
        }
        let record = MetricsRecord {
            step,
            mean_base_reward: stats.mean_base_reward,
            mean_shaped_reward: stats.mean_shaped_reward,
            pass1_eval_base: evals.base,
            pass1_eval_perturbed: evals.perturbed_mean(),
            mean_contrastive_loss: stats.mean_contrastive_loss,
            mi_lower_bound: stats.mi_lower_bound,
            mean_pos_pair_cosine: stats.mean_pos_pair_cosine,
            mean_pos_neg_cosine: stats.mean_pos_neg_cosine,
            frac_valid_groups: stats.frac_valid_groups,
            frac_clipped_rewards: stats.frac_clipped_rewards,
            kl_to_ref: stats.kl_to_ref,
            dropped_groups: stats.dropped_groups,
        };
        if let Err(e) = record.validate() {
            let dump = out_dir.join(format!("diagnostic_step{step}.txt"));
            let _ = std::fs::write(&dump, format!("{record:#?}\n"));
            return Err(e);
        }
        record.write_line(&mut sink)?;
        sink.flush()?;

        if cfg.run.checkpoint_every > 0 && step % cfg.run.checkpoint_every as u64 == 0 {
            checkpoint::save_to_path(
                &out_dir.join(format!("ckpt_step{step}.bin")),
                &state.to_checkpoint(),
                vocab_hash,
            )?;
        }
    }
    checkpoint::save_to_path(&out_dir.join("final.bin"), &state.to_checkpoint(), vocab_hash)?;
    Ok(state)
}

/// Samples `k_steps` worth of groups without updating anything and writes one
/// CSV row per rollout: `step,group_id,rollout_id,reward,e_0..e_{d-1}`.
pub fn export_embeddings<W: Write>(
    cfg: &TrainConfig,
    policy: &PolicyParams,
    head: &ContrastiveHead,
    k_steps: usize,
    mut out: W,
) -> Result<()> {
    let suite = TaskSuite::build(&cfg.tasks, cfg.run.seed)?;
    let mut header = String::from("step,group_id,rollout_id,reward");
    for i in 0..head.out_dim() {
        header.push_str(&format!(",e_{i}"));
    }
    writeln!(out, "{header}")?;
    let state_like_seed = cfg.run.seed;
    for step in 1..=k_steps as u64 {
        let batch = select_batch(&suite.train, cfg, state_like_seed, step)?;
        for (gi, inst) in batch.iter().enumerate() {
            let stream = rng::mix(state_like_seed, &[Domain::Rollout as u64, step, gi as u64]);
            let group = sample_group(policy, inst, &cfg.sampling, stream)?;
            let mut tape = Tape::new();
            let w = tape.leaf_tensor(&head.w);
            let hidden: Vec<Var> =
                group.rollouts.iter().map(|r| tape.leaf_tensor(&r.hidden_states)).collect();
            let (embs, _) = embed_group(&mut tape, w, &hidden, cfg.contrastive.tau)?;
            for (ri, e) in embs.iter().enumerate() {
                let mut row = format!("{step},{gi},{ri},{}", group.rollouts[ri].reward);
                for v in tape.value(*e) {
                    row.push_str(&format!(",{v}"));
                }
                writeln!(out, "{row}")?;
            }
        }
    }
    Ok(())
}

/// Supervised warm-up driver: builds the corpus from the base-family train
/// split, trains, and reports the resulting loss curve.
pub fn pretrain(cfg: &TrainConfig, policy: &mut PolicyParams) -> Result<Vec<f64>> {
    let suite = TaskSuite::build(&cfg.tasks, cfg.run.seed)?;
    policy::supervised_pretrain(
        policy,
        &suite.train,
        cfg.run.pretrain_steps,
        cfg.run.pretrain_lr,
        cfg.run.pretrain_batch,
        cfg.run.seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{Dims, RolloutRecord};
    use crate::tasks;

    fn tiny_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.tasks.n_train = 64;
        cfg.tasks.n_eval = 6;
        cfg.sampling.group_size = 4;
        cfg.sampling.max_response_len = 6;
        cfg.run.prompts_per_step = 2;
        cfg.run.total_steps = 6;
        cfg.run.head_warmup_steps = 2;
        cfg.eval.eval_every = 3;
        cfg.eval.eval_samples_per_prompt = 4;
        cfg.eval.eval_prompts = 6;
        cfg.contrastive.d = 4;
        cfg
    }

    fn tiny_policy(seed: u64) -> PolicyParams {
        PolicyParams::init(
            Dims { vocab: 20, dim: 8, heads: 2, layers: 1, ff_mult: 2, max_seq: 64 },
            seed,
        )
    }

    #[test]
    fn validate_collects_all_problems() {
        let mut cfg = tiny_cfg();
        cfg.sampling.group_size = 1;
        cfg.run.policy_lr = 0.0;
        cfg.run.head_warmup_steps = 100;
        match cfg.validate() {
            Err(CoreError::Config(problems)) => {
                assert!(problems.len() >= 3, "{problems:?}");
            }
            other => panic!("expected config error, got {:?}", other),
        }
    }

    #[test]
    fn zero_steps_emits_only_initial_record() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.run.total_steps = 0;
        cfg.run.head_warmup_steps = 0;
        run(&cfg, tiny_policy(1), dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        let records = crate::metrics::read_metrics(text.as_bytes()).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].step, 0);
    }

    #[test]
    fn deterministic_runs_are_byte_identical() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        run(&cfg, tiny_policy(2), dir_a.path()).unwrap();
        run(&cfg, tiny_policy(2), dir_b.path()).unwrap();
        let a = std::fs::read(dir_a.path().join("metrics.jsonl")).unwrap();
        let b = std::fs::read(dir_b.path().join("metrics.jsonl")).unwrap();
        assert_eq!(a, b);
        let ca = std::fs::read(dir_a.path().join("final.bin")).unwrap();
        let cb = std::fs::read(dir_b.path().join("final.bin")).unwrap();
        assert_eq!(ca, cb);
    }

    #[test]
    fn multi_worker_sampling_matches_single_worker() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        run(&cfg, tiny_policy(2), dir_a.path()).unwrap();
        cfg.run.workers = 4;
        run(&cfg, tiny_policy(2), dir_b.path()).unwrap();
        let a = std::fs::read(dir_a.path().join("metrics.jsonl")).unwrap();
        let b = std::fs::read(dir_b.path().join("metrics.jsonl")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn disabled_contrastive_is_inert_baseline() {
        // two configs that differ in every contrastive knob but share
        // contrastive_enabled = false must produce identical runs
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let mut cfg_a = tiny_cfg();
        cfg_a.run.contrastive_enabled = false;
        let mut cfg_b = cfg_a.clone();
        cfg_b.contrastive.tau = 0.3;
        cfg_b.contrastive.lambda = 0.9;
        cfg_b.contrastive.loss_kind = crate::contrastive::LossKind::Softnn;
        cfg_b.run.fixed_head = true;
        cfg_b.run.head_warmup_steps = 0;
        let sa = run(&cfg_a, tiny_policy(3), dir_a.path()).unwrap();
        let sb = run(&cfg_b, tiny_policy(3), dir_b.path()).unwrap();
        assert_eq!(sa.policy.params_hash(), sb.policy.params_hash());
        let a = std::fs::read(dir_a.path().join("metrics.jsonl")).unwrap();
        let b = std::fs::read(dir_b.path().join("metrics.jsonl")).unwrap();
        assert_eq!(a, b);
        // and the contrastive metrics are absent
        let records = crate::metrics::read_metrics(&a[..]).unwrap();
        for r in records {
            assert!(r.mean_contrastive_loss.is_none());
            assert_eq!(r.mean_shaped_reward, r.mean_base_reward);
        }
    }

    /// A crafted group with mixed rewards: a fresh random policy almost never
    /// earns a reward, so gate-valid groups must be injected directly.
    fn crafted_mixed_group(policy: &PolicyParams, rewards: &[u8], seed: u64) -> RolloutGroup {
        use rand::{Rng, SeedableRng};
        let dims = policy.dims;
        let inst = tasks::generate(&TaskSuiteConfig::default().base_family(), seed);
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let rollouts: Vec<RolloutRecord> = rewards
            .iter()
            .map(|&reward| {
                let mut tokens = inst.prompt_tokens.clone();
                tokens.extend([tasks::ANS_OPEN, 3, tasks::ANS_CLOSE, tasks::EOS]);
                let hidden: Vec<f64> =
                    (0..2 * dims.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let probe = RolloutRecord {
                    prompt_len: inst.prompt_tokens.len(),
                    tokens: tokens.clone(),
                    response_len: 4,
                    response_logprobs: vec![0.0; 4],
                    hidden_states: Tensor::matrix(2, dims.dim, hidden),
                    reward,
                    truncated: false,
                };
                let mut tape = Tape::new();
                let vars = policy.leaves(&mut tape, false);
                let out = logprobs_under(&mut tape, &vars, &dims, &probe).unwrap();
                let lp = tape.value(out.logprobs).to_vec();
                RolloutRecord { response_logprobs: lp, ..probe }
            })
            .collect();
        RolloutGroup::new(inst, rollouts)
    }

    #[test]
    fn fixed_head_keeps_hash_while_rewards_flow() {
        let mut cfg = tiny_cfg();
        cfg.run.fixed_head = true;
        cfg.run.head_warmup_steps = 0;
        let policy = tiny_policy(4);
        let mut state = RunState::new(policy, &cfg);
        let head_hash = state.head.hash();
        let mut saw_shaping = false;
        for step in 1..=5 {
            let group = crafted_mixed_group(&state.policy, &[1, 1, 0, 0], step);
            let stats = step_on_groups(&mut state, &cfg, &[group], step).unwrap();
            if stats.mean_contrastive_loss.is_some()
                && stats.mean_shaped_reward != stats.mean_base_reward
            {
                saw_shaping = true;
            }
        }
        assert_eq!(state.head.hash(), head_hash, "fixed head must never move");
        assert!(saw_shaping, "rewards must still be computed with a fixed head");
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let dir_full = tempfile::tempdir().unwrap();
        let dir_part = tempfile::tempdir().unwrap();
        let dir_resume = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();

        run(&cfg, tiny_policy(5), dir_full.path()).unwrap();

        let mut cfg_part = cfg.clone();
        cfg_part.run.total_steps = 3;
        run(&cfg_part, tiny_policy(5), dir_part.path()).unwrap();

        let vocab_hash = Vocabulary::standard().hash();
        let data =
            checkpoint::load_from_path(&dir_part.path().join("final.bin"), vocab_hash).unwrap();
        let state = RunState::from_checkpoint(data, &cfg);
        assert_eq!(state.step, 3);
        run_with_state(&cfg, state, dir_resume.path(), false).unwrap();

        let full = std::fs::read_to_string(dir_full.path().join("metrics.jsonl")).unwrap();
        let full_records = crate::metrics::read_metrics(full.as_bytes()).unwrap();
        let resumed = std::fs::read_to_string(dir_resume.path().join("metrics.jsonl")).unwrap();
        let resumed_records = crate::metrics::read_metrics(resumed.as_bytes()).unwrap();
        let tail: Vec<_> = full_records.iter().filter(|r| r.step > 3).cloned().collect();
        assert_eq!(tail, resumed_records);
        let a = std::fs::read(dir_full.path().join("final.bin")).unwrap();
        let b = std::fs::read(dir_resume.path().join("final.bin")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn warmup_leaves_policy_untouched_and_trains_head() {
        let mut cfg = tiny_cfg();
        cfg.run.total_steps = 2;
        cfg.run.head_warmup_steps = 2;
        let policy = tiny_policy(6);
        let policy_hash = policy.params_hash();
        let mut state = RunState::new(policy, &cfg);
        let head_hash = state.head.hash();
        let mut head_moved = false;
        for step in 1..=2u64 {
            let group = crafted_mixed_group(&state.policy, &[1, 1, 0, 0], step);
            let stats = step_on_groups(&mut state, &cfg, &[group], step).unwrap();
            assert!(!stats.policy_updated);
            // warmup withholds rewards
            assert_eq!(stats.mean_shaped_reward, stats.mean_base_reward);
            assert!(stats.mean_contrastive_loss.is_some());
            if state.head.hash() != head_hash {
                head_moved = true;
            }
        }
        assert_eq!(state.policy.params_hash(), policy_hash);
        assert!(head_moved, "warmup must update the head");
    }

    /// Hand-traced single step on a crafted 4-rollout group: every
    /// intermediate (shaped rewards, advantages, surrogate value) is checked
    /// against closed forms.
    #[test]
    fn crafted_step_matches_hand_trace() {
        let dims = Dims { vocab: 20, dim: 2, heads: 1, layers: 1, ff_mult: 2, max_seq: 48 };
        let policy = PolicyParams::init(dims, 7);
        let mut cfg = tiny_cfg();
        cfg.contrastive.d = 2;
        cfg.contrastive.tau = 0.5;
        cfg.contrastive.lambda = 0.2;
        cfg.run.head_warmup_steps = 0;
        cfg.method.kl_coef = 0.0;
        let mut state = RunState::new(policy, &cfg);
        // identity head: embeddings equal normalized pooled hidden states
        state.head.w = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);

        let inst = tasks::generate(&cfg.tasks.base_family(), 3);
        let pooled_dirs =
            [vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
        let rewards = [1u8, 1, 0, 0];
        let mut rollouts = Vec::new();
        for (dir, &reward) in pooled_dirs.iter().zip(&rewards) {
            let mut tokens = inst.prompt_tokens.clone();
            tokens.extend([tasks::ANS_OPEN, 3, tasks::ANS_CLOSE, tasks::EOS]);
            // constant hidden rows pool to the direction itself
            let hidden = Tensor::matrix(4, 2, dir.iter().cycle().take(8).copied().collect());
            // stored logprobs = current-policy logprobs so that rho = 1
            let mut tape = Tape::new();
            let vars = state.policy.leaves(&mut tape, false);
            let probe = RolloutRecord {
                prompt_len: inst.prompt_tokens.len(),
                tokens: tokens.clone(),
                response_len: 4,
                response_logprobs: vec![0.0; 4],
                hidden_states: hidden.clone(),
                reward,
                truncated: false,
            };
            let out = logprobs_under(&mut tape, &vars, &dims, &probe).unwrap();
            let lp = tape.value(out.logprobs).to_vec();
            rollouts.push(RolloutRecord { response_logprobs: lp, ..probe });
        }
        let group = RolloutGroup::new(inst, rollouts);
        let stats = step_on_groups(&mut state, &cfg, &[group], 1).unwrap();

        // hand trace: L = ln(2e^2 + 1 + e^-2) - 2 for both anchors
        let e2 = (2.0f64).exp();
        let l = (2.0 * e2 + 1.0 + (-2.0f64).exp()).ln() - 2.0;
        let r_cl = -0.2 * l;
        let shaped = [1.0 + r_cl, 1.0 + r_cl, 0.0, 0.0];
        let mean_shaped = shaped.iter().sum::<f64>() / 4.0;
        assert!((stats.mean_contrastive_loss.unwrap() - l).abs() < 1e-9);
        assert!((stats.mean_shaped_reward - mean_shaped).abs() < 1e-9);
        assert!((stats.mean_base_reward - 0.5).abs() < 1e-12);
        // advantages are exactly [1, 1, -1, -1]; on-policy rho = 1 and equal
        // lengths make the clipped surrogate -(token-mean of advantages) = 0
        assert!(stats.policy_updated);
        assert!((stats.mi_lower_bound.unwrap() - ((4.0f64).ln() - l)).abs() < 1e-9);
        assert_eq!(stats.frac_valid_groups, 1.0);
        assert!(stats.kl_to_ref.abs() < 1e-12);
        // positive pair has cosine 1 (identical embeddings)
        assert!((stats.mean_pos_pair_cosine.unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn every_group_filtered_is_a_policy_noop() {
        let mut cfg = tiny_cfg();
        cfg.method.dynamic_sampling = true;
        cfg.run.head_warmup_steps = 0;
        let policy = tiny_policy(8);
        let mut state = RunState::new(policy, &cfg);
        let before = state.policy.params_hash();
        // craft an all-wrong group (degenerate under dynamic sampling)
        let inst = tasks::generate(&cfg.tasks.base_family(), 1);
        let rollouts: Vec<RolloutRecord> = (0..4)
            .map(|_| RolloutRecord {
                prompt_len: inst.prompt_tokens.len(),
                tokens: inst
                    .prompt_tokens
                    .iter()
                    .copied()
                    .chain([tasks::EOS])
                    .collect(),
                response_len: 1,
                response_logprobs: vec![-0.4],
                hidden_states: Tensor::matrix(1, 8, vec![0.1; 8]),
                reward: 0,
                truncated: false,
            })
            .collect();
        let group = RolloutGroup::new(inst, rollouts);
        let stats = step_on_groups(&mut state, &cfg, &[group], 1).unwrap();
        assert!(!stats.policy_updated);
        assert_eq!(stats.dropped_groups, 1);
        assert_eq!(state.policy.params_hash(), before);
    }

    #[test]
    fn export_embeddings_schema_and_norms() {
        let cfg = tiny_cfg();
        let policy = tiny_policy(9);
        let head = ContrastiveHead::init(cfg.contrastive.d, policy.dims.dim, 0);
        let mut buf = Vec::new();
        export_embeddings(&cfg, &policy, &head, 2, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert_eq!(header, "step,group_id,rollout_id,reward,e_0,e_1,e_2,e_3");
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 2 * cfg.run.prompts_per_step * cfg.sampling.group_size);
        for row in rows {
            let fields: Vec<&str> = row.split(',').collect();
            assert_eq!(fields.len(), 4 + cfg.contrastive.d);
            let norm: f64 = fields[4..]
                .iter()
                .map(|f| f.parse::<f64>().unwrap().powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "row norm {norm}");
        }
    }

    #[test]
    fn eval_counts_match_direct_oracle() {
        // a crafted params set is overkill; instead check the exact rational
        // arithmetic of pass@1 on a fresh policy by recounting by hand
        let cfg = tiny_cfg();
        let policy = tiny_policy(10);
        let suite = TaskSuite::build(&cfg.tasks, cfg.run.seed).unwrap();
        let instances: Vec<TaskInstance> =
            suite.eval_base.iter().take(4).cloned().collect();
        let got = pass_at_1(&policy, &instances, &cfg.eval, cfg.sampling.max_response_len, 0, 5)
            .unwrap();
        let sampling = SamplingConfig {
            temperature: cfg.eval.eval_temperature,
            top_p: cfg.eval.eval_top_p,
            max_response_len: cfg.sampling.max_response_len,
            group_size: 2,
        };
        let mut total = 0usize;
        for (pi, inst) in instances.iter().enumerate() {
            for si in 0..cfg.eval.eval_samples_per_prompt {
                let mut rng = rng::stream(0, Domain::Eval, &[5, pi as u64, si as u64]);
                let r = sample_response(&policy, inst, &sampling, &mut rng).unwrap();
                total += r.reward as usize;
            }
        }
        let expect =
            total as f64 / (instances.len() * cfg.eval.eval_samples_per_prompt) as f64;
        assert_eq!(got, expect);
    }

    #[test]
    fn backprop_into_policy_switch_runs_and_shapes_identically() {
        // reward VALUES are identical to the detached path on the same step;
        // only gradient routing differs
        let mut cfg_detached = tiny_cfg();
        cfg_detached.run.total_steps = 3;
        cfg_detached.run.head_warmup_steps = 0;
        let mut cfg_joint = cfg_detached.clone();
        cfg_joint.contrastive.backprop_into_policy = true;

        let policy = tiny_policy(11);
        let mut state_a = RunState::new(policy.clone(), &cfg_detached);
        let mut state_b = RunState::new(policy, &cfg_joint);
        let suite = TaskSuite::build(&cfg_detached.tasks, 0).unwrap();
        let batch = select_batch(&suite.train, &cfg_detached, 0, 1).unwrap();
        let a = execute_step(&mut state_a, &cfg_detached, &batch, 1).unwrap();
        let b = execute_step(&mut state_b, &cfg_joint, &batch, 1).unwrap();
        assert_eq!(a.mean_shaped_reward, b.mean_shaped_reward);
        assert_eq!(a.mean_contrastive_loss, b.mean_contrastive_loss);
    }
}
