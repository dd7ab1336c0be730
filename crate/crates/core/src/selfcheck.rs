//! Built-in verification suites: gradient checks, loss identities, surrogate
//! equivalences, and a hand-traced training step. Each check reports its
//! name, tolerance, and measured value so failures are diagnosable from the
//! report alone.

use crate::contrastive::{
    contrastive_rewards, infonce_anchor_loss, similarity_matrix, softnn_anchor_loss,
    supcon_anchor_loss, ContrastiveConfig, LossKind,
};
use crate::error::Result;
use crate::gradcheck::{finite_diff_grad_at, max_rel_error};
use crate::objectives::{surrogate_loss, Method, SequenceBatch, SequenceItem, SurrogateConfig};
use crate::policy::{self, logprobs_under, Dims, PolicyParams, RolloutGroup, RolloutRecord};
use crate::tape::{Tape, Var};
use crate::tasks::{self, TaskSuiteConfig};
use crate::tensor::Tensor;
use crate::trainer::{step_on_groups, RunState, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub tolerance: f64,
    pub measured: f64,
    pub pass: bool,
}

impl CheckResult {
    fn new(name: impl Into<String>, tolerance: f64, measured: f64) -> Self {
        let pass = measured.is_finite() && measured <= tolerance;
        CheckResult { name: name.into(), tolerance, measured, pass }
    }
}

fn tiny_dims() -> Dims {
    Dims { vocab: 20, dim: 4, heads: 2, layers: 1, ff_mult: 2, max_seq: 48 }
}

/// Crafted on-policy rollout group with the given rewards. Responses differ
/// per rollout (distinct digits, mixed lengths) so that advantage-weighted
/// gradients do not cancel across the group.
fn crafted_group(policy: &PolicyParams, rewards: &[u8], seed: u64) -> RolloutGroup {
    let dims = policy.dims;
    let inst = tasks::generate(&TaskSuiteConfig::default().base_family(), seed);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let rollouts: Vec<RolloutRecord> = rewards
        .iter()
        .enumerate()
        .map(|(i, &reward)| {
            let mut tokens = inst.prompt_tokens.clone();
            let d1 = (seed as usize + 3 * i) % 10;
            tokens.push(tasks::ANS_OPEN);
            tokens.push(d1);
            if i % 2 == 0 {
                tokens.push((d1 + 7) % 10);
            }
            tokens.extend([tasks::ANS_CLOSE, tasks::EOS]);
            let response_len = tokens.len() - inst.prompt_tokens.len();
            let hidden: Vec<f64> =
                (0..response_len * dims.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let probe = RolloutRecord {
                prompt_len: inst.prompt_tokens.len(),
                tokens: tokens.clone(),
                response_len,
                response_logprobs: vec![0.0; response_len],
                hidden_states: Tensor::matrix(response_len, dims.dim, hidden),
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

/// Gradient of each anchor-loss variant w.r.t. raw embedding inputs,
/// optionally with the analytic gradient deliberately scaled (negative
/// control for the checker itself). Returns the worst relative error.
pub fn anchor_loss_gradient_error(kind: LossKind, seeds: u64, perturb: f64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let flat: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // tau = 0.5 keeps the loss O(1); at sharp temperatures the
        // finite-difference oracle's roundoff floor, not the analytic
        // gradient, dominates small coordinates
        let build = |t: &mut Tape, data: &[f64], grad: bool| -> Var {
            let embs: Vec<Var> = (0..4)
                .map(|i| {
                    let raw = t.leaf(vec![2], data[2 * i..2 * i + 2].to_vec(), grad);
                    t.l2_normalize(raw).unwrap()
                })
                .collect();
            let sim = similarity_matrix(t, &embs, 0.5).unwrap();
            match kind {
                LossKind::Infonce => infonce_anchor_loss(t, sim, 0, 1, false).unwrap(),
                LossKind::Supcon => supcon_anchor_loss(t, sim, 0, &[0, 1, 2], false).unwrap(),
                LossKind::Softnn => softnn_anchor_loss(t, sim, 0, &[0, 1, 2], false).unwrap(),
            }
        };
        let mut t = Tape::new();
        let leaves: Vec<Var> =
            (0..4).map(|i| t.leaf(vec![2], flat[2 * i..2 * i + 2].to_vec(), true)).collect();
        let embs: Vec<Var> = leaves.iter().map(|&l| t.l2_normalize(l).unwrap()).collect();
        let sim = similarity_matrix(&mut t, &embs, 0.5).unwrap();
        let loss = match kind {
            LossKind::Infonce => infonce_anchor_loss(&mut t, sim, 0, 1, false).unwrap(),
            LossKind::Supcon => supcon_anchor_loss(&mut t, sim, 0, &[0, 1, 2], false).unwrap(),
            LossKind::Softnn => softnn_anchor_loss(&mut t, sim, 0, &[0, 1, 2], false).unwrap(),
        };
        t.backward(loss).unwrap();
        let mut analytic = Vec::new();
        for &l in &leaves {
            analytic.extend(t.grad(l).unwrap().iter().map(|g| g * (1.0 + perturb)));
        }
        let coords: Vec<usize> = (0..8).collect();
        let numeric = finite_diff_grad_at(
            |x| {
                let mut t = Tape::new();
                let v = build(&mut t, x, false);
                t.scalar_value(v)
            },
            &flat,
            1e-6,
            &coords,
        );
        worst = worst.max(max_rel_error(&analytic, &numeric, &coords));
    }
    worst
}

/// Gradient of a surrogate loss w.r.t. a sampled set of policy coordinates.
fn surrogate_gradient_error(method: Method, seeds: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let policy = PolicyParams::init(tiny_dims(), 1000 + seed);
        let group = crafted_group(&policy, &[1, 0, 1, 0], seed);
        let cfg = SurrogateConfig::for_method(method);
        // advantages fixed so only policy params vary
        let advantages = [1.0, -1.0, 0.5, -0.5];

        let loss_value = |p: &PolicyParams| -> f64 {
            let mut tape = Tape::new();
            let vars = p.leaves(&mut tape, false);
            let items: Vec<SequenceItem> = group
                .rollouts
                .iter()
                .zip(advantages)
                .map(|(r, adv)| {
                    let out = logprobs_under(&mut tape, &vars, &p.dims, r).unwrap();
                    SequenceItem {
                        logp_new: out.logprobs,
                        logp_old: r.response_logprobs.clone(),
                        logp_ref: Some(r.response_logprobs.clone()),
                        advantage: adv,
                    }
                })
                .collect();
            let loss = surrogate_loss(&mut tape, &SequenceBatch { items }, &cfg).unwrap();
            tape.scalar_value(loss)
        };

        let mut tape = Tape::new();
        let vars = policy.leaves(&mut tape, true);
        let items: Vec<SequenceItem> = group
            .rollouts
            .iter()
            .zip(advantages)
            .map(|(r, adv)| {
                let out = logprobs_under(&mut tape, &vars, &policy.dims, r).unwrap();
                SequenceItem {
                    logp_new: out.logprobs,
                    logp_old: r.response_logprobs.clone(),
                    logp_ref: Some(r.response_logprobs.clone()),
                    advantage: adv,
                }
            })
            .collect();
        let loss = surrogate_loss(&mut tape, &SequenceBatch { items }, &cfg).unwrap();
        tape.backward(loss).unwrap();

        // probe the token embedding and first-block query projection on
        // coordinates with non-negligible gradients; relative error against
        // coordinates near zero measures finite-difference roundoff, not the
        // backward pass
        for (leaf_idx, tensor_pick) in [(vars.tok_emb, 0usize), (vars.blocks[0].wq, 1)] {
            let analytic = tape.grad(leaf_idx).unwrap().to_vec();
            let gmax = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            if gmax == 0.0 {
                continue;
            }
            let eligible: Vec<usize> = (0..analytic.len())
                .filter(|&i| analytic[i].abs() >= 0.05 * gmax)
                .collect();
            let mut rng = ChaCha12Rng::seed_from_u64(seed * 31 + tensor_pick as u64);
            let coords: Vec<usize> =
                (0..8).map(|_| eligible[rng.gen_range(0..eligible.len())]).collect();
            let base: Vec<f64> = match tensor_pick {
                0 => policy.tok_emb.data().to_vec(),
                _ => policy.blocks[0].wq.data().to_vec(),
            };
            let numeric = finite_diff_grad_at(
                |x| {
                    let mut p = policy.clone();
                    match tensor_pick {
                        0 => p.tok_emb = Tensor::new(p.tok_emb.shape().to_vec(), x.to_vec()),
                        _ => {
                            p.blocks[0].wq =
                                Tensor::new(p.blocks[0].wq.shape().to_vec(), x.to_vec())
                        }
                    }
                    loss_value(&p)
                },
                &base,
                1e-6,
                &coords,
            );
            worst = worst.max(max_rel_error(&analytic, &numeric, &coords));
        }
    }
    worst
}

fn supervised_ce_gradient_error(seeds: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let policy = PolicyParams::init(tiny_dims(), 2000 + seed);
        let inst = tasks::generate(&TaskSuiteConfig::default().base_family(), seed);
        let mut tokens = inst.prompt_tokens.clone();
        tokens.extend(tasks::gold_response(&inst));
        let prompt_len = inst.prompt_tokens.len();

        let ce = |p: &PolicyParams, grad: bool| -> (f64, Option<Vec<f64>>) {
            let mut tape = Tape::new();
            let vars = p.leaves(&mut tape, grad);
            let (logits, _) = policy::forward(&mut tape, &vars, &p.dims, &tokens).unwrap();
            let lp = tape.log_softmax_rows(logits).unwrap();
            let entries: Vec<(usize, usize)> =
                (prompt_len..tokens.len()).map(|p| (p - 1, tokens[p])).collect();
            let picked = tape.gather_entries(lp, &entries).unwrap();
            let sum = tape.sum(picked);
            let loss = tape.scale(sum, -1.0 / entries.len() as f64);
            let v = tape.scalar_value(loss);
            if grad {
                tape.backward(loss).unwrap();
                (v, Some(tape.grad(vars.tok_emb).unwrap().to_vec()))
            } else {
                (v, None)
            }
        };

        let (_, analytic) = ce(&policy, true);
        let analytic = analytic.unwrap();
        let gmax = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let eligible: Vec<usize> =
            (0..analytic.len()).filter(|&i| analytic[i].abs() >= 0.05 * gmax).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let coords: Vec<usize> =
            (0..8).map(|_| eligible[rng.gen_range(0..eligible.len())]).collect();
        let numeric = finite_diff_grad_at(
            |x| {
                let mut p = policy.clone();
                p.tok_emb = Tensor::new(p.tok_emb.shape().to_vec(), x.to_vec());
                ce(&p, false).0
            },
            policy.tok_emb.data(),
            1e-6,
            &coords,
        );
        worst = worst.max(max_rel_error(&analytic, &numeric, &coords));
    }
    worst
}

fn loss_identity_checks(out: &mut Vec<CheckResult>) {
    // all-identical embeddings give ln G for each variant
    for g in [4usize, 16, 32] {
        let mut t = Tape::new();
        let embs: Vec<Var> = (0..g).map(|_| t.leaf(vec![2], vec![1.0, 0.0], false)).collect();
        let sim = similarity_matrix(&mut t, &embs, 0.05).unwrap();
        let ln_g = (g as f64).ln();
        let infonce = infonce_anchor_loss(&mut t, sim, 0, 1, false).unwrap();
        out.push(CheckResult::new(
            format!("identity/infonce_lnG_G{g}"),
            1e-9,
            (t.scalar_value(infonce) - ln_g).abs(),
        ));
        let supcon = supcon_anchor_loss(&mut t, sim, 0, &[0, 1], false).unwrap();
        out.push(CheckResult::new(
            format!("identity/supcon_lnG_G{g}"),
            1e-9,
            (t.scalar_value(supcon) - ln_g).abs(),
        ));
        let softnn = softnn_anchor_loss(&mut t, sim, 0, &[0, 1], false).unwrap();
        out.push(CheckResult::new(
            format!("identity/softnn_lnG_G{g}"),
            1e-9,
            (t.scalar_value(softnn) - ln_g).abs(),
        ));
    }

    // hand case: tau = 0.5, embeddings [(1,0),(1,0),(0,1),(-1,0)]
    let mut t = Tape::new();
    let data = [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]];
    let embs: Vec<Var> = data.iter().map(|d| t.leaf(vec![2], d.to_vec(), false)).collect();
    let sim = similarity_matrix(&mut t, &embs, 0.5).unwrap();
    let loss = infonce_anchor_loss(&mut t, sim, 0, 1, false).unwrap();
    let e2 = (2.0f64).exp();
    let oracle = -(e2 / (e2 + e2 + 1.0 + (-2.0f64).exp())).ln();
    out.push(CheckResult::new(
        "identity/infonce_hand_case",
        1e-6,
        (t.scalar_value(loss) - oracle).abs(),
    ));

    // single-positive collapse of the three variants
    let mut rng = ChaCha12Rng::seed_from_u64(42);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let g = rng.gen_range(3..8);
        let mut t = Tape::new();
        let embs: Vec<Var> = (0..g)
            .map(|_| {
                let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let l = t.leaf(vec![3], raw, false);
                t.l2_normalize(l).unwrap()
            })
            .collect();
        let sim = similarity_matrix(&mut t, &embs, rng.gen_range(0.02..0.5)).unwrap();
        let a = infonce_anchor_loss(&mut t, sim, 0, 1, false).unwrap();
        let b = supcon_anchor_loss(&mut t, sim, 0, &[0, 1], false).unwrap();
        let c = softnn_anchor_loss(&mut t, sim, 0, &[0, 1], false).unwrap();
        let (av, bv, cv) = (t.scalar_value(a), t.scalar_value(b), t.scalar_value(c));
        worst = worst.max((av - bv).abs()).max((av - cv).abs());
    }
    out.push(CheckResult::new("identity/single_positive_collapse", 1e-12, worst));
}

fn surrogate_equivalence_checks(out: &mut Vec<CheckResult>) {
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    // DAPO(0.2, 0.2, beta=0) vs GRPO(eps=0.2, beta=0)
    let mut worst_dapo = 0.0f64;
    let mut worst_gmpo = 0.0f64;
    let mut worst_gspo = 0.0f64;
    for _ in 0..200 {
        let rows: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..3)
            .map(|_| {
                let len = rng.gen_range(1..5);
                let old: Vec<f64> = (0..len).map(|_| -rng.gen_range(0.05..2.0)).collect();
                let new: Vec<f64> = old.iter().map(|o| o + rng.gen_range(-0.6..0.6)).collect();
                (new, old, rng.gen_range(-2.0..2.0))
            })
            .collect();
        let eval = |cfg: &SurrogateConfig| -> f64 {
            let mut t = Tape::new();
            let items: Vec<SequenceItem> = rows
                .iter()
                .map(|(new, old, adv)| SequenceItem {
                    logp_new: t.leaf(vec![new.len()], new.clone(), false),
                    logp_old: old.clone(),
                    logp_ref: None,
                    advantage: *adv,
                })
                .collect();
            let loss = surrogate_loss(&mut t, &SequenceBatch { items }, cfg).unwrap();
            t.scalar_value(loss)
        };
        let mut dapo = SurrogateConfig::for_method(Method::Dapo);
        dapo.eps_high = 0.2;
        let mut grpo = SurrogateConfig::for_method(Method::Grpo);
        grpo.kl_coef = 0.0;
        worst_dapo = worst_dapo.max((eval(&dapo) - eval(&grpo)).abs());

        // GMPO vs plain-clipped GRPO on length-1 responses
        let rows1: Vec<(Vec<f64>, Vec<f64>, f64)> = rows
            .iter()
            .map(|(new, old, adv)| (vec![new[0]], vec![old[0]], *adv))
            .collect();
        let eval1 = |cfg: &SurrogateConfig| -> f64 {
            let mut t = Tape::new();
            let items: Vec<SequenceItem> = rows1
                .iter()
                .map(|(new, old, adv)| SequenceItem {
                    logp_new: t.leaf(vec![1], new.clone(), false),
                    logp_old: old.clone(),
                    logp_ref: None,
                    advantage: *adv,
                })
                .collect();
            let loss = surrogate_loss(&mut t, &SequenceBatch { items }, cfg).unwrap();
            t.scalar_value(loss)
        };
        let gmpo = SurrogateConfig::for_method(Method::Gmpo);
        let mut grpo04 = SurrogateConfig::for_method(Method::Grpo);
        grpo04.eps_low = 0.4;
        grpo04.eps_high = 0.4;
        grpo04.kl_coef = 0.0;
        grpo04.pessimistic = false;
        worst_gmpo = worst_gmpo.max((eval1(&gmpo) - eval1(&grpo04)).abs());

        // GSPO sequence ratio equals token ratio on length-1
        let delta = rng.gen_range(-0.5..0.5);
        let mut t = Tape::new();
        let item = SequenceItem {
            logp_new: t.leaf(vec![1], vec![-0.5 + delta], false),
            logp_old: vec![-0.5],
            logp_ref: None,
            advantage: 1.0,
        };
        let mut gspo = SurrogateConfig::for_method(Method::Gspo);
        gspo.eps_low = 10.0;
        gspo.eps_high = 10.0;
        let loss = surrogate_loss(&mut t, &SequenceBatch { items: vec![item] }, &gspo).unwrap();
        worst_gspo = worst_gspo.max((t.scalar_value(loss) + delta.exp()).abs());
    }
    out.push(CheckResult::new("surrogate/dapo_equals_grpo_at_eps02", 1e-12, worst_dapo));
    out.push(CheckResult::new("surrogate/gmpo_equals_clipped_grpo_len1", 1e-12, worst_gmpo));
    out.push(CheckResult::new("surrogate/gspo_ratio_equals_token_ratio_len1", 1e-12, worst_gspo));
}

fn hand_traced_step_check(out: &mut Vec<CheckResult>) -> Result<()> {
    let dims = Dims { vocab: 20, dim: 2, heads: 1, layers: 1, ff_mult: 2, max_seq: 48 };
    let policy = PolicyParams::init(dims, 7);
    let mut cfg = TrainConfig::default();
    cfg.contrastive = ContrastiveConfig { tau: 0.5, lambda: 0.2, d: 2, ..Default::default() };
    cfg.sampling.group_size = 4;
    cfg.run.head_warmup_steps = 0;
    cfg.method.kl_coef = 0.0;
    let mut state = RunState::new(policy, &cfg);
    state.head.w = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);

    let inst = tasks::generate(&cfg.tasks.base_family(), 3);
    let pooled = [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]];
    let rewards = [1u8, 1, 0, 0];
    let mut rollouts = Vec::new();
    for (dir, &reward) in pooled.iter().zip(&rewards) {
        let mut tokens = inst.prompt_tokens.clone();
        tokens.extend([tasks::ANS_OPEN, 3, tasks::ANS_CLOSE, tasks::EOS]);
        let hidden = Tensor::matrix(4, 2, dir.iter().cycle().take(8).copied().collect());
        let probe = RolloutRecord {
            prompt_len: inst.prompt_tokens.len(),
            tokens: tokens.clone(),
            response_len: 4,
            response_logprobs: vec![0.0; 4],
            hidden_states: hidden,
            reward,
            truncated: false,
        };
        let mut tape = Tape::new();
        let vars = state.policy.leaves(&mut tape, false);
        let o = logprobs_under(&mut tape, &vars, &dims, &probe)?;
        let lp = tape.value(o.logprobs).to_vec();
        rollouts.push(RolloutRecord { response_logprobs: lp, ..probe });
    }
    let group = RolloutGroup::new(inst, rollouts);
    let stats = step_on_groups(&mut state, &cfg, &[group], 1)?;

    let e2 = (2.0f64).exp();
    let l = (2.0 * e2 + 1.0 + (-2.0f64).exp()).ln() - 2.0;
    let shaped_mean = (2.0 * (1.0 - 0.2 * l)) / 4.0;
    let mut worst = (stats.mean_contrastive_loss.unwrap_or(f64::NAN) - l).abs();
    worst = worst.max((stats.mean_shaped_reward - shaped_mean).abs());
    worst = worst.max((stats.mean_base_reward - 0.5).abs());
    worst = worst.max((stats.mi_lower_bound.unwrap_or(f64::NAN) - ((4.0f64).ln() - l)).abs());
    worst = worst.max(stats.kl_to_ref.abs());
    out.push(CheckResult::new("trace/crafted_step_intermediates", 1e-9, worst));
    Ok(())
}

/// Runs every suite and returns one result per check.
pub fn run_all() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();

    for kind in [LossKind::Infonce, LossKind::Supcon, LossKind::Softnn] {
        out.push(CheckResult::new(
            format!("grad/anchor_{kind:?}_wrt_embeddings").to_lowercase(),
            1e-5,
            anchor_loss_gradient_error(kind, 10, 0.0),
        ));
    }
    out.push(CheckResult::new("grad/head_w", 1e-5, head_gradient_error(10)));
    for method in [Method::Grpo, Method::Gspo, Method::Dapo, Method::Gmpo] {
        out.push(CheckResult::new(
            format!("grad/surrogate_{method:?}_wrt_policy").to_lowercase(),
            1e-5,
            surrogate_gradient_error(method, 5),
        ));
    }
    out.push(CheckResult::new("grad/supervised_ce_wrt_policy", 1e-5, supervised_ce_gradient_error(5)));

    loss_identity_checks(&mut out);
    surrogate_equivalence_checks(&mut out);
    hand_traced_step_check(&mut out)?;
    Ok(out)
}

fn head_gradient_error(seeds: u64) -> f64 {
    use crate::contrastive::{embed_group, ContrastiveHead};
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let head = ContrastiveHead::init(3, 5, seed);
        let policy = PolicyParams::init(
            Dims { vocab: 20, dim: 5, heads: 1, layers: 1, ff_mult: 2, max_seq: 48 },
            seed,
        );
        let group = crafted_group(&policy, &[1, 1, 0, 0], seed);
        let cfg = ContrastiveConfig { tau: 0.5, d: 3, ..Default::default() };
        let eval = |wdata: &[f64]| -> f64 {
            let mut t = Tape::new();
            let w = t.leaf(vec![3, 5], wdata.to_vec(), false);
            let hvars: Vec<Var> =
                group.rollouts.iter().map(|r| t.leaf_tensor(&r.hidden_states)).collect();
            let (_, sim) = embed_group(&mut t, w, &hvars, cfg.tau).unwrap();
            let mut pick = ChaCha12Rng::seed_from_u64(17);
            let (_, losses) = contrastive_rewards(&mut t, sim, &group, &cfg, &mut pick).unwrap();
            let vars: Vec<Var> = losses.iter().map(|&(_, v)| v).collect();
            let all = t.concat_1d(&vars);
            let mean = t.mean(all);
            t.scalar_value(mean)
        };
        let mut t = Tape::new();
        let mut wt = head.w.clone();
        wt.requires_grad = true;
        let w = t.leaf_tensor(&wt);
        let hvars: Vec<Var> =
            group.rollouts.iter().map(|r| t.leaf_tensor(&r.hidden_states)).collect();
        let (_, sim) = embed_group(&mut t, w, &hvars, cfg.tau).unwrap();
        let mut pick = ChaCha12Rng::seed_from_u64(17);
        let (_, losses) = contrastive_rewards(&mut t, sim, &group, &cfg, &mut pick).unwrap();
        let vars: Vec<Var> = losses.iter().map(|&(_, v)| v).collect();
        let all = t.concat_1d(&vars);
        let mean = t.mean(all);
        t.backward(mean).unwrap();
        let analytic = t.grad(w).unwrap().to_vec();
        let coords: Vec<usize> = (0..15).collect();
        let numeric = finite_diff_grad_at(eval, head.w.data(), 1e-6, &coords);
        worst = worst.max(max_rel_error(&analytic, &numeric, &coords));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass_on_fresh_build() {
        let results = run_all().unwrap();
        assert!(results.len() >= 15);
        for r in &results {
            assert!(
                r.pass,
                "check {} failed: measured {:e} > tolerance {:e}",
                r.name, r.measured, r.tolerance
            );
        }
    }

    #[test]
    fn perturbed_gradient_fails_loudly() {
        // negative control: scale the analytic gradient by 1.02 and the
        // checker must flag it
        let err = anchor_loss_gradient_error(LossKind::Infonce, 3, 0.02);
        assert!(err > 1e-3, "perturbed gradient slipped through: {err:e}");
    }
}
