//! Contrastive trajectory embeddings and reward shaping.
//!
//! Rollout hidden states are mean-pooled, projected through a linear head,
//! and L2-normalized. Within each rollout group, correct responses anchor a
//! contrastive loss (InfoNCE with one sampled positive, or SupCon / SoftNN
//! over all positives) against the scaled similarity matrix. The negated,
//! scaled, floor-clipped loss becomes a dense reward added to the verifiable
//! reward. Groups without both a positive pair and at least one negative are
//! gated out entirely.

use crate::error::{CoreError, Result};
use crate::optim::AdamWState;
use crate::policy::RolloutGroup;
use crate::rng::{self, Domain};
use crate::tape::{Tape, Var};
use crate::tensor::{cosine, Tensor};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Infonce,
    Supcon,
    Softnn,
}

impl LossKind {
    /// Paper-reported reward coefficient per loss kind.
    pub fn default_lambda(self) -> f64 {
        match self {
            LossKind::Infonce | LossKind::Supcon => 0.2,
            LossKind::Softnn => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub lambda: f64,
    pub loss_kind: LossKind,
    pub clip_floor: f64,
    /// Embedding dimension d.
    pub d: usize,
    /// Drop the j = i term from the loss denominator (SimCLR-style) instead
    /// of the literal self-inclusive sum.
    pub exclude_self: bool,
    /// Route anchor-loss gradients into the policy backbone as well as the
    /// head. Off by default: the policy feels the contrastive signal only
    /// through the shaped reward.
    pub backprop_into_policy: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            tau: 0.05,
            lambda: 0.2,
            loss_kind: LossKind::Infonce,
            clip_floor: -0.5,
            d: 32,
            exclude_self: false,
            backprop_into_policy: false,
        }
    }
}

impl ContrastiveConfig {
    pub fn for_kind(kind: LossKind) -> Self {
        ContrastiveConfig {
            loss_kind: kind,
            lambda: kind.default_lambda(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.tau > 0.0) {
            problems.push(format!("tau must be positive, got {}", self.tau));
        }
        if self.lambda < 0.0 {
            problems.push(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.clip_floor > 0.0 {
            problems.push(format!("clip_floor must be <= 0, got {}", self.clip_floor));
        }
        if self.d == 0 {
            problems.push("embedding dimension d must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Config(problems))
        }
    }
}

/// Linear projection `W in R^{d x D}` with its own AdamW state.
#[derive(Debug, Clone)]
pub struct ContrastiveHead {
    pub w: Tensor,
    pub adamw: AdamWState,
    pub frozen: bool,
}

impl ContrastiveHead {
    pub const LR: f64 = 1e-3;
    pub const WEIGHT_DECAY: f64 = 0.01;

    pub fn init(d: usize, input_dim: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, Domain::Init, &[0xC0]);
        let scale = 1.0 / (input_dim as f64).sqrt();
        let data = (0..d * input_dim)
            .map(|_| {
                let u1: f64 = 1.0 - rng.gen::<f64>();
                let u2: f64 = rng.gen();
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * scale
            })
            .collect();
        ContrastiveHead {
            w: Tensor::matrix(d, input_dim, data),
            adamw: AdamWState::new(Self::LR, Self::WEIGHT_DECAY, &[d * input_dim]),
            frozen: false,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for x in self.w.data() {
            for b in x.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

/// Mean pooling across the sequence axis of `T x D` hidden states.
pub fn pool(tape: &mut Tape, hidden: Var) -> Result<Var> {
    if tape.shape(hidden)[0] == 0 {
        return Err(CoreError::DegenerateRollout);
    }
    tape.mean_axis0(hidden)
}

/// `l2_normalize(W . pooled)`.
pub fn embed(tape: &mut Tape, w: Var, pooled: Var) -> Result<Var> {
    let projected = tape.matmul_nt(w, pooled)?; // [d x 1]
    tape.l2_normalize(projected)
}

/// Scaled similarity matrix `s_ij = e_i . e_j / tau` from unit-norm rows.
pub fn similarity_matrix(tape: &mut Tape, embeddings: &[Var], tau: f64) -> Result<Var> {
    let stacked = tape.stack_rows(embeddings)?;
    let raw = tape.matmul_nt(stacked, stacked)?;
    Ok(tape.scale(raw, 1.0 / tau))
}

/// Uniform draw from `positives \ {anchor}`.
pub fn select_positive(
    anchor: usize,
    positives: &[usize],
    rng: &mut ChaCha12Rng,
) -> Result<usize> {
    if !positives.contains(&anchor) {
        return Err(CoreError::InvalidAnchor(format!(
            "anchor {anchor} not in positive set {positives:?}"
        )));
    }
    let others: Vec<usize> = positives.iter().copied().filter(|&p| p != anchor).collect();
    if others.is_empty() {
        return Err(CoreError::InvalidAnchor(format!(
            "anchor {anchor} has no positive partner"
        )));
    }
    Ok(others[rng.gen_range(0..others.len())])
}

fn row_entries(g: usize, i: usize, exclude_self: bool) -> Vec<(usize, usize)> {
    (0..g)
        .filter(|&j| !(exclude_self && j == i))
        .map(|j| (i, j))
        .collect()
}

/// `-log softmax` of the positive's similarity over anchor row `i`; the
/// denominator runs over all group members (including j = i unless
/// `exclude_self`).
pub fn infonce_anchor_loss(
    tape: &mut Tape,
    sim: Var,
    anchor: usize,
    positive: usize,
    exclude_self: bool,
) -> Result<Var> {
    if anchor == positive {
        return Err(CoreError::Contract {
            op: "infonce_anchor_loss",
            detail: format!("anchor {anchor} equals positive"),
        });
    }
    let g = tape.shape(sim)[0];
    let row = tape.gather_entries(sim, &row_entries(g, anchor, exclude_self))?;
    let lse = tape.logsumexp(row);
    let pos = tape.gather_entries(sim, &[(anchor, positive)])?;
    tape.sub(lse, pos)
}

/// Mean over positives of the per-positive log-softmax terms.
pub fn supcon_anchor_loss(
    tape: &mut Tape,
    sim: Var,
    anchor: usize,
    positives: &[usize],
    exclude_self: bool,
) -> Result<Var> {
    let others: Vec<usize> = positives.iter().copied().filter(|&p| p != anchor).collect();
    if others.is_empty() {
        return Err(CoreError::InvalidAnchor(format!(
            "anchor {anchor} has an empty positive set"
        )));
    }
    let g = tape.shape(sim)[0];
    let row = tape.gather_entries(sim, &row_entries(g, anchor, exclude_self))?;
    let lse = tape.logsumexp(row);
    let pos_entries: Vec<(usize, usize)> = others.iter().map(|&p| (anchor, p)).collect();
    let pos = tape.gather_entries(sim, &pos_entries)?;
    let pos_mean = tape.mean(pos);
    tape.sub(lse, pos_mean)
}

/// Log of summed positive mass over total mass.
pub fn softnn_anchor_loss(
    tape: &mut Tape,
    sim: Var,
    anchor: usize,
    positives: &[usize],
    exclude_self: bool,
) -> Result<Var> {
    let others: Vec<usize> = positives.iter().copied().filter(|&p| p != anchor).collect();
    if others.is_empty() {
        return Err(CoreError::InvalidAnchor(format!(
            "anchor {anchor} has an empty positive set"
        )));
    }
    let g = tape.shape(sim)[0];
    let row = tape.gather_entries(sim, &row_entries(g, anchor, exclude_self))?;
    let lse_all = tape.logsumexp(row);
    let pos_entries: Vec<(usize, usize)> = others.iter().map(|&p| (anchor, p)).collect();
    let pos = tape.gather_entries(sim, &pos_entries)?;
    let lse_pos = tape.logsumexp(pos);
    tape.sub(lse_all, lse_pos)
}

/// Contrastive shaping applies only when the group has both a positive pair
/// and at least one negative: `1 < |P| < G`.
pub fn group_gate(group: &RolloutGroup) -> bool {
    let p = group.positive_indices.len();
    1 < p && p < group.size()
}

/// Per-rollout shaped rewards `r' = r + r_cl` with clip provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapedRewardSet {
    pub base: Vec<f64>,
    pub contrastive: Vec<f64>,
    pub total: Vec<f64>,
    pub group_valid: bool,
    pub clipped_mask: Vec<bool>,
}

impl ShapedRewardSet {
    pub fn pass_through(base: Vec<f64>) -> Self {
        let n = base.len();
        ShapedRewardSet {
            contrastive: vec![0.0; n],
            total: base.clone(),
            base,
            group_valid: false,
            clipped_mask: vec![false; n],
        }
    }
}

/// Losses retained for the head update, tagged by anchor index.
pub type AnchorLosses = Vec<(usize, Var)>;

/// Embeds every rollout of a group on the given tape and returns the
/// embedding vars plus the scaled similarity matrix.
pub fn embed_group(
    tape: &mut Tape,
    w: Var,
    hidden_vars: &[Var],
    tau: f64,
) -> Result<(Vec<Var>, Var)> {
    let mut embs = Vec::with_capacity(hidden_vars.len());
    for &h in hidden_vars {
        let pooled = pool(tape, h)?;
        embs.push(embed(tape, w, pooled)?);
    }
    let sim = similarity_matrix(tape, &embs, tau)?;
    Ok((embs, sim))
}

/// Computes anchor losses and clipped contrastive rewards for one group.
///
/// Gated-out groups return a pass-through reward set and no anchor losses.
/// For valid groups every CORRECT rollout is an anchor (InfoNCE draws one
/// positive partner from `pick_rng`); incorrect rollouts keep `r_cl = 0`.
pub fn contrastive_rewards(
    tape: &mut Tape,
    sim: Var,
    group: &RolloutGroup,
    cfg: &ContrastiveConfig,
    pick_rng: &mut ChaCha12Rng,
) -> Result<(ShapedRewardSet, AnchorLosses)> {
    let base = group.rewards();
    if !group_gate(group) {
        return Ok((ShapedRewardSet::pass_through(base), Vec::new()));
    }
    let g = group.size();
    let positives = &group.positive_indices;
    let mut contrastive = vec![0.0; g];
    let mut clipped = vec![false; g];
    let mut losses = Vec::with_capacity(positives.len());
    for &i in positives {
        let loss = match cfg.loss_kind {
            LossKind::Infonce => {
                let p = select_positive(i, positives, pick_rng)?;
                infonce_anchor_loss(tape, sim, i, p, cfg.exclude_self)?
            }
            LossKind::Supcon => supcon_anchor_loss(tape, sim, i, positives, cfg.exclude_self)?,
            LossKind::Softnn => softnn_anchor_loss(tape, sim, i, positives, cfg.exclude_self)?,
        };
        let value = tape.scalar_value(loss);
        let raw = -cfg.lambda * value;
        if raw < cfg.clip_floor {
            contrastive[i] = cfg.clip_floor;
            clipped[i] = true;
        } else {
            contrastive[i] = raw;
        }
        losses.push((i, loss));
    }
    let total: Vec<f64> = base.iter().zip(&contrastive).map(|(b, c)| b + c).collect();
    Ok((
        ShapedRewardSet { base, contrastive, total, group_valid: true, clipped_mask: clipped },
        losses,
    ))
}

/// One AdamW step on W against the mean of the provided losses. An empty list
/// or a frozen head leaves W untouched bit-exactly.
pub fn head_update(
    head: &mut ContrastiveHead,
    tape: &mut Tape,
    w_var: Var,
    losses: &[Var],
) -> Result<()> {
    if losses.is_empty() || head.frozen {
        return Ok(());
    }
    let stacked = tape.concat_1d(losses);
    let mean = tape.mean(stacked);
    tape.backward(mean)?;
    let g = tape
        .grad(w_var)
        .ok_or_else(|| CoreError::OptimizerContract("head leaf has no gradient".into()))?;
    head.w.grad = Some(g.to_vec());
    let mut w = std::mem::replace(&mut head.w, Tensor::zeros(vec![0]));
    let result = head.adamw.step_params(&mut [&mut w]);
    head.w = w;
    head.w.clear_grad();
    result
}

/// `ln(G) - mean anchor loss`, the InfoNCE lower bound on the mutual
/// information between positive pairs.
pub fn mi_lower_bound(mean_anchor_loss: f64, group_size: usize) -> f64 {
    assert!(group_size >= 2, "group size must be at least 2");
    (group_size as f64).ln() - mean_anchor_loss
}

/// Plain-value embedding snapshot of one group.
#[derive(Debug, Clone)]
pub struct GroupEmbeddings {
    /// `G x d`, unit-norm rows.
    pub embeddings: Tensor,
    /// `G x G` scaled similarities.
    pub sim: Tensor,
}

impl GroupEmbeddings {
    pub fn from_tape(tape: &Tape, emb_vars: &[Var], sim: Var) -> Self {
        let d = tape.value(emb_vars[0]).len();
        let mut data = Vec::with_capacity(emb_vars.len() * d);
        for &e in emb_vars {
            data.extend_from_slice(tape.value(e));
        }
        let g = emb_vars.len();
        GroupEmbeddings {
            embeddings: Tensor::matrix(g, d, data),
            sim: Tensor::matrix(g, g, tape.value(sim).to_vec()),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.embeddings.cols();
        &self.embeddings.data()[i * d..(i + 1) * d]
    }
}

/// Average cosine over unordered positive pairs; needs at least two positives.
pub fn mean_positive_pair_cosine(embs: &GroupEmbeddings, positives: &[usize]) -> Option<f64> {
    if positives.len() < 2 {
        return None;
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (a, &i) in positives.iter().enumerate() {
        for &j in &positives[a + 1..] {
            total += cosine(embs.row(i), embs.row(j));
            count += 1;
        }
    }
    Some(total / count as f64)
}

/// Average cosine across positive-negative pairs.
pub fn mean_pos_neg_cosine(
    embs: &GroupEmbeddings,
    positives: &[usize],
    group_size: usize,
) -> Option<f64> {
    let negatives: Vec<usize> =
        (0..group_size).filter(|i| !positives.contains(i)).collect();
    if positives.is_empty() || negatives.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for &i in positives {
        for &j in &negatives {
            total += cosine(embs.row(i), embs.row(j));
        }
    }
    Some(total / (positives.len() * negatives.len()) as f64)
}
