//! Tiny autoregressive policy over the task vocabulary.
//!
//! Two pre-norm causal self-attention blocks (2 heads, GELU feed-forward),
//! exposing both per-token log-probabilities and post-final-norm hidden
//! states. The same tape forward serves training (grad leaves) and sampling
//! (plain leaves), so stored sampling-time log-probabilities and recomputed
//! ones come from one code path.

use crate::error::{CoreError, Result};
use crate::optim::AdamWState;
use crate::rng::{self, Domain};
use crate::tape::{Tape, Var};
use crate::tasks::{self, TaskInstance, TokenId, EOS};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub vocab: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_mult: usize,
    pub max_seq: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims { vocab: 20, dim: 64, heads: 2, layers: 2, ff_mult: 4, max_seq: 96 }
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_ff1: Tensor,
    pub w_ff2: Tensor,
}

#[derive(Debug, Clone)]
pub struct PolicyParams {
    pub dims: Dims,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<BlockParams>,
    pub lnf_gain: Tensor,
    pub lnf_bias: Tensor,
    pub w_out: Tensor,
}

fn randn(rng: &mut ChaCha12Rng) -> f64 {
    // Box-Muller; u1 kept strictly positive
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn init_matrix(rng: &mut ChaCha12Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| randn(rng) * scale).collect();
    Tensor::matrix(rows, cols, data)
}

impl PolicyParams {
    /// Deterministic initialization: weights at 1/sqrt(D), norm gains 1 and
    /// offsets 0. The output projection starts at 1/D so a fresh policy is
    /// near-uniform over the vocabulary.
    pub fn init(dims: Dims, seed: u64) -> Self {
        assert!(dims.dim % dims.heads == 0, "dim must be divisible by head count");
        let mut rng = rng::stream(seed, Domain::Init, &[]);
        let s = 1.0 / (dims.dim as f64).sqrt();
        let d = dims.dim;
        let blocks = (0..dims.layers)
            .map(|_| BlockParams {
                ln1_gain: Tensor::vector(vec![1.0; d]),
                ln1_bias: Tensor::vector(vec![0.0; d]),
                wq: init_matrix(&mut rng, d, d, s),
                wk: init_matrix(&mut rng, d, d, s),
                wv: init_matrix(&mut rng, d, d, s),
                wo: init_matrix(&mut rng, d, d, s),
                ln2_gain: Tensor::vector(vec![1.0; d]),
                ln2_bias: Tensor::vector(vec![0.0; d]),
                w_ff1: init_matrix(&mut rng, d, d * dims.ff_mult, s),
                w_ff2: init_matrix(&mut rng, d * dims.ff_mult, d, s),
            })
            .collect();
        PolicyParams {
            dims,
            tok_emb: init_matrix(&mut rng, dims.vocab, d, s),
            pos_emb: init_matrix(&mut rng, dims.max_seq, d, s),
            blocks,
            lnf_gain: Tensor::vector(vec![1.0; d]),
            lnf_bias: Tensor::vector(vec![0.0; d]),
            w_out: init_matrix(&mut rng, d, dims.vocab, 1.0 / d as f64),
        }
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Declared checkpoint/optimizer order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.ln1_gain"), &b.ln1_gain));
            out.push((format!("block{i}.ln1_bias"), &b.ln1_bias));
            out.push((format!("block{i}.wq"), &b.wq));
            out.push((format!("block{i}.wk"), &b.wk));
            out.push((format!("block{i}.wv"), &b.wv));
            out.push((format!("block{i}.wo"), &b.wo));
            out.push((format!("block{i}.ln2_gain"), &b.ln2_gain));
            out.push((format!("block{i}.ln2_bias"), &b.ln2_bias));
            out.push((format!("block{i}.w_ff1"), &b.w_ff1));
            out.push((format!("block{i}.w_ff2"), &b.w_ff2));
        }
        out.push(("lnf_gain".into(), &self.lnf_gain));
        out.push(("lnf_bias".into(), &self.lnf_bias));
        out.push(("w_out".into(), &self.w_out));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.ln1_gain"), &mut b.ln1_gain));
            out.push((format!("block{i}.ln1_bias"), &mut b.ln1_bias));
            out.push((format!("block{i}.wq"), &mut b.wq));
            out.push((format!("block{i}.wk"), &mut b.wk));
            out.push((format!("block{i}.wv"), &mut b.wv));
            out.push((format!("block{i}.wo"), &mut b.wo));
            out.push((format!("block{i}.ln2_gain"), &mut b.ln2_gain));
            out.push((format!("block{i}.ln2_bias"), &mut b.ln2_bias));
            out.push((format!("block{i}.w_ff1"), &mut b.w_ff1));
            out.push((format!("block{i}.w_ff2"), &mut b.w_ff2));
        }
        out.push(("lnf_gain".into(), &mut self.lnf_gain));
        out.push(("lnf_bias".into(), &mut self.lnf_bias));
        out.push(("w_out".into(), &mut self.w_out));
        out
    }

    pub fn shapes(&self) -> Vec<usize> {
        self.named_tensors().iter().map(|(_, t)| t.len()).collect()
    }

    /// FNV-1a over the raw parameter bytes, for change-detection contracts.
    pub fn params_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (_, t) in self.named_tensors() {
            for x in t.data() {
                for b in x.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    /// Inserts every parameter as a tape leaf.
    pub fn leaves(&self, tape: &mut Tape, trainable: bool) -> PolicyVars {
        let mut leaf = |t: &Tensor| tape.leaf(t.shape().to_vec(), t.data().to_vec(), trainable);
        PolicyVars {
            tok_emb: leaf(&self.tok_emb),
            pos_emb: leaf(&self.pos_emb),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockVars {
                    ln1_gain: leaf(&b.ln1_gain),
                    ln1_bias: leaf(&b.ln1_bias),
                    wq: leaf(&b.wq),
                    wk: leaf(&b.wk),
                    wv: leaf(&b.wv),
                    wo: leaf(&b.wo),
                    ln2_gain: leaf(&b.ln2_gain),
                    ln2_bias: leaf(&b.ln2_bias),
                    w_ff1: leaf(&b.w_ff1),
                    w_ff2: leaf(&b.w_ff2),
                })
                .collect(),
            lnf_gain: leaf(&self.lnf_gain),
            lnf_bias: leaf(&self.lnf_bias),
            w_out: leaf(&self.w_out),
        }
    }

    /// Copies tape gradients back into the parameter grad buffers, in the
    /// same declared order as [`PolicyVars::ordered`].
    pub fn absorb_grads(&mut self, tape: &Tape, vars: &PolicyVars) {
        let order = vars.ordered();
        for ((_, t), v) in self.named_tensors_mut().into_iter().zip(order) {
            let g = tape.grad(v).expect("trainable leaf without gradient");
            match &mut t.grad {
                Some(buf) => buf.copy_from_slice(g),
                None => t.grad = Some(g.to_vec()),
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for (_, t) in self.named_tensors_mut() {
            t.clear_grad();
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub w_ff1: Var,
    pub w_ff2: Var,
}

#[derive(Debug, Clone)]
pub struct PolicyVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub blocks: Vec<BlockVars>,
    pub lnf_gain: Var,
    pub lnf_bias: Var,
    pub w_out: Var,
}

impl PolicyVars {
    fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for b in &self.blocks {
            out.extend([
                b.ln1_gain, b.ln1_bias, b.wq, b.wk, b.wv, b.wo, b.ln2_gain, b.ln2_bias, b.w_ff1,
                b.w_ff2,
            ]);
        }
        out.extend([self.lnf_gain, self.lnf_bias, self.w_out]);
        out
    }
}

/// Causal forward pass. Returns `(logits [T x V], hidden [T x D])` where the
/// hidden states are the post-final-norm representations feeding the output
/// projection.
pub fn forward(
    tape: &mut Tape,
    vars: &PolicyVars,
    dims: &Dims,
    tokens: &[TokenId],
) -> Result<(Var, Var)> {
    let t_len = tokens.len();
    if t_len == 0 {
        return Err(CoreError::Contract { op: "forward", detail: "empty token sequence".into() });
    }
    if t_len > dims.max_seq {
        return Err(CoreError::LengthExceeded { len: t_len, max: dims.max_seq });
    }
    let tok = tape.gather_rows(vars.tok_emb, tokens)?;
    let pos = tape.slice_rows(vars.pos_emb, 0, t_len)?;
    let mut x = tape.add(tok, pos)?;
    let dh = dims.dim / dims.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for b in &vars.blocks {
        let normed = tape.layer_norm_rows(x, LN_EPS)?;
        let gained = tape.mul_row(normed, b.ln1_gain)?;
        let a = tape.add_row(gained, b.ln1_bias)?;
        let q = tape.matmul(a, b.wq)?;
        let k = tape.matmul(a, b.wk)?;
        let v = tape.matmul(a, b.wv)?;
        let mut heads = Vec::with_capacity(dims.heads);
        for h in 0..dims.heads {
            let qs = tape.slice_cols(q, h * dh, (h + 1) * dh)?;
            let ks = tape.slice_cols(k, h * dh, (h + 1) * dh)?;
            let vs = tape.slice_cols(v, h * dh, (h + 1) * dh)?;
            let scores = tape.matmul_nt(qs, ks)?;
            let scaled = tape.scale(scores, scale);
            let weights = tape.causal_softmax_rows(scaled)?;
            heads.push(tape.matmul(weights, vs)?);
        }
        let ctx = tape.concat_cols(&heads)?;
        let attn = tape.matmul(ctx, b.wo)?;
        x = tape.add(x, attn)?;
        let normed2 = tape.layer_norm_rows(x, LN_EPS)?;
        let gained2 = tape.mul_row(normed2, b.ln2_gain)?;
        let a2 = tape.add_row(gained2, b.ln2_bias)?;
        let f1 = tape.matmul(a2, b.w_ff1)?;
        let act = tape.gelu(f1);
        let f2 = tape.matmul(act, b.w_ff2)?;
        x = tape.add(x, f2)?;
    }
    let fin = tape.layer_norm_rows(x, LN_EPS)?;
    let gained = tape.mul_row(fin, vars.lnf_gain)?;
    let hidden = tape.add_row(gained, vars.lnf_bias)?;
    let logits = tape.matmul(hidden, vars.w_out)?;
    Ok((logits, hidden))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_response_len: usize,
    pub group_size: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { temperature: 1.0, top_p: 1.0, max_response_len: 12, group_size: 16 }
    }
}

/// One sampled response: full token sequence, sampling-time response
/// log-probabilities, and the response-position hidden states.
#[derive(Debug, Clone)]
pub struct RolloutRecord {
    pub prompt_len: usize,
    /// Prompt followed by the sampled response; may carry trailing PAD that is
    /// not counted as response.
    pub tokens: Vec<TokenId>,
    pub response_len: usize,
    pub response_logprobs: Vec<f64>,
    /// `response_len x D`, detached.
    pub hidden_states: Tensor,
    pub reward: u8,
    pub truncated: bool,
}

impl RolloutRecord {
    /// Positions of counted response tokens within `tokens`.
    pub fn response_positions(&self) -> std::ops::Range<usize> {
        self.prompt_len..self.prompt_len + self.response_len
    }

    pub fn response_tokens(&self) -> &[TokenId] {
        &self.tokens[self.response_positions()]
    }
}

#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub instance: TaskInstance,
    pub rollouts: Vec<RolloutRecord>,
    pub positive_indices: Vec<usize>,
}

impl RolloutGroup {
    pub fn new(instance: TaskInstance, rollouts: Vec<RolloutRecord>) -> Self {
        let positive_indices = Self::positives_of(&rollouts);
        RolloutGroup { instance, rollouts, positive_indices }
    }

    fn positives_of(rollouts: &[RolloutRecord]) -> Vec<usize> {
        rollouts
            .iter()
            .enumerate()
            .filter_map(|(i, r)| (r.reward == 1).then_some(i))
            .collect()
    }

    /// Recomputes the positive set from rewards; the cached field must never
    /// go stale.
    pub fn refresh_positives(&mut self) {
        self.positive_indices = Self::positives_of(&self.rollouts);
    }

    pub fn size(&self) -> usize {
        self.rollouts.len()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.reward as f64).collect()
    }
}

/// Temperature / top-p draw from one raw logits row. The returned logprob is
/// the raw (untempered) policy log-probability of the chosen token.
fn sample_from_row(
    logits: &[f64],
    temperature: f64,
    top_p: f64,
    rng: &mut ChaCha12Rng,
) -> (TokenId, f64) {
    assert!(temperature > 0.0, "temperature must be positive");
    assert!(top_p > 0.0 && top_p <= 1.0, "top_p must lie in (0, 1]");
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = logits.iter().map(|&l| ((l - m) / temperature).exp()).collect();
    let z: f64 = scaled.iter().sum();
    let mut probs: Vec<(usize, f64)> =
        scaled.iter().enumerate().map(|(i, &p)| (i, p / z)).collect();

    if top_p < 1.0 {
        probs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut cum = 0.0;
        let mut keep = probs.len();
        for (i, &(_, p)) in probs.iter().enumerate() {
            cum += p;
            if cum >= top_p {
                keep = i + 1;
                break;
            }
        }
        probs.truncate(keep);
        let z: f64 = probs.iter().map(|&(_, p)| p).sum();
        probs.iter_mut().for_each(|e| e.1 /= z);
    }

    let draw: f64 = rng.gen();
    let mut cum = 0.0;
    let mut chosen = probs.last().unwrap().0;
    for &(i, p) in &probs {
        cum += p;
        if draw < cum {
            chosen = i;
            break;
        }
    }

    // raw log-probability, independent of the sampling temperature
    let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
    (chosen, logits[chosen] - lse)
}

fn sample_one(
    params: &PolicyParams,
    instance: &TaskInstance,
    cfg: &SamplingConfig,
    rng: &mut ChaCha12Rng,
) -> Result<RolloutRecord> {
    let mut tape = Tape::new();
    let vars = params.leaves(&mut tape, false);
    let prompt_len = instance.prompt_tokens.len();
    let mut tokens = instance.prompt_tokens.clone();
    let mut logprobs = Vec::new();
    let mut truncated = true;

    for _ in 0..cfg.max_response_len {
        let (logits, _) = forward(&mut tape, &vars, &params.dims, &tokens)?;
        let cols = params.dims.vocab;
        let last_row = &tape.value(logits)[(tokens.len() - 1) * cols..tokens.len() * cols];
        let (tok, lp) = sample_from_row(last_row, cfg.temperature, cfg.top_p, rng);
        tokens.push(tok);
        logprobs.push(lp);
        if tok == EOS {
            truncated = false;
            break;
        }
    }

    let (_, hidden) = forward(&mut tape, &vars, &params.dims, &tokens)?;
    let response_len = tokens.len() - prompt_len;
    if response_len == 0 {
        return Err(CoreError::DegenerateRollout);
    }
    let d = params.dims.dim;
    let rows = &tape.value(hidden)[prompt_len * d..tokens.len() * d];
    let hidden_states = Tensor::matrix(response_len, d, rows.to_vec());
    let reward = tasks::verify(instance, &tokens[prompt_len..]);
    Ok(RolloutRecord {
        prompt_len,
        tokens,
        response_len,
        response_logprobs: logprobs,
        hidden_states,
        reward,
        truncated,
    })
}

/// Samples `G` independent rollouts for one prompt. Each member draws from a
/// stream derived from `(stream_seed, member index)`, so results do not
/// depend on scheduling order.
pub fn sample_group(
    params: &PolicyParams,
    instance: &TaskInstance,
    cfg: &SamplingConfig,
    stream_seed: u64,
) -> Result<RolloutGroup> {
    assert!(cfg.group_size >= 2, "group size must be at least 2");
    let mut rollouts = Vec::with_capacity(cfg.group_size);
    for member in 0..cfg.group_size {
        let mut rng = rng::stream(stream_seed, Domain::Rollout, &[member as u64]);
        rollouts.push(sample_one(params, instance, cfg, &mut rng)?);
    }
    Ok(RolloutGroup::new(instance.clone(), rollouts))
}

/// Samples a single response (used by evaluation).
pub fn sample_response(
    params: &PolicyParams,
    instance: &TaskInstance,
    cfg: &SamplingConfig,
    rng: &mut ChaCha12Rng,
) -> Result<RolloutRecord> {
    sample_one(params, instance, cfg, rng)
}

/// Differentiable recomputation of response-token log-probabilities under the
/// current parameters. Tokens past `response_len` (trailing PAD) contribute
/// nothing.
pub fn logprobs_under(
    tape: &mut Tape,
    vars: &PolicyVars,
    dims: &Dims,
    record: &RolloutRecord,
) -> Result<LogprobsOut> {
    let counted = record.prompt_len + record.response_len;
    let (logits, hidden) = forward(tape, vars, dims, &record.tokens)?;
    let logp = tape.log_softmax_rows(logits)?;
    let entries: Vec<(usize, usize)> = record
        .response_positions()
        .map(|p| (p - 1, record.tokens[p]))
        .collect();
    let picked = tape.gather_entries(logp, &entries)?;
    let hidden_resp = tape.slice_rows(hidden, record.prompt_len, counted)?;
    Ok(LogprobsOut { logprobs: picked, hidden: hidden_resp })
}

pub struct LogprobsOut {
    /// `[response_len]` log pi(token | prefix) under current params.
    pub logprobs: Var,
    /// `[response_len x D]` hidden states at response positions.
    pub hidden: Var,
}

/// Cross-entropy warm-up on (prompt, gold response) pairs; response tokens
/// only. Returns the per-step loss curve.
pub fn supervised_pretrain(
    params: &mut PolicyParams,
    corpus: &[TaskInstance],
    steps: usize,
    lr: f64,
    batch: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Ok(Vec::new());
    }
    assert!(!corpus.is_empty(), "pretrain corpus is empty");
    let mut opt = AdamWState::new(lr, 0.0, &params.shapes());
    let mut curve = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut rng = rng::stream(seed, Domain::Pretrain, &[step as u64]);
        let mut tape = Tape::new();
        let vars = params.leaves(&mut tape, true);
        let mut seq_losses = Vec::with_capacity(batch);
        let mut token_count = 0usize;
        for _ in 0..batch {
            let inst = &corpus[rng.gen_range(0..corpus.len())];
            let mut tokens = inst.prompt_tokens.clone();
            let gold = tasks::gold_response(inst);
            tokens.extend(&gold);
            let (logits, _) = forward(&mut tape, &vars, &params.dims, &tokens)?;
            let logp = tape.log_softmax_rows(logits)?;
            let entries: Vec<(usize, usize)> = (inst.prompt_tokens.len()..tokens.len())
                .map(|p| (p - 1, tokens[p]))
                .collect();
            token_count += entries.len();
            let picked = tape.gather_entries(logp, &entries)?;
            seq_losses.push(tape.sum(picked));
        }
        let total = tape.concat_1d(&seq_losses);
        let summed = tape.sum(total);
        let loss = tape.scale(summed, -1.0 / token_count as f64);
        tape.backward(loss)?;
        params.absorb_grads(&tape, &vars);
        let mut named = params.named_tensors_mut();
        let mut refs: Vec<&mut Tensor> = named.iter_mut().map(|(_, t)| &mut **t).collect();
        opt.step_params(&mut refs)?;
        params.clear_grads();
        curve.push(tape.scalar_value(loss));
    }
    Ok(curve)
}


#[cfg(test)]
impl PolicyVars {
    fn wq_of(&self, block: usize) -> Var {
        self.blocks[block].wq
    }
}
