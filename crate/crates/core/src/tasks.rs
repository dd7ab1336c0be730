//! Synthetic verifiable-reasoning tasks.
//!
//! Each task is a modular-arithmetic expression rendered as a token sequence;
//! the answer is the expression's value reduced into `[0, modulus)`. A
//! rule-based verifier checks the integer spelled between answer markers in a
//! response. Families tune difficulty (operand count/range) and distribution
//! shift (distractor clauses), standing in for a base benchmark and its
//! perturbed variants.

use crate::error::{CoreError, Result};
use crate::rng::{self, Domain};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::{BufRead, Write};

pub type TokenId = usize;

/// Fixed token inventory: digits, operators, and structural markers.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<&'static str>,
}

pub const DIGIT_BASE: TokenId = 0; // ids 0..=9 are the digits
pub const PLUS: TokenId = 10;
pub const MINUS: TokenId = 11;
pub const TIMES: TokenId = 12;
pub const MOD: TokenId = 13;
pub const SEP: TokenId = 14;
pub const PROMPT_END: TokenId = 15;
pub const ANS_OPEN: TokenId = 16;
pub const ANS_CLOSE: TokenId = 17;
pub const EOS: TokenId = 18;
pub const PAD: TokenId = 19;

impl Vocabulary {
    pub fn standard() -> Self {
        Vocabulary {
            tokens: vec![
                "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "+", "-", "*", "mod", ";",
                "<p>", "<a>", "</a>", "<eos>", "<pad>",
            ],
        }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token_str(&self, id: TokenId) -> &str {
        self.tokens[id]
    }

    pub fn is_digit(&self, id: TokenId) -> bool {
        id < 10
    }

    /// FNV-1a over the token strings; stored in checkpoints to reject loads
    /// against a different vocabulary.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for t in &self.tokens {
            for b in t.bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            h ^= 0xff;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&i| self.tokens[i]).collect::<Vec<_>>().join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyLabel {
    Base,
    Perturbed1,
    Perturbed2,
}

impl FamilyLabel {
    fn tag(self) -> u64 {
        match self {
            FamilyLabel::Base => 0,
            FamilyLabel::Perturbed1 => 1,
            FamilyLabel::Perturbed2 => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskFamily {
    pub n_operands: usize,
    /// Inclusive upper bound for sampled operands.
    pub operand_max: u64,
    pub modulus: u64,
    /// Irrelevant numeric clauses appended after the real expression.
    pub distractor_clauses: usize,
    pub label: FamilyLabel,
}

impl TaskFamily {
    /// Worst-case rendered prompt length, for context-window budgeting.
    pub fn max_prompt_len(&self) -> usize {
        let dlen = |n: u64| digits_of(n).len();
        let operand = dlen(self.operand_max);
        self.n_operands * operand
            + self.n_operands.saturating_sub(1)
            + 1
            + dlen(self.modulus)
            + self.distractor_clauses * (2 + 2 * operand)
            + 1
    }

    fn tags(&self) -> [u64; 5] {
        [
            self.n_operands as u64,
            self.operand_max,
            self.modulus,
            self.distractor_clauses as u64,
            self.label.tag(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub prompt_tokens: Vec<TokenId>,
    pub answer: i64,
    pub family_id: FamilyLabel,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinOp {
    Plus,
    Minus,
    Times,
}

impl BinOp {
    fn token(self) -> TokenId {
        match self {
            BinOp::Plus => PLUS,
            BinOp::Minus => MINUS,
            BinOp::Times => TIMES,
        }
    }
}

fn digits_of(mut n: u64) -> Vec<TokenId> {
    if n == 0 {
        return vec![DIGIT_BASE];
    }
    let mut ds = Vec::new();
    while n > 0 {
        ds.push((n % 10) as TokenId);
        n /= 10;
    }
    ds.reverse();
    ds
}

/// Standard precedence: multiplication binds tighter, +/- left to right.
fn eval_expression(operands: &[i64], ops: &[BinOp]) -> i64 {
    debug_assert_eq!(operands.len(), ops.len() + 1);
    let mut terms: Vec<i64> = vec![operands[0]];
    let mut signs: Vec<i64> = vec![1];
    for (i, op) in ops.iter().enumerate() {
        let rhs = operands[i + 1];
        match op {
            BinOp::Times => {
                let last = terms.last_mut().unwrap();
                *last *= rhs;
            }
            BinOp::Plus => {
                terms.push(rhs);
                signs.push(1);
            }
            BinOp::Minus => {
                terms.push(rhs);
                signs.push(-1);
            }
        }
    }
    terms.iter().zip(&signs).map(|(t, s)| t * s).sum()
}

/// Deterministic per `(family, seed)`.
pub fn generate(family: &TaskFamily, seed: u64) -> TaskInstance {
    let mut rng = rng::stream(seed, Domain::TaskGen, &family.tags());
    let ops_pool = [BinOp::Plus, BinOp::Minus, BinOp::Times];

    let operands: Vec<i64> =
        (0..family.n_operands).map(|_| rng.gen_range(0..=family.operand_max) as i64).collect();
    let ops: Vec<BinOp> = (0..family.n_operands.saturating_sub(1))
        .map(|_| ops_pool[rng.gen_range(0..ops_pool.len())])
        .collect();
    let answer = eval_expression(&operands, &ops).rem_euclid(family.modulus as i64);

    let mut prompt = Vec::new();
    for (i, &v) in operands.iter().enumerate() {
        prompt.extend(digits_of(v as u64));
        if i < ops.len() {
            prompt.push(ops[i].token());
        }
    }
    prompt.push(MOD);
    prompt.extend(digits_of(family.modulus));
    for _ in 0..family.distractor_clauses {
        prompt.push(SEP);
        prompt.extend(digits_of(rng.gen_range(0..=family.operand_max)));
        prompt.push(ops_pool[rng.gen_range(0..ops_pool.len())].token());
        prompt.extend(digits_of(rng.gen_range(0..=family.operand_max)));
    }
    prompt.push(PROMPT_END);

    TaskInstance { prompt_tokens: prompt, answer, family_id: family.label, seed }
}

/// The gold completion a correct responder should emit.
pub fn gold_response(instance: &TaskInstance) -> Vec<TokenId> {
    let mut r = vec![ANS_OPEN];
    r.extend(digits_of(instance.answer as u64));
    r.push(ANS_CLOSE);
    r.push(EOS);
    r
}

/// Pulls the answer out of a response: the integer spelled by the digits of
/// the LAST well-formed `<a> digits </a>` span. A span is well-formed when it
/// is non-empty, all digits, and contains no nested marker. Absence is a
/// value, not an error.
pub fn extract_answer(response_tokens: &[TokenId]) -> Option<i64> {
    let mut result = None;
    let mut i = 0;
    while i < response_tokens.len() {
        if response_tokens[i] == ANS_OPEN {
            let mut j = i + 1;
            let mut ok = true;
            let mut value: i64 = 0;
            let mut ndigits = 0usize;
            while j < response_tokens.len() && response_tokens[j] != ANS_CLOSE {
                let t = response_tokens[j];
                if t == ANS_OPEN || t >= 10 {
                    ok = false;
                    break;
                }
                value = value * 10 + t as i64;
                ndigits += 1;
                // longer than any representable answer; also guards overflow
                if ndigits > 18 {
                    ok = false;
                    break;
                }
                j += 1;
            }
            if ok && j < response_tokens.len() && ndigits > 0 {
                result = Some(value);
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    result
}

/// Binary verifiable reward: 1 iff the extracted answer equals the stored
/// (already reduced) gold answer exactly.
pub fn verify(instance: &TaskInstance, response_tokens: &[TokenId]) -> u8 {
    match extract_answer(response_tokens) {
        Some(v) if v == instance.answer => 1,
        _ => 0,
    }
}

/// Deterministic prompt-disjoint train/eval split.
pub fn make_split(
    family: &TaskFamily,
    n_train: usize,
    n_eval: usize,
    seed: u64,
) -> Result<(Vec<TaskInstance>, Vec<TaskInstance>)> {
    let needed = n_train + n_eval;
    let mut seen: HashSet<Vec<TokenId>> = HashSet::new();
    let mut out = Vec::with_capacity(needed);
    let max_attempts = 200 * needed + 1000;
    let mut attempt: u64 = 0;
    while out.len() < needed && (attempt as usize) < max_attempts {
        let inst_seed = rng::mix(seed, &[Domain::Split as u64, attempt]);
        let inst = generate(family, inst_seed);
        if seen.insert(inst.prompt_tokens.clone()) {
            out.push(inst);
        }
        attempt += 1;
    }
    if out.len() < needed {
        return Err(CoreError::GenerationExhausted { needed, got: out.len() });
    }
    let eval = out.split_off(n_train);
    Ok((out, eval))
}

/// One task per line: `{family, seed, prompt_token_ids, answer}`.
#[derive(Debug, Serialize, Deserialize)]
struct TaskLine {
    family: FamilyLabel,
    seed: u64,
    prompt_token_ids: Vec<TokenId>,
    answer: i64,
}

pub fn write_task_dump<W: Write>(mut w: W, instances: &[TaskInstance]) -> Result<()> {
    for inst in instances {
        let line = TaskLine {
            family: inst.family_id,
            seed: inst.seed,
            prompt_token_ids: inst.prompt_tokens.clone(),
            answer: inst.answer,
        };
        writeln!(w, "{}", serde_json::to_string(&line)?)?;
    }
    Ok(())
}

pub fn read_task_dump<R: BufRead>(r: R) -> Result<Vec<TaskInstance>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: TaskLine = serde_json::from_str(&line)?;
        out.push(TaskInstance {
            prompt_tokens: t.prompt_token_ids,
            answer: t.answer,
            family_id: t.family,
            seed: t.seed,
        });
    }
    Ok(out)
}

/// Task-suite knobs: the base family plus the two perturbed eval variants.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TaskSuiteConfig {
    pub n_operands: usize,
    pub operand_max: u64,
    pub modulus: u64,
    pub n_train: usize,
    pub n_eval: usize,
    /// Operand bound for the range-shift family.
    pub perturbed_operand_max: u64,
    /// Clause count for the compositional-noise family.
    pub perturbed_distractors: usize,
}

impl Default for TaskSuiteConfig {
    fn default() -> Self {
        TaskSuiteConfig {
            n_operands: 3,
            operand_max: 9,
            modulus: 10,
            n_train: 4000,
            n_eval: 128,
            perturbed_operand_max: 12,
            perturbed_distractors: 2,
        }
    }
}

impl TaskSuiteConfig {
    pub fn base_family(&self) -> TaskFamily {
        TaskFamily {
            n_operands: self.n_operands,
            operand_max: self.operand_max,
            modulus: self.modulus,
            distractor_clauses: 0,
            label: FamilyLabel::Base,
        }
    }

    pub fn perturbed1_family(&self) -> TaskFamily {
        TaskFamily {
            operand_max: self.perturbed_operand_max,
            label: FamilyLabel::Perturbed1,
            ..self.base_family()
        }
    }

    pub fn perturbed2_family(&self) -> TaskFamily {
        TaskFamily {
            distractor_clauses: self.perturbed_distractors,
            label: FamilyLabel::Perturbed2,
            ..self.base_family()
        }
    }
}

/// Materialized splits: base train/eval plus perturbed eval sets built from
/// fresh seeds.
#[derive(Debug, Clone)]
pub struct TaskSuite {
    pub train: Vec<TaskInstance>,
    pub eval_base: Vec<TaskInstance>,
    pub eval_perturbed1: Vec<TaskInstance>,
    pub eval_perturbed2: Vec<TaskInstance>,
}

impl TaskSuite {
    pub fn build(cfg: &TaskSuiteConfig, seed: u64) -> Result<Self> {
        let (train, eval_base) =
            make_split(&cfg.base_family(), cfg.n_train, cfg.n_eval, seed)?;
        let (_, eval_perturbed1) =
            make_split(&cfg.perturbed1_family(), 0, cfg.n_eval, rng::mix(seed, &[101]))?;
        let (_, eval_perturbed2) =
            make_split(&cfg.perturbed2_family(), 0, cfg.n_eval, rng::mix(seed, &[102]))?;
        Ok(TaskSuite { train, eval_base, eval_perturbed1, eval_perturbed2 })
    }
}
