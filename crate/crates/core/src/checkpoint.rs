//! Checkpoint format: a JSON header line followed by named little-endian
//! 64-bit float arrays in declared order. Save -> load -> save is
//! byte-identical.

use crate::contrastive::ContrastiveHead;
use crate::error::{CoreError, Result};
use crate::optim::AdamWState;
use crate::policy::{Dims, PolicyParams};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

pub const FORMAT: &str = "rlvr-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    /// Policy parameters only (pretrain output).
    Policy,
    /// Full training state: policy, frozen reference, head, optimizers.
    Run,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayMeta {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: CheckpointKind,
    dims: Dims,
    vocab_hash: u64,
    step: u64,
    seed: u64,
    head_out_dim: usize,
    policy_opt_step: u64,
    head_opt_step: u64,
    arrays: Vec<ArrayMeta>,
}

/// Everything a checkpoint can carry; `Policy` kind leaves the rest `None`.
pub struct CheckpointData {
    pub kind: CheckpointKind,
    pub step: u64,
    pub seed: u64,
    pub policy: PolicyParams,
    pub reference: Option<PolicyParams>,
    pub head: Option<ContrastiveHead>,
    pub policy_opt: Option<AdamWState>,
}

fn push_arrays(out: &mut Vec<(String, Vec<f64>)>, prefix: &str, params: &PolicyParams) {
    for (name, t) in params.named_tensors() {
        out.push((format!("{prefix}{name}"), t.data().to_vec()));
    }
}

fn collect_arrays(data: &CheckpointData) -> Vec<(String, Vec<f64>)> {
    let mut arrays = Vec::new();
    push_arrays(&mut arrays, "policy.", &data.policy);
    if let Some(reference) = &data.reference {
        push_arrays(&mut arrays, "ref.", reference);
    }
    if let Some(head) = &data.head {
        arrays.push(("head.w".into(), head.w.data().to_vec()));
        let (m, v) = head.adamw.moment_buffers();
        arrays.push(("head.opt.m".into(), m[0].clone()));
        arrays.push(("head.opt.v".into(), v[0].clone()));
        arrays.push((
            "head.meta".into(),
            vec![if head.frozen { 1.0 } else { 0.0 }, head.adamw.learning_rate,
                 head.adamw.weight_decay],
        ));
    }
    if let Some(opt) = &data.policy_opt {
        let (m, v) = opt.moment_buffers();
        for (i, (name, _)) in data.policy.named_tensors().iter().enumerate() {
            arrays.push((format!("opt.m.{name}"), m[i].clone()));
            arrays.push((format!("opt.v.{name}"), v[i].clone()));
        }
        arrays.push(("opt.meta".into(), vec![opt.learning_rate, opt.weight_decay]));
    }
    arrays
}

pub fn save<W: Write>(mut w: W, data: &CheckpointData, vocab_hash: u64) -> Result<()> {
    let arrays = collect_arrays(data);
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        kind: data.kind,
        dims: data.policy.dims,
        vocab_hash,
        step: data.step,
        seed: data.seed,
        head_out_dim: data.head.as_ref().map_or(0, |h| h.out_dim()),
        policy_opt_step: data.policy_opt.as_ref().map_or(0, |o| o.step),
        head_opt_step: data.head.as_ref().map_or(0, |h| h.adamw.step),
        arrays: arrays.iter().map(|(n, d)| ArrayMeta { name: n.clone(), len: d.len() }).collect(),
    };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for (_, data) in &arrays {
        for x in data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_to_path(path: &Path, data: &CheckpointData, vocab_hash: u64) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    save(&mut w, data, vocab_hash)?;
    Ok(())
}

fn corrupt(field: &str, detail: impl Into<String>) -> CoreError {
    CoreError::Checkpoint { field: field.into(), detail: detail.into() }
}

pub fn load<R: Read>(r: R, expect_vocab_hash: u64) -> Result<CheckpointData> {
    let mut reader = BufReader::new(r);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let header: Header = serde_json::from_str(line.trim_end())
        .map_err(|e| corrupt("header", format!("unparseable header: {e}")))?;
    if header.format != FORMAT {
        return Err(corrupt("format", format!("expected {FORMAT}, got {}", header.format)));
    }
    if header.version != VERSION {
        return Err(corrupt("version", format!("unsupported version {}", header.version)));
    }
    if header.vocab_hash != expect_vocab_hash {
        return Err(corrupt(
            "vocab_hash",
            format!("checkpoint vocabulary {:#x} != runtime {:#x}", header.vocab_hash,
                    expect_vocab_hash),
        ));
    }

    let mut arrays: Vec<(String, Vec<f64>)> = Vec::with_capacity(header.arrays.len());
    for meta in &header.arrays {
        let mut buf = vec![0u8; meta.len * 8];
        reader
            .read_exact(&mut buf)
            .map_err(|_| corrupt(&meta.name, "file truncated inside array"))?;
        let data: Vec<f64> =
            buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        arrays.push((meta.name.clone(), data));
    }
    let mut extra = Vec::new();
    reader.read_to_end(&mut extra)?;
    if !extra.is_empty() {
        return Err(corrupt("trailer", format!("{} unexpected trailing bytes", extra.len())));
    }

    let lookup = |name: &str| -> Result<&Vec<f64>> {
        arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d)
            .ok_or_else(|| corrupt(name, "array missing"))
    };

    let fill_params = |prefix: &str| -> Result<PolicyParams> {
        let mut params = PolicyParams::init(header.dims, 0);
        for (name, t) in params.named_tensors_mut() {
            let data = lookup(&format!("{prefix}{name}"))?;
            if data.len() != t.len() {
                return Err(corrupt(&name, format!("length {} != expected {}", data.len(), t.len())));
            }
            t.data_mut().copy_from_slice(data);
        }
        Ok(params)
    };

    let policy = fill_params("policy.")?;
    let mut out = CheckpointData {
        kind: header.kind,
        step: header.step,
        seed: header.seed,
        policy,
        reference: None,
        head: None,
        policy_opt: None,
    };
    if header.kind == CheckpointKind::Run {
        out.reference = Some(fill_params("ref.")?);
        let d = header.head_out_dim;
        let input_dim = header.dims.dim;
        let mut head = ContrastiveHead::init(d, input_dim, 0);
        let w = lookup("head.w")?;
        if w.len() != d * input_dim {
            return Err(corrupt("head.w", format!("length {} != {}", w.len(), d * input_dim)));
        }
        head.w = Tensor::matrix(d, input_dim, w.clone());
        let meta = lookup("head.meta")?;
        head.frozen = meta[0] != 0.0;
        let mut adamw = AdamWState::new(meta[1], meta[2], &[d * input_dim]);
        adamw.step = header.head_opt_step;
        {
            let (m, v) = adamw.moment_buffers_mut();
            m[0].copy_from_slice(lookup("head.opt.m")?);
            v[0].copy_from_slice(lookup("head.opt.v")?);
        }
        head.adamw = adamw;
        out.head = Some(head);

        let opt_meta = lookup("opt.meta")?;
        let mut opt = AdamWState::new(opt_meta[0], opt_meta[1], &out.policy.shapes());
        opt.step = header.policy_opt_step;
        {
            let names: Vec<String> =
                out.policy.named_tensors().iter().map(|(n, _)| n.clone()).collect();
            let (m, v) = opt.moment_buffers_mut();
            for (i, name) in names.iter().enumerate() {
                m[i].copy_from_slice(lookup(&format!("opt.m.{name}"))?);
                v[i].copy_from_slice(lookup(&format!("opt.v.{name}"))?);
            }
        }
        out.policy_opt = Some(opt);
    }
    Ok(out)
}

pub fn load_from_path(path: &Path, expect_vocab_hash: u64) -> Result<CheckpointData> {
    let file = std::fs::File::open(path)?;
    load(file, expect_vocab_hash)
}
