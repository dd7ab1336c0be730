//! Per-step metrics stream: one JSON record per line, append-only.

use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub mean_base_reward: f64,
    pub mean_shaped_reward: f64,
    pub pass1_eval_base: f64,
    /// Mean pass@1 across the two perturbed eval splits.
    pub pass1_eval_perturbed: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_contrastive_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mi_lower_bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_pos_pair_cosine: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_pos_neg_cosine: Option<f64>,
    pub frac_valid_groups: f64,
    pub frac_clipped_rewards: f64,
    pub kl_to_ref: f64,
    pub dropped_groups: u64,
}

impl MetricsRecord {
    /// Every present field must be finite; a NaN anywhere aborts the run.
    pub fn validate(&self) -> Result<()> {
        let required = [
            ("mean_base_reward", self.mean_base_reward),
            ("mean_shaped_reward", self.mean_shaped_reward),
            ("pass1_eval_base", self.pass1_eval_base),
            ("pass1_eval_perturbed", self.pass1_eval_perturbed),
            ("frac_valid_groups", self.frac_valid_groups),
            ("frac_clipped_rewards", self.frac_clipped_rewards),
            ("kl_to_ref", self.kl_to_ref),
        ];
        for (name, v) in required {
            if !v.is_finite() {
                return Err(CoreError::NumericFailure { step: self.step, field: name.into() });
            }
        }
        let optional = [
            ("mean_contrastive_loss", self.mean_contrastive_loss),
            ("mi_lower_bound", self.mi_lower_bound),
            ("mean_pos_pair_cosine", self.mean_pos_pair_cosine),
            ("mean_pos_neg_cosine", self.mean_pos_neg_cosine),
        ];
        for (name, v) in optional {
            if let Some(x) = v {
                if !x.is_finite() {
                    return Err(CoreError::NumericFailure { step: self.step, field: name.into() });
                }
            }
        }
        Ok(())
    }

    pub fn write_line<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", serde_json::to_string(self)?)?;
        Ok(())
    }
}

pub fn read_metrics<R: BufRead>(r: R) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> MetricsRecord {
        MetricsRecord {
            step: 3,
            mean_base_reward: 0.5,
            mean_shaped_reward: 0.45,
            pass1_eval_base: 0.6,
            pass1_eval_perturbed: 0.4,
            mean_contrastive_loss: Some(1.7),
            mi_lower_bound: Some(1.0),
            mean_pos_pair_cosine: Some(0.8),
            mean_pos_neg_cosine: Some(0.2),
            frac_valid_groups: 0.75,
            frac_clipped_rewards: 0.1,
            kl_to_ref: 0.01,
            dropped_groups: 2,
        }
    }

    #[test]
    fn round_trips_through_jsonl() {
        let mut buf = Vec::new();
        record().write_line(&mut buf).unwrap();
        let mut none = record();
        none.mean_contrastive_loss = None;
        none.mi_lower_bound = None;
        none.mean_pos_pair_cosine = None;
        none.mean_pos_neg_cosine = None;
        none.write_line(&mut buf).unwrap();
        let back = read_metrics(&buf[..]).unwrap();
        assert_eq!(back, vec![record(), none]);
    }

    #[test]
    fn absent_optionals_are_omitted_from_the_line() {
        let mut none = record();
        none.mean_contrastive_loss = None;
        let mut buf = Vec::new();
        none.write_line(&mut buf).unwrap();
        let line = String::from_utf8(buf).unwrap();
        assert!(!line.contains("mean_contrastive_loss"));
    }

    #[test]
    fn nan_fails_validation_naming_the_field() {
        let mut r = record();
        r.kl_to_ref = f64::NAN;
        match r.validate() {
            Err(CoreError::NumericFailure { step, field }) => {
                assert_eq!(step, 3);
                assert_eq!(field, "kl_to_ref");
            }
            other => panic!("expected NumericFailure, got {other:?}"),
        }
        let mut r = record();
        r.mi_lower_bound = Some(f64::INFINITY);
        assert!(r.validate().is_err());
    }
}
