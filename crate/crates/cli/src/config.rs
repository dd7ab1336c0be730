//! Experiment configuration files.
//!
//! TOML with sections `[method] [contrastive] [sampling] [tasks] [eval]
//! [run]`, every key named identically to its `TrainConfig` field. Unknown
//! keys are rejected (all of them at once); missing keys take the documented
//! defaults, which depend on `method.method` and `contrastive.loss_kind`.
//! The fully resolved config is echoed verbatim into the run directory and
//! can itself be parsed back as a config.

use rlvr_core::contrastive::{ContrastiveConfig, LossKind};
use rlvr_core::error::CoreError;
use rlvr_core::objectives::{Method, SurrogateConfig};
use rlvr_core::trainer::TrainConfig;
use toml::Value;

/// Serializes the resolved config; this echo is the single source of truth
/// for a run.
pub fn echo(cfg: &TrainConfig) -> String {
    toml::to_string_pretty(cfg).expect("resolved config serializes")
}

fn known_keys() -> Value {
    Value::try_from(TrainConfig::default()).expect("default config to value")
}

fn collect_unknown(user: &Value, known: &Value, prefix: &str, problems: &mut Vec<String>) {
    let (Value::Table(user), Value::Table(known)) = (user, known) else {
        return;
    };
    for (key, val) in user {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match known.get(key) {
            None => problems.push(format!("unknown key `{path}`")),
            Some(k) => collect_unknown(val, k, &path, problems),
        }
    }
}

fn merge(base: &mut Value, user: Value) {
    match (base, user) {
        (Value::Table(base), Value::Table(user)) => {
            for (k, v) in user {
                match base.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        base.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn get_str(table: &Value, section: &str, key: &str) -> Option<String> {
    table.get(section)?.get(key)?.as_str().map(str::to_owned)
}

/// Parses and fully resolves a config table.
pub fn resolve(user: Value) -> Result<TrainConfig, CoreError> {
    let mut problems = Vec::new();
    collect_unknown(&user, &known_keys(), "", &mut problems);

    // method- and loss-kind-dependent defaults
    let method = match get_str(&user, "method", "method").as_deref() {
        None => Method::Grpo,
        Some("grpo") => Method::Grpo,
        Some("gspo") => Method::Gspo,
        Some("dapo") => Method::Dapo,
        Some("gmpo") => Method::Gmpo,
        Some(other) => {
            problems.push(format!(
                "method.method must be one of grpo|gspo|dapo|gmpo, got `{other}`"
            ));
            Method::Grpo
        }
    };
    let kind = match get_str(&user, "contrastive", "loss_kind").as_deref() {
        None => LossKind::Infonce,
        Some("infonce") => LossKind::Infonce,
        Some("supcon") => LossKind::Supcon,
        Some("softnn") => LossKind::Softnn,
        Some(other) => {
            problems.push(format!(
                "contrastive.loss_kind must be one of infonce|supcon|softnn, got `{other}`"
            ));
            LossKind::Infonce
        }
    };
    if !problems.is_empty() {
        return Err(CoreError::Config(problems));
    }

    let mut base = TrainConfig::default();
    base.method = SurrogateConfig::for_method(method);
    base.contrastive = ContrastiveConfig::for_kind(kind);
    let mut merged = Value::try_from(&base)
        .map_err(|e| CoreError::Config(vec![format!("internal default serialization: {e}")]))?;
    merge(&mut merged, user);
    let cfg: TrainConfig = merged
        .try_into()
        .map_err(|e| CoreError::Config(vec![format!("invalid value: {e}")]))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Applies repeatable `--override section.key=value` pairs on top of the user
/// table before resolution.
pub fn apply_overrides(table: &mut Value, overrides: &[String]) -> Result<(), CoreError> {
    let mut problems = Vec::new();
    for entry in overrides {
        let Some((path, raw)) = entry.split_once('=') else {
            problems.push(format!("override `{entry}` is not KEY=VALUE"));
            continue;
        };
        let parts: Vec<&str> = path.split('.').collect();
        if parts.len() != 2 {
            problems.push(format!("override key `{path}` must be section.key"));
            continue;
        }
        let value = parse_scalar(raw);
        let Value::Table(root) = table else { unreachable!("config root is a table") };
        let section = root
            .entry(parts[0].to_string())
            .or_insert_with(|| Value::Table(Default::default()));
        if let Value::Table(section) = section {
            section.insert(parts[1].to_string(), value);
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CoreError::Config(problems))
    }
}

fn parse_scalar(raw: &str) -> Value {
    if let Ok(b) = raw.parse::<bool>() {
        return Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return Value::Float(f);
    }
    Value::String(raw.to_string())
}
