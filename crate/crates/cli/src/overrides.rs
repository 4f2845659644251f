use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use semcom::channel::SnrSpec;
use semcom::harness::ExperimentConfig;
use serde_json::Value;

use crate::ConfigArgs;

/// Parses `0`, `-3.5`, `inf` or a range `lo,hi`.
pub fn parse_snr(text: &str) -> Result<SnrSpec> {
    let v = match text.split_once(',') {
        Some((lo, hi)) => Value::from(vec![lo.trim().parse::<f64>()?, hi.trim().parse::<f64>()?]),
        None if text.trim() == "inf" => Value::from("inf"),
        None => Value::from(
            text.trim()
                .parse::<f64>()
                .with_context(|| format!("bad SNR `{text}`"))?,
        ),
    };
    Ok(serde_json::from_value(v)?)
}

/// Writes `value` at a dotted path, creating intermediate objects.
fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut keys = path.split('.').peekable();
    let mut node = root;
    while let Some(key) = keys.next() {
        if key.is_empty() {
            bail!("empty segment in `{path}`");
        }
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        let slot = match node {
            Value::Object(map) => map.entry(key.to_string()).or_insert(Value::Null),
            Value::Array(items) => {
                let i: usize = key
                    .parse()
                    .with_context(|| format!("`{key}` in `{path}` is not an index"))?;
                items
                    .get_mut(i)
                    .ok_or_else(|| anyhow!("index {i} out of range in `{path}`"))?
            }
            _ => bail!("`{path}` descends into a scalar"),
        };
        if keys.peek().is_none() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    Ok(())
}

/// File values, then `--set` patches, then the typed flags.
pub fn load(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut doc = match &args.config {
        Some(p) => read_json(p)?,
        None => Value::Object(Default::default()),
    };
    for item in &args.set {
        let (path, raw) = item.split_once('=').ok_or_else(|| {
            semcom::Error::invalid(format!("--set expects PATH=VALUE, got `{item}`"))
        })?;
        // bare words are taken as strings so that `--set policy.calibrate_on=eval` works
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::from(raw));
        set_path(&mut doc, path, value).map_err(|e| semcom::Error::invalid(e.to_string()))?;
    }
    let mut cfg: ExperimentConfig = serde_json::from_value(doc)?;

    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    if let Some(s) = &args.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(s) = &args.snr {
        cfg.channel.base.snr_db =
            parse_snr(s).map_err(|e| semcom::Error::invalid(e.to_string()))?;
    }
    if let Some(s) = &args.eval_snr {
        let snr = parse_snr(s).map_err(|e| semcom::Error::invalid(e.to_string()))?;
        let mut link = cfg.eval_link().clone();
        link.base.snr_db = snr;
        link.per_modality = None;
        cfg.eval_channel = Some(link);
    }
    if let Some(a) = args.alpha {
        cfg.policy.alpha = a;
    }
    if let Some(n) = args.n_max {
        cfg.policy.n_max = n;
    }
    if args.no_pretrain {
        cfg.ablation.no_pretrain = true;
    }
    if args.no_retx {
        cfg.ablation.no_retx = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_json(path: &Path) -> Result<Value> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_paths() {
        let mut v = serde_json::json!({"a": {"b": 1}, "xs": [1, 2]});
        set_path(&mut v, "a.b", Value::from(2)).unwrap();
        set_path(&mut v, "a.c.d", Value::from("x")).unwrap();
        set_path(&mut v, "xs.1", Value::from(5)).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"a": {"b": 2, "c": {"d": "x"}}, "xs": [1, 5]})
        );
        assert!(set_path(&mut v, "a.b.c", Value::from(0)).is_err());
        assert!(set_path(&mut v, "xs.9", Value::from(0)).is_err());
    }

    #[test]
    fn snr_forms() {
        assert_eq!(parse_snr("10").unwrap(), SnrSpec::Fixed(10.0));
        assert_eq!(parse_snr("inf").unwrap(), SnrSpec::Fixed(f64::INFINITY));
        assert_eq!(
            parse_snr("0,20").unwrap(),
            SnrSpec::Range { lo: 0.0, hi: 20.0 }
        );
        assert!(parse_snr("20,0").is_err());
        assert!(parse_snr("loud").is_err());
    }
}
