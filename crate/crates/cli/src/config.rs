//! Declarative training config: one file, either `key=value` lines or a
//! flat JSON object. Unknown keys are rejected by name so a typo cannot
//! silently fall back to a default.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use hyvic_core::train::TrainConfig;
use serde_json::{json, Value};

use crate::Failure;

/// Every key the file may set. Architecture keys follow the conventional
/// capitalization (`S`, `M`, `N`, `k`); the rest are lowercase.
const KNOWN_KEYS: &[&str] = &[
    "dataset", "out", "lambda", "epochs", "bs", "lr_main", "lr_aux", "seed", "S", "M", "N", "k",
    "patch", "steps", "clip",
];

/// A parsed, defaulted training request. `n = None` means "derive the
/// hyperlatent width as ⌊3M/5⌋".
#[derive(Debug)]
pub struct TrainSpec {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub s: usize,
    pub m: usize,
    pub n: Option<usize>,
    pub k: usize,
    pub train: TrainConfig,
    /// True when the file left `lambda` unset and the 1e-4 default was
    /// used; the caller logs a notice so silent defaults don't surprise.
    pub lambda_defaulted: bool,
}

impl TrainSpec {
    /// Fully resolved values for the run manifest, including the band
    /// count and hyperlatent width that were filled in from the data.
    pub fn snapshot(&self, c: usize, n: usize) -> Value {
        json!({
            "dataset": self.dataset.display().to_string(),
            "out": self.out.display().to_string(),
            "lambda": self.train.lambda,
            "epochs": self.train.epochs,
            "bs": self.train.batch_size,
            "lr_main": self.train.lr_main,
            "lr_aux": self.train.lr_aux,
            "seed": self.train.seed,
            "C": c,
            "S": self.s,
            "M": self.m,
            "N": n,
            "k": self.k,
            "patch": self.train.patch,
            "steps": self.train.max_steps,
            "clip": self.train.clip_norm,
        })
    }
}

fn bad(msg: String) -> Failure {
    Failure::Config(msg)
}

fn json_pairs(text: &str) -> Result<Vec<(String, String)>, Failure> {
    let v: Value =
        serde_json::from_str(text).map_err(|e| bad(format!("config is not valid JSON: {e}")))?;
    let Value::Object(map) = v else {
        return Err(bad("JSON config must be a single object".into()));
    };
    map.into_iter()
        .map(|(k, v)| {
            let s = match v {
                Value::Number(n) => n.to_string(),
                Value::String(s) => s,
                Value::Bool(b) => b.to_string(),
                other => {
                    return Err(bad(format!(
                        "config key \"{k}\" must be a scalar, got {other}"
                    )))
                }
            };
            Ok((k, s))
        })
        .collect()
}

fn kv_pairs(text: &str) -> Result<Vec<(String, String)>, Failure> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(bad(format!(
                "config line {}: expected key=value, got {line:?}",
                i + 1
            )));
        };
        let mut v = v.trim();
        if v.len() >= 2 && v.starts_with('"') && v.ends_with('"') {
            v = &v[1..v.len() - 1];
        }
        pairs.push((k.trim().to_string(), v.to_string()));
    }
    Ok(pairs)
}

fn parse_value<T: FromStr>(key: &str, value: &str, want: &str) -> Result<T, Failure>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| bad(format!("config key \"{key}\": cannot parse {value:?} as {want} ({e})")))
}

/// Parse a config file body. Format is sniffed from the first character:
/// `{` means JSON, anything else means key=value lines (with `#` comments).
pub fn parse(text: &str) -> Result<TrainSpec, Failure> {
    let pairs = if text.trim_start().starts_with('{') {
        json_pairs(text)?
    } else {
        kv_pairs(text)?
    };

    let mut map: BTreeMap<String, String> = BTreeMap::new();
    for (k, v) in pairs {
        if !KNOWN_KEYS.contains(&k.as_str()) {
            return Err(bad(format!("unknown config key \"{k}\"")));
        }
        if map.insert(k.clone(), v).is_some() {
            return Err(bad(format!("duplicate config key \"{k}\"")));
        }
    }

    let dataset = map
        .get("dataset")
        .ok_or_else(|| bad("config must set \"dataset\" (directory of .hsic cubes)".into()))?;
    let out = map
        .get("out")
        .ok_or_else(|| bad("config must set \"out\" (output directory)".into()))?;

    let mut train = TrainConfig::default();
    let lambda_defaulted = !map.contains_key("lambda");
    if let Some(v) = map.get("lambda") {
        train.lambda = parse_value("lambda", v, "a number")?;
    }
    if let Some(v) = map.get("epochs") {
        train.epochs = parse_value("epochs", v, "an integer")?;
    }
    if let Some(v) = map.get("bs") {
        train.batch_size = parse_value("bs", v, "an integer")?;
    }
    if let Some(v) = map.get("lr_main") {
        train.lr_main = parse_value("lr_main", v, "a number")?;
    }
    if let Some(v) = map.get("lr_aux") {
        train.lr_aux = parse_value("lr_aux", v, "a number")?;
    }
    if let Some(v) = map.get("seed") {
        train.seed = parse_value("seed", v, "an unsigned integer")?;
    }
    if let Some(v) = map.get("patch") {
        train.patch = Some(parse_value("patch", v, "an integer")?);
    }
    if let Some(v) = map.get("steps") {
        train.max_steps = Some(parse_value("steps", v, "an integer")?);
    }
    if let Some(v) = map.get("clip") {
        train.clip_norm = Some(parse_value("clip", v, "a number")?);
    }

    let s = map.get("S").map(|v| parse_value("S", v, "an integer")).transpose()?.unwrap_or(1);
    let m = map.get("M").map(|v| parse_value("M", v, "an integer")).transpose()?.unwrap_or(24);
    let n = map.get("N").map(|v| parse_value("N", v, "an integer")).transpose()?;
    let k = map.get("k").map(|v| parse_value("k", v, "an integer")).transpose()?.unwrap_or(3);

    Ok(TrainSpec {
        dataset: PathBuf::from(dataset),
        out: PathBuf::from(out),
        s,
        m,
        n,
        k,
        train,
        lambda_defaulted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_and_json_agree() {
        let kv = parse("dataset = data\nout = run\nlambda = 0.01\nM = 48\nseed = 7\n").unwrap();
        let js =
            parse(r#"{"dataset": "data", "out": "run", "lambda": 0.01, "M": 48, "seed": 7}"#)
                .unwrap();
        for spec in [&kv, &js] {
            assert_eq!(spec.dataset, PathBuf::from("data"));
            assert_eq!(spec.train.lambda, 0.01);
            assert_eq!(spec.m, 48);
            assert_eq!(spec.train.seed, 7);
            assert!(spec.n.is_none());
            assert!(!spec.lambda_defaulted);
        }
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse("dataset=d\nout=o\nlamda=0.1\n").unwrap_err();
        assert!(err.to_string().contains("lamda"), "{err}");
        assert_eq!(err.code(), 2);
    }

    #[test]
    fn duplicate_key_is_named() {
        let err = parse("dataset=d\nout=o\nepochs=2\nepochs=3\n").unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
        assert!(err.to_string().contains("epochs"), "{err}");
    }

    #[test]
    fn lambda_defaults_with_flag() {
        let spec = parse("dataset=d\nout=o\n").unwrap();
        assert!(spec.lambda_defaulted);
        assert_eq!(spec.train.lambda, 1e-4);
    }

    #[test]
    fn comments_quotes_and_blank_lines() {
        let spec = parse("# run\n\ndataset = \"my data\"\nout=o\nsteps= 12\n").unwrap();
        assert_eq!(spec.dataset, PathBuf::from("my data"));
        assert_eq!(spec.train.max_steps, Some(12));
    }

    #[test]
    fn bad_value_names_key_and_value() {
        let err = parse("dataset=d\nout=o\nepochs=soon\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("epochs") && msg.contains("soon"), "{msg}");
    }

    #[test]
    fn nested_json_rejected() {
        let err = parse(r#"{"dataset":"d","out":"o","patch":[64]}"#).unwrap_err();
        assert!(err.to_string().contains("patch"), "{err}");
    }
}
