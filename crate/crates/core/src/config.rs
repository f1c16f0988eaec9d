//! Plain-text configuration: one `key = value` per line, `#` comments,
//! typed accessors, documented defaults, and unknown-key rejection.

use std::collections::BTreeMap;

use crate::attention::Backend;
use crate::error::{KgtError, Result};
use crate::model::NetConfig;
use crate::train::{TopkSchedule, TrainConfig};

#[derive(Clone, Copy, Debug)]
enum Kind {
    Usize,
    U64,
    F64,
    Schedule,
    Backend,
}

/// Known keys, their defaults, and their value types. Anything else is a
/// typo and rejected at parse time.
const SCHEMA: &[(&str, &str, Kind, &str)] = &[
    ("channels", "32", Kind::Usize, "feature channels C"),
    ("stages", "2", Kind::Usize, "transformer stages"),
    ("layers", "2", Kind::Usize, "layers per stage"),
    ("heads", "2", Kind::Usize, "attention heads (must divide channels)"),
    ("window", "8", Kind::Usize, "window side length"),
    ("ffn_ratio", "2", Kind::Usize, "FFN expansion ratio"),
    ("seed", "0", Kind::U64, "seed for init, data, noise, and schedule"),
    (
        "schedule",
        "random:4,8,16,32",
        Kind::Schedule,
        "top-k schedule: fixed:<k> or random:<k,k,...>",
    ),
    ("steps", "2000", Kind::Usize, "training steps"),
    ("batch", "8", Kind::Usize, "patches per step"),
    ("patch", "64", Kind::Usize, "training patch side (>= 8)"),
    ("sigma", "25", Kind::F64, "noise std on the 0-255 scale"),
    ("lr", "2e-4", Kind::F64, "peak learning rate (cosine decay to lr/10)"),
    (
        "backend",
        "gather",
        Kind::Backend,
        "attention backend: gather | mask | streaming[:block]",
    ),
    ("eval_every", "200", Kind::Usize, "steps between PSNR evaluations"),
    ("eval_count", "4", Kind::Usize, "held-out patches per evaluation"),
];

fn kind_of(key: &str) -> Option<Kind> {
    SCHEMA.iter().find(|(k, ..)| *k == key).map(|&(_, _, kind, _)| kind)
}

fn check_value(kind: Kind, value: &str) -> std::result::Result<(), String> {
    match kind {
        Kind::Usize => value
            .parse::<usize>()
            .map(|_| ())
            .map_err(|_| format!("'{value}' is not a non-negative integer")),
        Kind::U64 => value
            .parse::<u64>()
            .map(|_| ())
            .map_err(|_| format!("'{value}' is not a non-negative integer")),
        Kind::F64 => value
            .parse::<f64>()
            .map(|_| ())
            .map_err(|_| format!("'{value}' is not a number")),
        Kind::Schedule => TopkSchedule::parse(value).map(|_| ()).map_err(|e| e.to_string()),
        Kind::Backend => Backend::parse(value).map(|_| ()).map_err(|e| e.to_string()),
    }
}

/// A validated flat key=value map with defaults for every absent key.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: SCHEMA
                .iter()
                .map(|&(k, d, _, _)| (k.to_string(), d.to_string()))
                .collect(),
        }
    }
}

impl Config {
    /// Parse text over the defaults. Later duplicate keys override earlier
    /// ones; unknown keys and untypeable values name their line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(KgtError::ConfigLine {
                    line: line_no,
                    msg: format!("expected 'key = value', got '{line}'"),
                });
            };
            let key = key.trim();
            let value = value.trim();
            let Some(kind) = kind_of(key) else {
                return Err(KgtError::ConfigLine {
                    line: line_no,
                    msg: format!("unknown key '{key}'"),
                });
            };
            if let Err(msg) = check_value(kind, value) {
                return Err(KgtError::ConfigLine { line: line_no, msg });
            }
            cfg.values.insert(key.to_string(), value.to_string());
        }
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn usize(&self, key: &str) -> usize {
        self.values[key].parse().expect("validated at parse")
    }

    fn u64(&self, key: &str) -> u64 {
        self.values[key].parse().expect("validated at parse")
    }

    fn f64(&self, key: &str) -> f64 {
        self.values[key].parse().expect("validated at parse")
    }

    pub fn schedule(&self) -> TopkSchedule {
        TopkSchedule::parse(&self.values["schedule"]).expect("validated at parse")
    }

    pub fn backend(&self) -> Backend {
        Backend::parse(&self.values["backend"]).expect("validated at parse")
    }

    pub fn net_config(&self) -> Result<NetConfig> {
        let cfg = NetConfig {
            channels: self.usize("channels"),
            n_stages: self.usize("stages"),
            n_layers: self.usize("layers"),
            heads: self.usize("heads"),
            window: self.usize("window"),
            ffn_ratio: self.usize("ffn_ratio"),
            schedule: self.schedule(),
            seed: self.u64("seed"),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            steps: self.usize("steps"),
            batch: self.usize("batch"),
            patch: self.usize("patch"),
            sigma: self.f64("sigma"),
            lr: self.f64("lr"),
            seed: self.u64("seed"),
            schedule: self.schedule(),
            backend: self.backend(),
            eval_every: self.usize("eval_every"),
            eval_count: self.usize("eval_count"),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Schema listing for `--help`-style output: (key, default, doc).
    pub fn schema() -> impl Iterator<Item = (&'static str, &'static str, &'static str)> {
        SCHEMA.iter().map(|&(k, d, _, doc)| (k, d, doc))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_yields_full_defaults() {
        let cfg = Config::parse("").unwrap();
        assert_eq!(cfg.get("channels"), Some("32"));
        assert_eq!(cfg.get("window"), Some("8"));
        assert_eq!(cfg.get("heads"), Some("2"));
        let net = cfg.net_config().unwrap();
        assert_eq!(net, NetConfig::default());
        let train = cfg.train_config().unwrap();
        assert_eq!(train.steps, 2000);
        assert_eq!(train.sigma, 25.0);
    }

    #[test]
    fn single_override_keeps_other_defaults() {
        let cfg = Config::parse("window = 4\n").unwrap();
        assert_eq!(cfg.get("window"), Some("4"));
        assert_eq!(cfg.get("channels"), Some("32"));
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let err = Config::parse("wnidow = 4").unwrap_err();
        match err {
            KgtError::ConfigLine { line, msg } => {
                assert_eq!(line, 1);
                assert!(msg.contains("wnidow"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn untypeable_value_names_the_line() {
        let err = Config::parse("channels = 32\nsteps = many").unwrap_err();
        match err {
            KgtError::ConfigLine { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn later_duplicates_override_and_comments_are_ignored() {
        let cfg = Config::parse("# setup\nwindow = 4\nwindow = 8 # final word\n\n").unwrap();
        assert_eq!(cfg.get("window"), Some("8"));
    }

    #[test]
    fn schedule_and_backend_values_round_trip() {
        let cfg = Config::parse("schedule = fixed:6\nbackend = streaming:32\n").unwrap();
        assert_eq!(cfg.schedule(), TopkSchedule::Fixed(6));
        assert_eq!(cfg.backend(), Backend::Streaming { block: 32 });
    }

    #[test]
    fn net_snapshot_text_parses_back() {
        let net = NetConfig::default();
        let parsed = Config::parse(&net.to_text()).unwrap().net_config().unwrap();
        assert_eq!(parsed, net);
    }
}
