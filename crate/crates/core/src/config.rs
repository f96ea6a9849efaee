//! Flat `key = value` configuration files.
//!
//! Blank lines and anything after `#` are ignored. Keys are unique; unknown
//! keys are rejected with the offending line number.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

impl Entry {
    pub fn parse<T: FromStr>(&self) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.value.parse().map_err(|e| Error::ConfigParse {
            line: self.line,
            msg: format!("bad value {:?} for {}: {e}", self.value, self.key),
        })
    }
}

pub fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let mut entries: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(Error::ConfigParse {
                line,
                msg: format!("expected `key = value`, got {content:?}"),
            });
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::ConfigParse { line, msg: "empty key".into() });
        }
        if let Some(prev) = entries.iter().find(|e| e.key == key) {
            return Err(Error::ConfigParse {
                line,
                msg: format!("duplicate key {key} (first set on line {})", prev.line),
            });
        }
        entries.push(Entry {
            line,
            key: key.to_string(),
            value: value.trim().to_string(),
        });
    }
    Ok(entries)
}

/// Everything a training run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data_root: PathBuf,
    pub output_dir: PathBuf,
    /// Periodic checkpoint interval in steps; 0 keeps only the final one.
    pub checkpoint_every: u64,
    /// Training-set PSNR/SSIM interval in steps; 0 disables.
    pub eval_every: u64,
    /// Metrics CSV; defaults to `<output_dir>/metrics.csv`.
    pub log_path: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            data_root: PathBuf::from("data"),
            output_dir: PathBuf::from("runs/default"),
            checkpoint_every: 500,
            eval_every: 0,
            log_path: None,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for e in parse_entries(text)? {
            match e.key.as_str() {
                "data_root" => cfg.data_root = PathBuf::from(&e.value),
                "output_dir" => cfg.output_dir = PathBuf::from(&e.value),
                "checkpoint_every" => cfg.checkpoint_every = e.parse()?,
                "eval_every" => cfg.eval_every = e.parse()?,
                "log_path" => cfg.log_path = (!e.value.is_empty()).then(|| PathBuf::from(&e.value)),
                _ => {
                    if !cfg.train.set(&e)? {
                        return Err(Error::ConfigParse {
                            line: e.line,
                            msg: format!("unknown key {}", e.key),
                        });
                    }
                }
            }
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.log_path.clone().unwrap_or_else(|| self.output_dir.join("metrics.csv"))
    }

    /// Fully resolved config; parsing it back yields `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.train.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        let _ = writeln!(out, "data_root = {}", self.data_root.display());
        let _ = writeln!(out, "output_dir = {}", self.output_dir.display());
        let _ = writeln!(out, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(out, "eval_every = {}", self.eval_every);
        let _ = writeln!(out, "log_path = {}", self.metrics_path().display());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::ConsistencyMetric;

    #[test]
    fn defaults_fill_missing_keys() {
        let cfg = RunConfig::parse("# nothing\n\n").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.alpha, 0.01);
        assert_eq!(cfg.train.ema_beta, 0.999);
        assert_eq!(cfg.metrics_path(), PathBuf::from("runs/default/metrics.csv"));
    }

    #[test]
    fn values_and_comments() {
        let cfg = RunConfig::parse(
            "alpha = 0   # ablation\nconsistency_metric = L2\nchannels=8\ndata_root = /tmp/x\nlog_path = m.csv\n",
        )
        .unwrap();
        assert_eq!(cfg.train.alpha, 0.0);
        assert_eq!(cfg.train.consistency_metric, ConsistencyMetric::L2);
        assert_eq!(cfg.train.model.channels, 8);
        assert_eq!(cfg.data_root, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.metrics_path(), PathBuf::from("m.csv"));
    }

    #[test]
    fn unknown_key_reports_line() {
        match RunConfig::parse("alpha = 0.1\n\nlearnig_rate = 1e-3\n") {
            Err(Error::ConfigParse { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("learnig_rate"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_lines() {
        assert!(matches!(RunConfig::parse("alpha 0.1"), Err(Error::ConfigParse { line: 1, .. })));
        assert!(matches!(RunConfig::parse("seed = x"), Err(Error::ConfigParse { line: 1, .. })));
        assert!(matches!(RunConfig::parse("seed = 1\nseed = 2"), Err(Error::ConfigParse { line: 2, .. })));
        assert!(matches!(RunConfig::parse("ema_beta = 1.5"), Err(Error::Config(_))));
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig::parse("learning_rate = 0.0003\nseed = 7\nalpha = 0.05\neval_every = 10\n").unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), RunConfig {
            log_path: Some(cfg.metrics_path()),
            ..cfg.clone()
        });
    }
}
