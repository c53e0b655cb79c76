//! `RunConfig`: `key = value` files with `[section]` headers, overlaid by
//! command-line flags.

use std::fmt::Write;
use std::path::Path;

use covloc::Result;

pub fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(covloc::Error::Argument(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Usize,
    U64,
    F64,
    Bool,
    Text,
    UsizeList,
    TextList,
    /// `lo, hi, count`
    Grid,
}

const SCHEMA: &[(&str, &str, Kind)] = &[
    ("run", "seed", Kind::U64),
    ("run", "threads", Kind::Usize),
    ("model", "name", Kind::Text),
    ("model", "d", Kind::Usize),
    ("model", "l", Kind::F64),
    ("model", "l1", Kind::F64),
    ("model", "l2", Kind::F64),
    ("model", "periodic", Kind::Bool),
    ("model", "kernel", Kind::Text),
    ("sample", "n", Kind::Usize),
    ("sample", "trial", Kind::U64),
    ("estimate", "alpha", Kind::F64),
    ("estimate", "m", Kind::F64),
    ("estimate", "layout", Kind::Text),
    ("sweep", "scale", Kind::Text),
    ("sweep", "d", Kind::Usize),
    ("sweep", "trials", Kind::Usize),
    ("sweep", "ensemble_sizes", Kind::UsizeList),
    ("sweep", "models", Kind::TextList),
    ("sweep", "kernels", Kind::TextList),
    ("sweep", "alpha_step", Kind::F64),
    ("sweep", "schur_grid", Kind::Grid),
    ("sweep", "refine", Kind::Usize),
    ("sweep", "illustration_n", Kind::Usize),
    ("qc", "theta_uniform", Kind::F64),
    ("qc", "tol", Kind::F64),
    ("qc", "max_iter", Kind::Usize),
    ("qc", "damping", Kind::F64),
    ("qc", "algorithm", Kind::Text),
    ("qc", "init_scale", Kind::F64),
];

#[derive(Debug, Clone)]
pub struct RunConfig {
    values: Vec<Option<String>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: vec![None; SCHEMA.len()] }
    }
}

fn slot(section: &str, key: &str) -> Option<usize> {
    SCHEMA.iter().position(|(s, k, _)| *s == section && *k == key)
}

fn parse_bool(v: &str) -> Option<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Some(true),
        "false" | "no" | "off" | "0" => Some(false),
        _ => None,
    }
}

fn split_list(v: &str) -> Vec<&str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
}

fn validate(kind: Kind, v: &str) -> bool {
    match kind {
        Kind::Usize => v.parse::<usize>().is_ok(),
        Kind::U64 => v.parse::<u64>().is_ok(),
        Kind::F64 => v.parse::<f64>().is_ok(),
        Kind::Bool => parse_bool(v).is_some(),
        Kind::Text => !v.is_empty(),
        Kind::UsizeList => {
            let items = split_list(v);
            !items.is_empty() && items.iter().all(|s| s.parse::<usize>().is_ok())
        }
        Kind::TextList => !split_list(v).is_empty(),
        Kind::Grid => {
            let items = split_list(v);
            items.len() == 3
                && items[0].parse::<f64>().is_ok()
                && items[1].parse::<f64>().is_ok()
                && items[2].parse::<usize>().is_ok()
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section: Option<String> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let at = lineno + 1;
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SCHEMA.iter().any(|(s, _, _)| *s == name) {
                    return arg_err(format!("line {at}: unknown section [{name}]"));
                }
                section = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return arg_err(format!("line {at}: expected `key = value`, got {line:?}"));
            };
            let Some(sec) = section.as_deref() else {
                return arg_err(format!("line {at}: key outside of a section"));
            };
            cfg.set(sec, key.trim(), value.trim()).map_err(|e| {
                covloc::Error::Argument(format!("line {at}: {}", e.to_string().trim_start_matches("invalid argument: ")))
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| covloc::Error::Argument(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let Some(i) = slot(section, key) else {
            return arg_err(format!("unknown key {key:?} in [{section}]"));
        };
        if !validate(SCHEMA[i].2, value) {
            return arg_err(format!("bad value {value:?} for {section}.{key}"));
        }
        self.values[i] = Some(value.to_string());
        Ok(())
    }

    /// Set only when nothing was given.
    pub fn default_to(&mut self, section: &str, key: &str, value: impl ToString) {
        let i = slot(section, key).expect("schema key");
        if self.values[i].is_none() {
            self.values[i] = Some(value.to_string());
        }
    }

    pub fn overlay(&mut self, section: &str, key: &str, value: Option<impl ToString>) -> Result<()> {
        match value {
            Some(v) => self.set(section, key, &v.to_string()),
            None => Ok(()),
        }
    }

    fn raw(&self, section: &str, key: &str) -> Option<&str> {
        self.values[slot(section, key).expect("schema key")].as_deref()
    }

    pub fn text(&self, section: &str, key: &str) -> Option<String> {
        self.raw(section, key).map(str::to_string)
    }

    pub fn usize(&self, section: &str, key: &str) -> Option<usize> {
        self.raw(section, key).map(|v| v.parse().expect("validated"))
    }

    pub fn u64(&self, section: &str, key: &str) -> Option<u64> {
        self.raw(section, key).map(|v| v.parse().expect("validated"))
    }

    pub fn f64(&self, section: &str, key: &str) -> Option<f64> {
        self.raw(section, key).map(|v| v.parse().expect("validated"))
    }

    pub fn bool(&self, section: &str, key: &str) -> Option<bool> {
        self.raw(section, key).map(|v| parse_bool(v).expect("validated"))
    }

    pub fn usize_list(&self, section: &str, key: &str) -> Option<Vec<usize>> {
        self.raw(section, key)
            .map(|v| split_list(v).iter().map(|s| s.parse().expect("validated")).collect())
    }

    pub fn text_list(&self, section: &str, key: &str) -> Option<Vec<String>> {
        self.raw(section, key).map(|v| split_list(v).into_iter().map(str::to_string).collect())
    }

    pub fn grid(&self, section: &str, key: &str) -> Option<(f64, f64, usize)> {
        self.raw(section, key).map(|v| {
            let p = split_list(v);
            (p[0].parse().expect("validated"), p[1].parse().expect("validated"), p[2].parse().expect("validated"))
        })
    }

    /// Set keys of the given sections, in config-file syntax.
    pub fn echo(&self, sections: &[&str]) -> String {
        let mut out = String::new();
        for sec in sections {
            let keys: Vec<_> = SCHEMA
                .iter()
                .zip(&self.values)
                .filter(|((s, _, _), v)| s == sec && v.is_some())
                .collect();
            if keys.is_empty() {
                continue;
            }
            let _ = writeln!(out, "[{sec}]");
            for ((_, k, _), v) in keys {
                let _ = writeln!(out, "{k} = {}", v.as_deref().unwrap_or_default());
            }
        }
        out
    }
}
