//! Flat `key = value` run configuration.
//!
//! ```text
//! # lines starting with # are comments
//! spec = small                 # default | small | <path to spec file>
//! manifest = a/manifest.csv,b/manifest.csv
//! protocol = cross-database    # or intra-database
//! train_db = A                 # optional: restrict cross-database to one fold
//! database = A                 # intra-database only
//! train_fraction = 0.7         # intra-database only
//! epochs = 10                  # required
//! batch = 32
//! lr = 1e-5
//! weight_decay = 0.01
//! seed = 0
//! ```
//!
//! A custom spec file uses the same `key = value` syntax with the network
//! spec keys (`input_size`, `base_channels`, ...).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mvanet_core::model::NetworkSpec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum SpecChoice {
    Default,
    Small,
    Custom(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProtocolChoice {
    CrossDatabase { train_db: Option<String> },
    IntraDatabase { database: String, train_fraction: f64 },
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub spec: SpecChoice,
    pub protocol: Option<ProtocolChoice>,
    pub manifests: Vec<PathBuf>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl RunConfig {
    pub fn parse_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(path.to_path_buf(), e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<RunConfig> {
        let cfg_err = |line: Option<usize>, msg: String| Error::Config {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let dir = path.parent().unwrap_or_else(|| Path::new(""));

        let mut kv: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(Some(idx + 1), format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim().to_string(), value.trim().to_string());
            if let Some((first, _)) = kv.get(&key) {
                return Err(cfg_err(
                    Some(idx + 1),
                    format!("duplicate key `{key}` (first set at line {first})"),
                ));
            }
            kv.insert(key, (idx + 1, value));
        }

        let known = [
            "spec", "manifest", "protocol", "train_db", "database", "train_fraction", "epochs",
            "batch", "lr", "weight_decay", "seed",
        ];
        for (key, (line, _)) in &kv {
            if !known.contains(&key.as_str()) {
                return Err(cfg_err(Some(*line), format!("unknown key `{key}`")));
            }
        }
        let get = |key: &str| kv.get(key).map(|(_, v)| v.as_str());
        fn parse_as<T: std::str::FromStr>(
            key: &str,
            value: &str,
            line: usize,
            path: &Path,
        ) -> Result<T> {
            value.parse().map_err(|_| Error::Config {
                path: path.to_path_buf(),
                line: Some(line),
                msg: format!("bad value `{value}` for `{key}`"),
            })
        }
        let line_of = |key: &str| kv.get(key).map(|(l, _)| *l).unwrap_or(0);

        let spec = match get("spec").unwrap_or("default") {
            "default" => SpecChoice::Default,
            "small" => SpecChoice::Small,
            custom => {
                let p = dir.join(custom);
                if !p.is_file() {
                    return Err(cfg_err(
                        Some(line_of("spec")),
                        format!("spec file `{}` does not exist", p.display()),
                    ));
                }
                SpecChoice::Custom(p)
            }
        };

        let manifests: Vec<PathBuf> = match get("manifest") {
            Some(list) => list.split(',').map(|m| dir.join(m.trim())).collect(),
            None => return Err(cfg_err(None, "missing required key `manifest`".into())),
        };
        for m in &manifests {
            if !m.is_file() {
                return Err(cfg_err(
                    Some(line_of("manifest")),
                    format!("manifest `{}` does not exist", m.display()),
                ));
            }
        }

        let protocol = match get("protocol") {
            None => None,
            Some("cross-database") => Some(ProtocolChoice::CrossDatabase {
                train_db: get("train_db").map(str::to_string),
            }),
            Some("intra-database") => {
                let database = get("database")
                    .ok_or_else(|| {
                        cfg_err(None, "intra-database protocol requires `database`".into())
                    })?
                    .to_string();
                let train_fraction: f64 = match get("train_fraction") {
                    Some(v) => parse_as("train_fraction", v, line_of("train_fraction"), path)?,
                    None => {
                        return Err(cfg_err(
                            None,
                            "intra-database protocol requires `train_fraction`".into(),
                        ))
                    }
                };
                Some(ProtocolChoice::IntraDatabase { database, train_fraction })
            }
            Some(other) => {
                return Err(cfg_err(
                    Some(line_of("protocol")),
                    format!("unknown protocol `{other}` (expected cross-database or intra-database)"),
                ))
            }
        };

        let epochs: usize = match get("epochs") {
            Some(v) => parse_as("epochs", v, line_of("epochs"), path)?,
            None => return Err(cfg_err(None, "missing required key `epochs`".into())),
        };
        let batch: usize = match get("batch") {
            Some(v) => parse_as("batch", v, line_of("batch"), path)?,
            None => 32,
        };
        let lr: f64 = match get("lr") {
            Some(v) => parse_as("lr", v, line_of("lr"), path)?,
            None => 1e-5,
        };
        let weight_decay: f64 = match get("weight_decay") {
            Some(v) => parse_as("weight_decay", v, line_of("weight_decay"), path)?,
            None => 0.01,
        };
        let seed: u64 = match get("seed") {
            Some(v) => parse_as("seed", v, line_of("seed"), path)?,
            None => 0,
        };
        if batch == 0 {
            return Err(cfg_err(Some(line_of("batch")), "batch must be positive".into()));
        }

        Ok(RunConfig {
            spec,
            protocol,
            manifests,
            epochs,
            batch,
            lr,
            weight_decay,
            seed,
        })
    }

    /// Resolves the spec choice into a concrete network spec.
    pub fn network_spec(&self) -> Result<NetworkSpec> {
        match &self.spec {
            SpecChoice::Default => Ok(NetworkSpec::default_spec()),
            SpecChoice::Small => Ok(NetworkSpec::small()),
            SpecChoice::Custom(path) => {
                let text =
                    std::fs::read_to_string(path).map_err(|e| Error::Io(path.clone(), e))?;
                let mut kv = BTreeMap::new();
                for (idx, raw) in text.lines().enumerate() {
                    let line = raw.trim();
                    if line.is_empty() || line.starts_with('#') {
                        continue;
                    }
                    let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                        path: path.clone(),
                        line: Some(idx + 1),
                        msg: format!("expected `key = value`, got `{line}`"),
                    })?;
                    kv.insert(k.trim().to_string(), v.trim().to_string());
                }
                Ok(NetworkSpec::from_kv(&kv)?)
            }
        }
    }
}

/// Writes a network spec as a custom spec file.
pub fn write_spec_file(spec: &NetworkSpec, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (k, v) in spec.to_kv() {
        out.push_str(&format!("{k} = {v}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::Io(path.to_path_buf(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    #[test]
    fn parses_a_full_cross_database_config() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("m.csv"), "path,label,database,sensor,environment\n").unwrap();
        let text = "\
# comment
spec = small
manifest = m.csv
protocol = cross-database
epochs = 3
batch = 16
lr = 1e-4
weight_decay = 0.01
seed = 9
";
        let cfg = RunConfig::parse(text, &dir.path().join("run.cfg")).unwrap();
        assert_eq!(cfg.spec, SpecChoice::Small);
        assert_eq!(cfg.protocol, Some(ProtocolChoice::CrossDatabase { train_db: None }));
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.batch, 16);
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn missing_manifest_path_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let text = "manifest = nope.csv\nepochs = 1\n";
        let err = RunConfig::parse(text, &dir.path().join("run.cfg"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("does not exist"), "{err}");
    }

    #[test]
    fn unknown_key_names_line() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("m.csv"), "x").unwrap();
        let text = "manifest = m.csv\nepochs = 1\nbogus = 3\n";
        let err = RunConfig::parse(text, &dir.path().join("run.cfg"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("bogus") && err.contains(":3"), "{err}");
    }

    #[test]
    fn intra_database_requires_fields() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("m.csv"), "x").unwrap();
        let text = "manifest = m.csv\nepochs = 1\nprotocol = intra-database\n";
        let err = RunConfig::parse(text, &dir.path().join("run.cfg"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("database"), "{err}");
    }

    #[test]
    fn custom_spec_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let spec_path = dir.path().join("tiny.spec");
        write_spec_file(&NetworkSpec::small_gradcheck(), &spec_path).unwrap();
        fs::write(dir.path().join("m.csv"), "x").unwrap();
        let text = "spec = tiny.spec\nmanifest = m.csv\nepochs = 1\n";
        let cfg = RunConfig::parse(text, &dir.path().join("run.cfg")).unwrap();
        assert_eq!(cfg.network_spec().unwrap(), NetworkSpec::small_gradcheck());
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("m.csv"), "x").unwrap();
        let text = "manifest = m.csv\nepochs = 1\nepochs = 2\n";
        let err = RunConfig::parse(text, &dir.path().join("run.cfg"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("duplicate"), "{err}");
    }
}
