//! Manifest CSV: `path,label,database,sensor,environment`, one sample per
//! line, `#` comment lines allowed anywhere. Fields are plain tokens — no
//! quoting — so commas and newlines are rejected on write.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::Label;
use crate::error::{Error, Result};

pub const HEADER: &str = "path,label,database,sensor,environment";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Environment {
    Controlled,
    Uncontrolled,
}

impl Environment {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "controlled" => Some(Environment::Controlled),
            "uncontrolled" => Some(Environment::Uncontrolled),
            _ => None,
        }
    }
}

impl std::fmt::Display for Environment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Environment::Controlled => "controlled",
            Environment::Uncontrolled => "uncontrolled",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    /// Path exactly as written in the manifest.
    pub source: String,
    /// Path resolved against the manifest's directory, used for I/O.
    pub path: PathBuf,
    pub label: Label,
    pub database: String,
    pub sensor: String,
    pub environment: Environment,
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub samples: Vec<Sample>,
    /// `#` comment lines (without the marker), preserved on save.
    pub comments: Vec<String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(path.to_path_buf(), e))?;
        Self::parse(&text, path)
    }

    fn err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
        Error::Manifest {
            path: path.to_path_buf(),
            line,
            msg: msg.into(),
        }
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let dir = path.parent().unwrap_or_else(|| Path::new(""));
        let mut comments = Vec::new();
        let mut samples = Vec::new();
        let mut seen: HashMap<String, usize> = HashMap::new();
        let mut header_seen = false;

        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                comments.push(comment.trim().to_string());
                continue;
            }
            if !header_seen {
                if line != HEADER {
                    let got: Vec<&str> = line.split(',').collect();
                    let want: Vec<&str> = HEADER.split(',').collect();
                    let missing: Vec<&str> =
                        want.iter().filter(|c| !got.contains(c)).copied().collect();
                    return Err(Self::err(
                        path,
                        lineno,
                        if missing.is_empty() {
                            format!("bad header `{line}` (expected `{HEADER}`)")
                        } else {
                            format!("header is missing column(s) {missing:?}")
                        },
                    ));
                }
                header_seen = true;
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(Self::err(
                    path,
                    lineno,
                    format!("expected 5 fields, got {}", fields.len()),
                ));
            }
            let source = fields[0].trim().to_string();
            if source.is_empty() {
                return Err(Self::err(path, lineno, "empty path"));
            }
            let label = Label::parse(fields[1].trim()).ok_or_else(|| {
                Self::err(
                    path,
                    lineno,
                    format!(
                        "unknown label `{}` (expected `bonafide` or `attack`)",
                        fields[1].trim()
                    ),
                )
            })?;
            let environment = Environment::parse(fields[4].trim()).ok_or_else(|| {
                Self::err(
                    path,
                    lineno,
                    format!(
                        "unknown environment `{}` (expected `controlled` or `uncontrolled`)",
                        fields[4].trim()
                    ),
                )
            })?;
            if let Some(first) = seen.insert(source.clone(), lineno) {
                return Err(Self::err(
                    path,
                    lineno,
                    format!("duplicate path `{source}` (first seen at line {first})"),
                ));
            }
            samples.push(Sample {
                path: dir.join(&source),
                source,
                label,
                database: fields[2].trim().to_string(),
                sensor: fields[3].trim().to_string(),
                environment,
            });
        }

        if !header_seen {
            return Err(Self::err(path, 1, "empty manifest (no header line)"));
        }
        Ok(Manifest { samples, comments })
    }

    /// Writes the manifest with `source` paths as-is.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for c in &self.comments {
            writeln!(out, "# {c}").unwrap();
        }
        writeln!(out, "{HEADER}").unwrap();
        for s in &self.samples {
            for (field, what) in [
                (&s.source, "path"),
                (&s.database, "database"),
                (&s.sensor, "sensor"),
            ] {
                if field.contains(',') || field.contains('\n') {
                    return Err(Error::contract(
                        "manifest",
                        format!("{what} `{field}` contains a comma or newline"),
                    ));
                }
            }
            writeln!(
                out,
                "{},{},{},{},{}",
                s.source, s.label, s.database, s.sensor, s.environment
            )
            .unwrap();
        }
        std::fs::write(path, out).map_err(|e| Error::Io(path.to_path_buf(), e))
    }

    /// Loads and concatenates several manifests; resolved paths must stay
    /// unique across all of them.
    pub fn load_merged(paths: &[PathBuf]) -> Result<Manifest> {
        let mut merged = Manifest::default();
        let mut seen: HashMap<String, ()> = HashMap::new();
        for p in paths {
            let m = Manifest::load(p)?;
            merged.comments.extend(m.comments);
            for s in m.samples {
                let key = s.path.display().to_string();
                if seen.insert(key.clone(), ()).is_some() {
                    return Err(Error::Manifest {
                        path: p.clone(),
                        line: 0,
                        msg: format!("duplicate resolved path `{key}` across manifests"),
                    });
                }
                merged.samples.push(s);
            }
        }
        Ok(merged)
    }

    /// Database ids present, sorted and deduplicated.
    pub fn databases(&self) -> Vec<String> {
        let mut dbs: Vec<String> = self.samples.iter().map(|s| s.database.clone()).collect();
        dbs.sort();
        dbs.dedup();
        dbs
    }

    pub fn filter_database(&self, db: &str) -> Manifest {
        Manifest {
            samples: self
                .samples
                .iter()
                .filter(|s| s.database == db)
                .cloned()
                .collect(),
            comments: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Manifest> {
        Manifest::parse(text, Path::new("/data/m.csv"))
    }

    #[test]
    fn two_line_manifest_parses() {
        let m = parse(
            "path,label,database,sensor,environment\n\
             a.pgm,bonafide,A,cam0,controlled\n\
             b.pgm,attack,A,cam0,controlled\n",
        )
        .unwrap();
        assert_eq!(m.samples.len(), 2);
        assert_eq!(m.samples[0].path, Path::new("/data/a.pgm"));
        assert_eq!(m.samples[1].label, Label::Attack);
    }

    #[test]
    fn soft_lens_label_is_rejected_with_line_number() {
        let err = parse(
            "path,label,database,sensor,environment\n\
             a.pgm,soft-lens,A,cam0,controlled\n",
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("soft-lens") && err.contains(":2"), "{err}");
    }

    #[test]
    fn duplicate_path_names_both_lines() {
        let err = parse(
            "path,label,database,sensor,environment\n\
             a.pgm,bonafide,A,cam0,controlled\n\
             a.pgm,attack,A,cam0,controlled\n",
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains(":3") && err.contains("line 2"), "{err}");
    }

    #[test]
    fn empty_file_is_distinct_error() {
        let err = parse("").unwrap_err().to_string();
        assert!(err.contains("empty manifest"), "{err}");
    }

    #[test]
    fn missing_column_is_reported() {
        let err = parse("path,label,database,sensor\n").unwrap_err().to_string();
        assert!(err.contains("environment"), "{err}");
    }

    #[test]
    fn comments_are_preserved_through_save() {
        let m = parse(
            "# synth-generator v1 profile=A\n\
             path,label,database,sensor,environment\n\
             a.pgm,bonafide,A,cam0,controlled\n",
        )
        .unwrap();
        assert_eq!(m.comments.len(), 1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        m.save(&p).unwrap();
        let back = Manifest::load(&p).unwrap();
        assert_eq!(back.comments, m.comments);
        assert_eq!(back.samples.len(), 1);
    }

    #[test]
    fn databases_are_sorted_unique() {
        let m = parse(
            "path,label,database,sensor,environment\n\
             a.pgm,bonafide,B,cam0,controlled\n\
             b.pgm,attack,A,cam0,controlled\n\
             c.pgm,attack,B,cam0,controlled\n",
        )
        .unwrap();
        assert_eq!(m.databases(), vec!["A".to_string(), "B".to_string()]);
    }
}
