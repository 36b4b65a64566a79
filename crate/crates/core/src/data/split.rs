//! Protocol splits: cross-database folds and seeded intra-database
//! stratified splits. Train and test sets are disjoint by construction.

use std::collections::BTreeMap;

use crate::data::manifest::Manifest;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub enum Protocol {
    /// Train on one database, test on every other database separately.
    CrossDatabase { train_db: String },
    /// Seeded stratified split within one database.
    IntraDatabase {
        db: String,
        train_fraction: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone)]
pub struct SplitOut {
    pub train: Manifest,
    /// (test database id, manifest) pairs, sorted by database id.
    pub tests: Vec<(String, Manifest)>,
}

pub fn split(manifest: &Manifest, protocol: &Protocol) -> Result<SplitOut> {
    match protocol {
        Protocol::CrossDatabase { train_db } => {
            let dbs = manifest.databases();
            if !dbs.iter().any(|d| d == train_db) {
                return Err(Error::contract(
                    "split",
                    format!("training database `{train_db}` absent from manifest (present: {dbs:?})"),
                ));
            }
            let train = manifest.filter_database(train_db);
            let tests = dbs
                .into_iter()
                .filter(|d| d != train_db)
                .map(|d| {
                    let m = manifest.filter_database(&d);
                    (d, m)
                })
                .collect();
            Ok(SplitOut { train, tests })
        }
        Protocol::IntraDatabase { db, train_fraction, seed } => {
            if !(0.0..1.0).contains(train_fraction) || *train_fraction == 0.0 {
                return Err(Error::contract(
                    "split",
                    format!("train fraction must lie in (0, 1), got {train_fraction}"),
                ));
            }
            let within = manifest.filter_database(db);
            if within.samples.is_empty() {
                return Err(Error::contract(
                    "split",
                    format!("database `{db}` absent from manifest"),
                ));
            }
            // stratify: shuffle indices per class with a class-derived stream
            let mut per_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, s) in within.samples.iter().enumerate() {
                per_class.entry(s.label.index()).or_default().push(i);
            }
            let mut train_idx = Vec::new();
            let mut test_idx = Vec::new();
            for (class, mut idxs) in per_class {
                Rng::derive(*seed, class as u64).shuffle(&mut idxs);
                let n_train = (train_fraction * idxs.len() as f64 + 0.5).floor() as usize;
                train_idx.extend_from_slice(&idxs[..n_train]);
                test_idx.extend_from_slice(&idxs[n_train..]);
            }
            train_idx.sort_unstable();
            test_idx.sort_unstable();
            let pick = |idxs: &[usize]| Manifest {
                samples: idxs.iter().map(|&i| within.samples[i].clone()).collect(),
                comments: Vec::new(),
            };
            Ok(SplitOut {
                train: pick(&train_idx),
                tests: vec![(db.clone(), pick(&test_idx))],
            })
        }
    }
}

/// Asserts train/test disjointness by resolved source paths.
pub fn assert_disjoint(out: &SplitOut) -> Result<()> {
    use std::collections::HashSet;
    let train: HashSet<&str> = out
        .train
        .samples
        .iter()
        .map(|s| s.path.to_str().unwrap_or(""))
        .collect();
    for (db, m) in &out.tests {
        for s in &m.samples {
            if train.contains(s.path.to_str().unwrap_or("")) {
                return Err(Error::contract(
                    "split",
                    format!("sample `{}` appears in both train and test `{db}`", s.path.display()),
                ));
            }
        }
    }
    Ok(())
}
