//! Protocol execution: trains per fold, evaluates every test manifest,
//! and writes reports, per-sample decisions, training logs, and
//! checkpoints. Report and decision files are byte-identical across reruns
//! of the same (config, seed, thread count).

use std::fmt::Write as _;
use std::path::Path;

use mvanet_core::checkpoint;
use mvanet_core::data::{
    assert_disjoint, split, LoadedDataset, Manifest, Protocol, SplitOut,
};
use mvanet_core::model::{Model, NetworkSpec};
use mvanet_core::optim::{train_epochs, train_log_csv, TrainConfig};
use mvanet_core::rng::Rng;
use mvanet_core::tensor::stack;

use crate::config::{ProtocolChoice, RunConfig};
use crate::error::{Error, Result};
use crate::metrics::{
    average_acer, compute_metrics, write_decisions, Decision, EvalReport,
};

#[derive(Debug)]
pub struct FoldResult {
    pub train_db: String,
    pub reports: Vec<EvalReport>,
    pub average_acer: Option<f64>,
}

#[derive(Debug)]
pub struct ProtocolOutcome {
    pub folds: Vec<FoldResult>,
    /// (fold train db, error text) for folds that failed; the others
    /// complete regardless.
    pub failures: Vec<(String, String)>,
}

/// Runs a trained model over a manifest in fixed-size batches, producing
/// one decision per sample in manifest order.
pub fn evaluate_manifest(
    model: &Model<f32>,
    manifest: &Manifest,
    batch: usize,
) -> Result<Vec<Decision>> {
    let input = model.spec().input_size;
    let data = LoadedDataset::<f32>::load(manifest, input)?;
    let mut decisions = Vec::with_capacity(data.len());
    let mut idx = 0usize;
    while idx < data.len() {
        let hi = (idx + batch).min(data.len());
        let images: Vec<_> = (idx..hi).map(|i| &data.images[i]).collect();
        let x = stack(&images)?;
        for (offset, pred) in model.predict(&x)?.into_iter().enumerate() {
            let i = idx + offset;
            decisions.push(Decision {
                source: data.sources[i].clone(),
                label: data.labels[i],
                predicted: pred.label,
                score: pred.attack_score,
            });
        }
        idx = hi;
    }
    Ok(decisions)
}

fn fold_protocol(choice: &ProtocolChoice, fold_db: &str, seed: u64) -> Protocol {
    match choice {
        ProtocolChoice::CrossDatabase { .. } => Protocol::CrossDatabase {
            train_db: fold_db.to_string(),
        },
        ProtocolChoice::IntraDatabase { database, train_fraction } => Protocol::IntraDatabase {
            db: database.clone(),
            train_fraction: *train_fraction,
            seed,
        },
    }
}

fn run_fold(
    cfg: &RunConfig,
    spec: &NetworkSpec,
    split_out: &SplitOut,
    fold_idx: usize,
    fold_db: &str,
    fold_dir: &Path,
) -> Result<FoldResult> {
    std::fs::create_dir_all(fold_dir).map_err(|e| Error::Io(fold_dir.to_path_buf(), e))?;

    let train_data = LoadedDataset::<f32>::load(&split_out.train, spec.input_size)?;
    let mut model = Model::<f32>::new(
        spec.clone(),
        &mut Rng::derive(cfg.seed, 2 * fold_idx as u64),
    )?;
    let train_cfg = TrainConfig {
        batch: cfg.batch,
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        epochs: cfg.epochs,
        seed: Rng::derive(cfg.seed, 2 * fold_idx as u64 + 1).state(),
    };
    let (log, adam) = if cfg.epochs > 0 {
        train_epochs(&mut model, &train_data, &train_cfg)?
    } else {
        (Vec::new(), mvanet_core::optim::AdamState::for_model(cfg.lr, cfg.weight_decay, &model))
    };

    let log_path = fold_dir.join("train_log.csv");
    std::fs::write(&log_path, train_log_csv(&log)).map_err(|e| Error::Io(log_path, e))?;
    checkpoint::save(&model, cfg.epochs as u64, Some(&adam), &fold_dir.join("checkpoint.ckpt"))?;

    let mut reports = Vec::new();
    for (test_db, test_manifest) in &split_out.tests {
        let decisions = evaluate_manifest(&model, test_manifest, cfg.batch)?;
        write_decisions(&fold_dir.join(format!("decisions_{test_db}.csv")), &decisions)?;
        let pairs: Vec<_> = decisions.iter().map(|d| (d.label, d.predicted)).collect();
        reports.push(compute_metrics(&pairs, fold_db, test_db)?);
    }
    let avg = average_acer(&reports).ok();
    Ok(FoldResult {
        train_db: fold_db.to_string(),
        reports,
        average_acer: avg,
    })
}

pub fn run_protocol(cfg: &RunConfig, out_dir: &Path) -> Result<ProtocolOutcome> {
    let choice = cfg.protocol.as_ref().ok_or_else(|| {
        Error::contract("run_protocol", "config does not set a `protocol`")
    })?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::Io(out_dir.to_path_buf(), e))?;
    let manifest = Manifest::load_merged(&cfg.manifests)?;
    let spec = cfg.network_spec()?;

    let fold_dbs: Vec<String> = match choice {
        ProtocolChoice::CrossDatabase { train_db: Some(db) } => vec![db.clone()],
        ProtocolChoice::CrossDatabase { train_db: None } => manifest.databases(),
        ProtocolChoice::IntraDatabase { database, .. } => vec![database.clone()],
    };

    let mut outcome = ProtocolOutcome { folds: Vec::new(), failures: Vec::new() };
    for (fold_idx, fold_db) in fold_dbs.iter().enumerate() {
        let result = (|| -> Result<FoldResult> {
            let split_out = split(&manifest, &fold_protocol(choice, fold_db, cfg.seed))?;
            assert_disjoint(&split_out)?;
            run_fold(
                cfg,
                &spec,
                &split_out,
                fold_idx,
                fold_db,
                &out_dir.join(format!("fold_{fold_db}")),
            )
        })();
        match result {
            Ok(fold) => outcome.folds.push(fold),
            Err(e) => outcome.failures.push((fold_db.clone(), e.to_string())),
        }
    }

    write_summaries(&outcome, out_dir)?;
    Ok(outcome)
}

fn write_summaries(outcome: &ProtocolOutcome, out_dir: &Path) -> Result<()> {
    let mut reports_csv = String::from(EvalReport::CSV_HEADER);
    reports_csv.push('\n');
    let mut averages_csv = String::from("train_db,average_acer\n");
    let mut human = String::new();

    for fold in &outcome.folds {
        for r in &fold.reports {
            writeln!(reports_csv, "{}", r.csv_row()).unwrap();
            writeln!(human, "{}", r.human_line()).unwrap();
        }
        match (
            fold.average_acer,
            crate::metrics::average_acer_exact(&fold.reports),
        ) {
            (Some(avg), Some(exact)) => {
                writeln!(averages_csv, "{},{}", fold.train_db, avg).unwrap();
                writeln!(human, "train={} average ACER={}%", fold.train_db, exact.fmt2()).unwrap();
            }
            _ => {
                writeln!(averages_csv, "{},undefined", fold.train_db).unwrap();
                writeln!(human, "train={} average ACER undefined", fold.train_db).unwrap();
            }
        }
    }
    for (db, err) in &outcome.failures {
        writeln!(human, "fold {db} FAILED: {err}").unwrap();
    }

    for (name, content) in [
        ("reports.csv", reports_csv),
        ("averages.csv", averages_csv),
        ("report.txt", human),
    ] {
        let p = out_dir.join(name);
        std::fs::write(&p, content).map_err(|e| Error::Io(p, e))?;
    }
    Ok(())
}
