//! Feature export: conv block activations as grayscale PGM rasters, base
//! features as CSV rows for external embedding tools.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Min-max normalization to 8-bit; a constant map degenerates to all
/// zeros.
fn to_gray<T: Scalar>(values: &[T]) -> Vec<u8> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        let f = v.to_f64_lossy();
        lo = lo.min(f);
        hi = hi.max(f);
    }
    if !(hi > lo) {
        return vec![0u8; values.len()];
    }
    let scale = 255.0 / (hi - lo);
    values
        .iter()
        .map(|v| ((v.to_f64_lossy() - lo) * scale).round() as u8)
        .collect()
}

#[derive(Debug)]
pub struct ExportSummary {
    pub files_written: usize,
}

/// Runs an eval forward on `x` and exports the named layer.
///
/// `layer_id` is `conv1`..`convN` (the block output after batch norm,
/// before any pool), one PGM per (sample, channel); or `base-features`,
/// one PGM raster of the `[B, F]` matrix plus a CSV with one row per
/// sample.
pub fn export_features<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    layer_id: &str,
    out_dir: &Path,
) -> Result<ExportSummary> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::Io(out_dir.to_path_buf(), e))?;
    let mut tape = Tape::new();
    let out = model.forward_eval(&mut tape, x)?;

    let mut files = 0usize;
    if layer_id == "base-features" {
        let feat = tape.value(out.base_features);
        let (b, f) = (feat.shape()[0], feat.shape()[1]);
        crate::data::encode_pgm(
            &out_dir.join("base-features.pgm"),
            f,
            b,
            &to_gray(feat.data()),
        )?;
        files += 1;
        let mut csv = String::new();
        for i in 0..b {
            let row: Vec<String> = feat.data()[i * f..(i + 1) * f]
                .iter()
                .map(|v| v.to_string())
                .collect();
            writeln!(csv, "{}", row.join(",")).unwrap();
        }
        let csv_path = out_dir.join("base-features.csv");
        std::fs::write(&csv_path, csv).map_err(|e| Error::Io(csv_path, e))?;
        files += 1;
        return Ok(ExportSummary { files_written: files });
    }

    let block = layer_id
        .strip_prefix("conv")
        .and_then(|n| n.parse::<usize>().ok())
        .filter(|&n| n >= 1 && n <= out.block_outputs.len())
        .ok_or_else(|| {
            Error::contract(
                "export_features",
                format!(
                    "unknown layer id `{layer_id}` (expected conv1..conv{} or base-features)",
                    out.block_outputs.len()
                ),
            )
        })?;

    let act = tape.value(out.block_outputs[block - 1]);
    let (b, c, h, w) = (
        act.shape()[0],
        act.shape()[1],
        act.shape()[2],
        act.shape()[3],
    );
    for s in 0..b {
        for ch in 0..c {
            let base = (s * c + ch) * h * w;
            let gray = to_gray(&act.data()[base..base + h * w]);
            let name = format!("{layer_id}_s{s:03}_c{ch:03}.pgm");
            crate::data::encode_pgm(&out_dir.join(name), w, h, &gray)?;
            files += 1;
        }
    }
    Ok(ExportSummary { files_written: files })
}
