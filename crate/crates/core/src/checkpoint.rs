//! Bit-exact checkpoint files.
//!
//! Layout: 8 magic bytes, a little-endian `u32` format version, a
//! little-endian `u64` header length, a UTF-8 `key = value` header, then
//! raw little-endian tensor payloads in header declaration order. The
//! header embeds the network spec, the epoch counter, every dropout stream
//! state, the tensor table, and (optionally) Adam state, so
//! `load(save(m))` reproduces every tensor bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, NetworkSpec};
use crate::optim::AdamState;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MVANCKPT";
const VERSION: u32 = 1;

fn shape_str(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    s.split('x')
        .map(|p| {
            p.parse()
                .map_err(|_| Error::CorruptCheckpoint(format!("bad shape `{s}`")))
        })
        .collect()
}

/// Saves model state, dropout stream states, the epoch counter, and
/// optionally Adam moments.
pub fn save<T: Scalar>(
    model: &Model<T>,
    epoch: u64,
    adam: Option<&AdamState<T>>,
    path: &Path,
) -> Result<()> {
    let mut header = String::new();
    writeln!(header, "dtype = {}", T::DTYPE).unwrap();
    writeln!(header, "epoch = {epoch}").unwrap();
    for (k, v) in model.spec().to_kv() {
        writeln!(header, "spec.{k} = {v}").unwrap();
    }
    for (name, state) in model.rng_states() {
        writeln!(header, "rng.{name} = {state}").unwrap();
    }

    let mut tensors: Vec<(String, &Tensor<T>)> = model.state_tensors();
    let adam_moments: Vec<(String, Tensor<T>)>;
    if let Some(adam) = adam {
        writeln!(header, "adam.t = {}", adam.t).unwrap();
        writeln!(header, "adam.lr = {}", adam.lr).unwrap();
        writeln!(header, "adam.weight_decay = {}", adam.weight_decay).unwrap();
        let names = model.param_names();
        adam_moments = names
            .iter()
            .zip(&adam.m)
            .map(|(n, t)| (format!("adam.m.{n}"), t.clone()))
            .chain(
                names
                    .iter()
                    .zip(&adam.v)
                    .map(|(n, t)| (format!("adam.v.{n}"), t.clone())),
            )
            .collect();
        tensors.extend(adam_moments.iter().map(|(n, t)| (n.clone(), t)));
    }
    for (name, t) in &tensors {
        writeln!(header, "tensor {name} = {}", shape_str(t.shape())).unwrap();
    }

    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for (_, t) in &tensors {
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::Io(path.to_path_buf(), e))
}

/// Loads a checkpoint saved by [`save`]. The model is rebuilt from the
/// embedded spec; every tensor shape is validated against it.
pub fn load<T: Scalar>(path: &Path) -> Result<(Model<T>, u64, Option<AdamState<T>>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io(path.to_path_buf(), e))?;
    if bytes.len() < 20 {
        return Err(Error::CorruptCheckpoint("file too short".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: VERSION });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if bytes.len() < 20 + header_len {
        return Err(Error::CorruptCheckpoint("truncated header".into()));
    }
    let header = std::str::from_utf8(&bytes[20..20 + header_len])
        .map_err(|_| Error::CorruptCheckpoint("header is not UTF-8".into()))?;

    let mut kv: BTreeMap<String, String> = BTreeMap::new();
    let mut tensor_table: Vec<(String, Vec<usize>)> = Vec::new();
    for line in header.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::CorruptCheckpoint(format!("bad header line `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if let Some(name) = key.strip_prefix("tensor ") {
            tensor_table.push((name.trim().to_string(), parse_shape(value)?));
        } else {
            kv.insert(key.to_string(), value.to_string());
        }
    }

    let dtype = kv
        .get("dtype")
        .ok_or_else(|| Error::CorruptCheckpoint("missing dtype".into()))?;
    if dtype != T::DTYPE {
        return Err(Error::CheckpointDtype {
            found: dtype.clone(),
            expected: T::DTYPE.to_string(),
        });
    }
    let epoch: u64 = kv
        .get("epoch")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::CorruptCheckpoint("missing epoch".into()))?;

    let spec_kv: BTreeMap<String, String> = kv
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("spec.").map(|k| (k.to_string(), v.clone())))
        .collect();
    let spec = NetworkSpec::from_kv(&spec_kv)?;
    let mut model = Model::<T>::new(spec, &mut Rng::new(0))?;

    // read payloads in table order
    let mut offset = 20 + header_len;
    let mut payload: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for (name, shape) in &tensor_table {
        let numel: usize = shape.iter().product();
        let nbytes = numel * T::BYTE_WIDTH;
        if bytes.len() < offset + nbytes {
            return Err(Error::CorruptCheckpoint(format!(
                "truncated payload at tensor `{name}`"
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            data.push(T::read_le(&bytes[offset + i * T::BYTE_WIDTH..]));
        }
        offset += nbytes;
        payload.insert(name.clone(), Tensor::new(shape, data)?);
    }

    for (name, dst) in model.state_tensors_mut() {
        let src = payload.get(&name).ok_or_else(|| {
            Error::CorruptCheckpoint(format!("missing tensor `{name}`"))
        })?;
        if src.shape() != dst.shape() {
            return Err(Error::CheckpointShape {
                name,
                found: src.shape().to_vec(),
                expected: dst.shape().to_vec(),
            });
        }
        *dst = src.clone();
    }

    let rng_states: BTreeMap<String, u64> = kv
        .iter()
        .filter_map(|(k, v)| {
            k.strip_prefix("rng.")
                .and_then(|name| v.parse().ok().map(|s| (name.to_string(), s)))
        })
        .collect();
    model.set_rng_states(&rng_states)?;

    let adam = if let Some(t) = kv.get("adam.t") {
        let t: u64 = t
            .parse()
            .map_err(|_| Error::CorruptCheckpoint("bad adam.t".into()))?;
        let lr: f64 = kv
            .get("adam.lr")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::CorruptCheckpoint("missing adam.lr".into()))?;
        let wd: f64 = kv
            .get("adam.weight_decay")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::CorruptCheckpoint("missing adam.weight_decay".into()))?;
        let mut adam = AdamState::for_model(lr, wd, &model);
        adam.t = t;
        for (i, name) in model.param_names().iter().enumerate() {
            for (prefix, dst) in [("adam.m.", &mut adam.m[i]), ("adam.v.", &mut adam.v[i])] {
                let key = format!("{prefix}{name}");
                let src = payload
                    .get(&key)
                    .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor `{key}`")))?;
                if src.shape() != dst.shape() {
                    return Err(Error::CheckpointShape {
                        name: key,
                        found: src.shape().to_vec(),
                        expected: dst.shape().to_vec(),
                    });
                }
                *dst = src.clone();
            }
        }
        Some(adam)
    } else {
        None
    };

    Ok((model, epoch, adam))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model() -> Model<f32> {
        Model::new(NetworkSpec::small_gradcheck(), &mut Rng::new(42)).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let model = small_model();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save(&model, 3, None, &p1).unwrap();
        let (loaded, epoch, adam) = load::<f32>(&p1).unwrap();
        assert_eq!(epoch, 3);
        assert!(adam.is_none());
        save(&loaded, 3, None, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn adam_state_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let model = small_model();
        let mut adam = AdamState::for_model(1e-4, 0.01, &model);
        adam.t = 17;
        adam.m[0].data_mut()[0] = 0.25;
        adam.v[3].data_mut()[0] = 0.5;
        let p = dir.path().join("a.ckpt");
        save(&model, 1, Some(&adam), &p).unwrap();
        let (_, _, back) = load::<f32>(&p).unwrap();
        let back = back.unwrap();
        assert_eq!(back.t, 17);
        assert_eq!(back.lr, 1e-4);
        assert_eq!(back.m[0].data()[0], 0.25);
        assert_eq!(back.v[3].data()[0], 0.5);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ckpt");
        save(&small_model(), 0, None, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        let err = load::<f32>(&p).unwrap_err();
        assert!(matches!(err, Error::CorruptCheckpoint(_)), "{err}");
    }

    #[test]
    fn bad_magic_and_bad_version_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&small_model(), 0, None, &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            load::<f32>(&p).unwrap_err(),
            Error::CorruptCheckpoint(_)
        ));

        let mut bytes = std::fs::read(&p).unwrap();
        bytes[..8].copy_from_slice(MAGIC);
        bytes[8] = 9; // version 9
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            load::<f32>(&p).unwrap_err(),
            Error::CheckpointVersion { found: 9, .. }
        ));
    }

    #[test]
    fn dtype_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ckpt");
        save(&small_model(), 0, None, &p).unwrap();
        assert!(matches!(
            load::<f64>(&p).unwrap_err(),
            Error::CheckpointDtype { .. }
        ));
    }

    #[test]
    fn rng_states_survive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = small_model();
        // advance a stream so states are non-trivial
        let _: Tensor<f32> = model.branches[1].drop_in.draw_mask(&[2, 4]);
        let p = dir.path().join("r.ckpt");
        save(&model, 0, None, &p).unwrap();
        let (loaded, _, _) = load::<f32>(&p).unwrap();
        assert_eq!(model.rng_states(), loaded.rng_states());
    }
}
