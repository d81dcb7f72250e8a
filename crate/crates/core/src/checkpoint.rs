//! On-disk checkpoints: `manifest.txt` (one `key = value` per line) next to `params.bin`.
//!
//! Parameters are stored with their optimizer state under `<name>.velocity` and `<name>.second`.
//!
//! `params.bin` layout, all integers little-endian:
//!
//! ```text
//! magic "CMCRLPB1" | u32 tensor count | per tensor:
//!     u32 name length | name (utf-8) | u32 ndim | u64 per dimension | f32 values (row-major)
//! ```
//!
//! Values are stored as IEEE-754 single precision, so an `f32` model round-trips bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::nn::{Module, Slot};
use crate::scalar::Scalar;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const PARAMS_FILE: &str = "params.bin";
const MAGIC: &[u8; 8] = b"CMCRLPB1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub manifest: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, ArrayD<f32>>,
}

impl Checkpoint {
    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.manifest.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.manifest
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("manifest lacks key '{key}'")))
    }

    pub fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("manifest key '{key}' has unreadable value '{raw}'")))
    }

    pub fn insert_tensor<T: Scalar>(&mut self, name: impl Into<String>, values: &ArrayD<T>) {
        self.tensors
            .insert(name.into(), values.mapv(|v| v.as_f64() as f32));
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<ArrayD<T>> {
        self.tensors
            .get(name)
            .map(|a| a.mapv(|v| T::lit(v as f64)))
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks tensor '{name}'")))
    }

    /// Stores every parameter (value and optimizer moments) and buffer of `module` under
    /// `prefix`.
    pub fn store_module<T: Scalar, M: Module<T> + Clone>(&mut self, prefix: &str, module: &M) {
        let mut copy = module.clone();
        copy.visit(prefix, &mut |name, slot| match slot {
            Slot::Param(p) => {
                self.insert_tensor(name.clone(), &p.value);
                self.insert_tensor(format!("{name}.velocity"), &p.velocity);
                self.insert_tensor(format!("{name}.second"), &p.second);
            }
            Slot::Buffer(b) => self.insert_tensor(name, b),
        });
    }

    /// Inverse of [`Checkpoint::store_module`]. Every slot must be present with its shape.
    pub fn restore_module<T: Scalar, M: Module<T>>(&self, prefix: &str, module: &mut M) -> Result<()> {
        let mut failure = None;
        let load = |name: &str, dst: &mut ArrayD<T>| -> Result<()> {
            let src = self.tensor::<T>(name)?;
            if src.shape() != dst.shape() {
                return Err(Error::ManifestMismatch(format!(
                    "tensor '{name}' has shape {:?} in the checkpoint, model expects {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src;
            Ok(())
        };
        module.visit(prefix, &mut |name, slot| {
            if failure.is_some() {
                return;
            }
            let result = match slot {
                Slot::Param(p) => load(&name, &mut p.value)
                    .and_then(|_| load(&format!("{name}.velocity"), &mut p.velocity))
                    .and_then(|_| load(&format!("{name}.second"), &mut p.second)),
                Slot::Buffer(b) => load(&name, b),
            };
            if let Err(e) = result {
                failure = Some(e);
            }
        });
        failure.map_or(Ok(()), Err)
    }

    /// Fails with a manifest diff when any of `keys` differs from `expected`.
    pub fn check_keys(&self, expected: &BTreeMap<String, String>, keys: impl Fn(&str) -> bool) -> Result<()> {
        let mut diffs = Vec::new();
        let names: std::collections::BTreeSet<&String> = expected
            .keys()
            .chain(self.manifest.keys())
            .filter(|k| keys(k))
            .collect();
        for k in names {
            let have = self.manifest.get(k);
            let want = expected.get(k);
            if have != want {
                diffs.push(format!(
                    "{k}: checkpoint={} config={}",
                    have.map_or("<missing>", String::as_str),
                    want.map_or("<missing>", String::as_str)
                ));
            }
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::ManifestMismatch(diffs.join("; ")))
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let mut text = String::new();
        for (k, v) in &self.manifest {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Checkpoint(format!("manifest entry '{k}' cannot be written")));
            }
            text.push_str(&format!("{k} = {v}\n"));
        }
        fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
        let params_path = dir.join(PARAMS_FILE);
        let file = fs::File::create(&params_path).map_err(|e| Error::io(&params_path, e))?;
        let mut w = BufWriter::new(file);
        write_tensors(&mut w, &self.tensors)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&params_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let params_path = dir.join(PARAMS_FILE);
        for p in [&manifest_path, &params_path] {
            if !p.is_file() {
                return Err(Error::NotFound(p.clone()));
            }
        }
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let mut manifest = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once(" = ").ok_or_else(|| {
                Error::Checkpoint(format!("{}:{}: expected 'key = value'", manifest_path.display(), n + 1))
            })?;
            manifest.insert(k.to_string(), v.to_string());
        }
        let file = fs::File::open(&params_path).map_err(|e| Error::io(&params_path, e))?;
        let tensors = read_tensors(&mut BufReader::new(file), &params_path)?;
        Ok(Self { manifest, tensors })
    }
}

fn write_tensors<W: Write>(w: &mut W, tensors: &BTreeMap<String, ArrayD<f32>>) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_tensors<R: Read>(r: &mut R, path: &Path) -> Result<BTreeMap<String, ArrayD<f32>>> {
    let corrupt = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
    let mut read = |buf: &mut [u8]| r.read_exact(buf).map_err(|_| corrupt("truncated parameter file"));
    let mut magic = [0u8; 8];
    read(&mut magic)?;
    if &magic != MAGIC {
        return Err(corrupt("not a parameter file"));
    }
    let mut u32b = [0u8; 4];
    let mut u64b = [0u8; 8];
    read(&mut u32b)?;
    let count = u32::from_le_bytes(u32b);
    let mut out = BTreeMap::new();
    for _ in 0..count {
        read(&mut u32b)?;
        let mut name = vec![0u8; u32::from_le_bytes(u32b) as usize];
        read(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| corrupt("tensor name is not utf-8"))?;
        read(&mut u32b)?;
        let ndim = u32::from_le_bytes(u32b) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            read(&mut u64b)?;
            shape.push(u64::from_le_bytes(u64b) as usize);
        }
        let len: usize = shape.iter().product();
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            read(&mut u32b)?;
            values.push(f32::from_le_bytes(u32b));
        }
        let t = ArrayD::from_shape_vec(IxDyn(&shape), values).map_err(|_| corrupt("bad tensor shape"))?;
        out.insert(name, t);
    }
    Ok(out)
}

/// `dir/manifest.txt` if it exists, else a not-found error naming it.
pub fn require(dir: &Path) -> Result<PathBuf> {
    let p = dir.join(MANIFEST_FILE);
    if p.is_file() {
        Ok(p)
    } else {
        Err(Error::NotFound(p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Encoder, EncoderConfig};

    #[test]
    fn encoder_round_trip_is_bit_exact() {
        let cfg = EncoderConfig {
            stage_widths: [4, 4, 8, 8],
            embedding_dim: 6,
            use_ibn: true,
            ..Default::default()
        };
        let enc = Encoder::<f32>::new(cfg.clone(), 11).unwrap();
        let mut ck = Checkpoint::default();
        ck.set("epoch", 3);
        ck.store_module("encoder", &enc);
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.parse::<usize>("epoch").unwrap(), 3);
        let mut fresh = Encoder::<f32>::new(cfg, 99).unwrap();
        assert_ne!(fresh.checksum(), enc.checksum());
        back.restore_module("encoder", &mut fresh).unwrap();
        assert_eq!(fresh.checksum(), enc.checksum());
    }

    #[test]
    fn missing_files_and_diffs_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::NotFound(_))));
        let mut ck = Checkpoint::default();
        ck.set("model.embedding_dim", 512);
        let mut want = BTreeMap::new();
        want.insert("model.embedding_dim".to_string(), "256".to_string());
        let err = ck.check_keys(&want, |k| k.starts_with("model.")).unwrap_err();
        assert!(matches!(err, Error::ManifestMismatch(ref m) if m.contains("checkpoint=512 config=256")));
    }
}
