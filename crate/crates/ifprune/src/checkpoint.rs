//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//!   magic "IFPC" | version u32 | config_len u32 | config utf-8
//!   | tensor_count u32
//!   | per tensor: name_len u32, name utf-8, rank u32, dims u64 each,
//!     dtype u8 (0 = f32), row-major f32 payload
//!
//! The config block is `key=value` text (see [`crate::kvconfig`]) carrying
//! model shapes, training stage, and, for pruned exports, the selected
//! channel lists. Compute stays f64; storage is f32. Writes go through a
//! temp file and an atomic rename so a crash cannot leave a half-written
//! checkpoint at the target path.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::kvconfig;
use crate::params::ParamStore;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"IFPC";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// A loaded checkpoint: free-form config plus named tensors (f32 storage
/// widened back to f64).
pub struct Checkpoint {
    pub config: BTreeMap<String, String>,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<(&[usize], &[f64])> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", name)))
    }

    /// Rebuild a parameter store in stored tensor order.
    pub fn into_store(self) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, shape, data) in self.tensors {
            store.add(&name, shape, data);
        }
        store
    }
}

/// Save named tensors with a config block; `tensors` is (name, shape, data).
pub fn save_tensors(
    path: &Path,
    config: &BTreeMap<String, String>,
    tensors: &[(&str, &[usize], &[f64])],
) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let cfg_text = kvconfig::render(config);
        w.write_all(&(cfg_text.len() as u32).to_le_bytes())?;
        w.write_all(cfg_text.as_bytes())?;
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, shape, data) in tensors {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u32).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in *shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            w.write_all(&[DTYPE_F32])?;
            debug_assert_eq!(shape.iter().product::<usize>(), data.len());
            for &v in *data {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Save a whole parameter store.
pub fn save_store(path: &Path, config: &BTreeMap<String, String>, store: &ParamStore) -> Result<()> {
    let tensors: Vec<(&str, &[usize], &[f64])> = store
        .iter()
        .map(|p| (p.name.as_str(), p.shape.as_slice(), p.data.as_slice()))
        .collect();
    save_tensors(path, config, &tensors)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint(format!("truncated while reading {}", what)))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {:?}",
            path.display(),
            magic
        )));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {} (expected {})",
            version, VERSION
        )));
    }
    let cfg_len = read_u32(&mut r, "config length")? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    read_exact(&mut r, &mut cfg_bytes, "config block")?;
    let cfg_text = String::from_utf8(cfg_bytes)
        .map_err(|_| Error::Checkpoint("config block is not utf-8".to_string()))?;
    let config = kvconfig::parse(&cfg_text)?;

    let count = read_u32(&mut r, "tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r, "tensor name length")? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes, "tensor name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".to_string()))?;
        let rank = read_u32(&mut r, &name)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r, &name)? as usize);
        }
        let mut dtype = [0u8; 1];
        read_exact(&mut r, &mut dtype, &name)?;
        if dtype[0] != DTYPE_F32 {
            return Err(Error::Checkpoint(format!(
                "tensor {}: unsupported dtype {}",
                name, dtype[0]
            )));
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 4];
        r.read_exact(&mut payload)
            .map_err(|_| Error::TruncatedTensor { name: name.clone() })?;
        let mut data = Vec::with_capacity(numel);
        for chunk in payload.chunks_exact(4) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
            if !v.is_finite() {
                return Err(Error::Checkpoint(format!(
                    "tensor {}: non-finite value",
                    name
                )));
            }
            data.push(v);
        }
        tensors.push((name, shape, data));
    }
    Ok(Checkpoint { config, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{init_model, ModelConfig};
    use crate::rng::Rng;

    fn small_store() -> ParamStore {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 4,
            n_heads: 2,
            d_ffn: 6,
            t_ffn: 2,
            vocab: 8,
            max_seq: 8,
            ..ModelConfig::default()
        };
        let mut rng = Rng::new(42);
        let mut s = ParamStore::new();
        init_model(&mut s, &cfg, &mut rng);
        s
    }

    #[test]
    fn store_round_trips_within_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let store = small_store();
        let mut config = BTreeMap::new();
        config.insert("stage".to_string(), "cpt".to_string());
        save_store(&path, &config, &store).unwrap();

        let ck = load(&path).unwrap();
        assert_eq!(ck.config["stage"], "cpt");
        assert_eq!(ck.tensors.len(), store.len());
        for (orig, (name, shape, data)) in store.iter().zip(&ck.tensors) {
            assert_eq!(&orig.name, name);
            assert_eq!(&orig.shape, shape);
            for (&a, &b) in orig.data.iter().zip(data) {
                // storage is f32; 1e-6 relative covers the rounding
                assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
            }
        }
        let restored = ck.into_store();
        assert_eq!(restored.len(), store.len());
        assert_eq!(restored.entry(0).name, store.entry(0).name);
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let store = small_store();
        let config = BTreeMap::new();
        save_store(&a, &config, &store).unwrap();
        save_store(&b, &config, &store).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let store = small_store();
        let config = BTreeMap::new();
        save_store(&path, &config, &store).unwrap();

        let bytes = fs::read(&path).unwrap();
        // wrong magic
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
        // wrong version
        let mut bad = bytes.clone();
        bad[4] = 9;
        fs::write(&path, &bad).unwrap();
        assert!(load(&path).is_err());
        // truncated payload
        let bad = &bytes[..bytes.len() - 3];
        fs::write(&path, bad).unwrap();
        assert!(matches!(load(&path), Err(Error::TruncatedTensor { .. })));
        // non-finite value in the last tensor's payload
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 4..].copy_from_slice(&f32::INFINITY.to_le_bytes());
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn no_temp_file_left_behind() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let store = small_store();
        save_store(&path, &BTreeMap::new(), &store).unwrap();
        let entries: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(entries, vec![std::ffi::OsString::from("model.ckpt")]);
    }

    #[test]
    fn pruned_style_tensors_and_config_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pruned.ckpt");
        let shape = [2usize, 3];
        let data = [0.5, -1.0, 2.0, 0.25, 0.0, -0.125];
        let mut config = BTreeMap::new();
        config.insert("pruned.layer0.selected".to_string(), "3,5,9".to_string());
        save_tensors(&path, &config, &[("model.layer0.w1", &shape, &data)]).unwrap();
        let ck = load(&path).unwrap();
        assert_eq!(ck.config["pruned.layer0.selected"], "3,5,9");
        let (s, d) = ck.tensor("model.layer0.w1").unwrap();
        assert_eq!(s, shape);
        assert_eq!(d, data); // these values are exact in f32
        assert!(ck.tensor("nope").is_err());
    }
}
