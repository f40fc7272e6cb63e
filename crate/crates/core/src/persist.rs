//! Binary tensor container and model checkpoints.
//!
//! Layout: 8-byte magic, u32 version, u64 manifest length, manifest JSON,
//! then contiguous little-endian f64 payloads. The manifest carries named
//! tensor descriptors (name, dtype, shape, byte offset) plus a free-form
//! string metadata map, so checkpoints are self-describing and the format
//! stays language-neutral.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{StudentModel, VisionDecoder, VitConfig};
use crate::error::{CoreError, Result};
use crate::graph::Param;
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"CLBTNSR\0";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<TensorEntry>,
    meta: BTreeMap<String, String>,
}

/// An ordered collection of named matrices plus string metadata.
#[derive(Debug, Default)]
pub struct TensorFile {
    pub tensors: Vec<(String, Matrix)>,
    pub meta: BTreeMap<String, String>,
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn push(&mut self, name: impl Into<String>, m: Matrix) {
        self.tensors.push((name.into(), m));
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, m) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: "f64".into(),
                shape: vec![m.rows, m.cols],
                offset,
            });
            offset += (m.len() * 8) as u64;
        }
        let manifest = serde_json::to_vec(&Manifest {
            tensors: entries,
            meta: self.meta.clone(),
        })
        .map_err(|e| CoreError::Checkpoint(format!("manifest encode: {e}")))?;

        let file = std::fs::File::create(path)
            .map_err(|e| CoreError::io(path.display().to_string(), e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e: std::io::Error| CoreError::io(path.display().to_string(), e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(manifest.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&manifest).map_err(io)?;
        for (_, m) in &self.tensors {
            for v in &m.data {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| CoreError::io(path.display().to_string(), e))?;
        let mut r = std::io::BufReader::new(file);
        let io = |e: std::io::Error| CoreError::io(path.display().to_string(), e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(CoreError::Checkpoint(format!(
                "{}: bad magic, not a tensor container",
                path.display()
            )));
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4).map_err(io)?;
        let version = u32::from_le_bytes(buf4);
        if version != VERSION {
            return Err(CoreError::Checkpoint(format!(
                "unsupported container version {version}"
            )));
        }
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8).map_err(io)?;
        let mlen = u64::from_le_bytes(buf8) as usize;
        let mut mbytes = vec![0u8; mlen];
        r.read_exact(&mut mbytes).map_err(io)?;
        let manifest: Manifest = serde_json::from_slice(&mbytes)
            .map_err(|e| CoreError::Checkpoint(format!("manifest decode: {e}")))?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(io)?;

        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            if e.dtype != "f64" {
                return Err(CoreError::Checkpoint(format!(
                    "tensor `{}` has unsupported dtype {}",
                    e.name, e.dtype
                )));
            }
            if e.shape.len() != 2 {
                return Err(CoreError::Checkpoint(format!(
                    "tensor `{}` is not 2-d",
                    e.name
                )));
            }
            let count = e.shape[0] * e.shape[1];
            let start = e.offset as usize;
            let end = start + count * 8;
            if end > payload.len() {
                return Err(CoreError::Checkpoint(format!(
                    "tensor `{}` payload out of range",
                    e.name
                )));
            }
            let mut data = Vec::with_capacity(count);
            for chunk in payload[start..end].chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
            tensors.push((e.name.clone(), Matrix::from_vec(e.shape[0], e.shape[1], data)));
        }
        Ok(TensorFile {
            tensors,
            meta: manifest.meta,
        })
    }
}

// ── checkpoints ──────────────────────────────────────────────────────────────

pub const KIND_STUDENT: &str = "student";
pub const KIND_FINETUNED: &str = "finetuned";

/// Writes a checkpoint containing the student (and optionally the decoder),
/// a RunConfig TOML snapshot, and RNG/progress state.
pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    student: &StudentModel,
    decoder: Option<&VisionDecoder>,
    config_toml: &str,
    rng_meta: &BTreeMap<String, String>,
) -> Result<()> {
    let mut tf = TensorFile::default();
    tf.meta.insert("kind".into(), kind.into());
    tf.meta.insert("config_toml".into(), config_toml.into());
    tf.meta
        .insert("d_anchor".into(), student.d_anchor.to_string());
    tf.meta.insert(
        "vit_config".into(),
        serde_json::to_string(&student.vit.cfg)
            .map_err(|e| CoreError::Checkpoint(format!("vit config: {e}")))?,
    );
    for (k, v) in rng_meta {
        tf.meta.insert(format!("rng.{k}"), v.clone());
    }
    for p in student.params() {
        tf.push(format!("student.{}", p.name), (*p.value).clone());
    }
    if let Some(d) = decoder {
        for p in d.params() {
            tf.push(format!("decoder.{}", p.name), (*p.value).clone());
        }
    }
    tf.write(path)
}

pub struct LoadedCheckpoint {
    pub kind: String,
    pub config_toml: String,
    pub student: StudentModel,
    pub decoder: Option<VisionDecoder>,
    pub rng_meta: BTreeMap<String, String>,
}

/// Rebuilds models from a checkpoint. The student comes back frozen when the
/// checkpoint is a fine-tuned one (matching how it is used downstream).
pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let tf = TensorFile::read(path)?;
    let kind = tf
        .meta
        .get("kind")
        .ok_or_else(|| CoreError::Checkpoint("missing kind".into()))?
        .clone();
    let config_toml = tf
        .meta
        .get("config_toml")
        .ok_or_else(|| CoreError::Checkpoint("missing config snapshot".into()))?
        .clone();
    let d_anchor: usize = tf
        .meta
        .get("d_anchor")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CoreError::Checkpoint("missing d_anchor".into()))?;
    let vit_cfg: VitConfig = tf
        .meta
        .get("vit_config")
        .ok_or_else(|| CoreError::Checkpoint("missing vit config".into()))
        .and_then(|s| {
            serde_json::from_str(s).map_err(|e| CoreError::Checkpoint(format!("vit config: {e}")))
        })?;

    let mut student = StudentModel::new(vit_cfg, d_anchor, 0)?;
    for p in student.params_mut() {
        restore_param(&tf, "student.", p)?;
    }
    let decoder = if tf.tensors.iter().any(|(n, _)| n.starts_with("decoder.")) {
        let mut d = VisionDecoder::new(d_anchor, 0);
        for p in d.params_mut() {
            restore_param(&tf, "decoder.", p)?;
        }
        Some(d)
    } else {
        None
    };
    if kind == KIND_FINETUNED {
        student.set_frozen(true);
    }
    let rng_meta = tf
        .meta
        .iter()
        .filter_map(|(k, v)| {
            k.strip_prefix("rng.")
                .map(|s| (s.to_string(), v.clone()))
        })
        .collect();
    Ok(LoadedCheckpoint {
        kind,
        config_toml,
        student,
        decoder,
        rng_meta,
    })
}

fn restore_param(tf: &TensorFile, prefix: &str, p: &mut Param) -> Result<()> {
    let name = format!("{prefix}{}", p.name);
    let m = tf
        .get(&name)
        .ok_or_else(|| CoreError::Checkpoint(format!("missing tensor `{name}`")))?;
    if (m.rows, m.cols) != (p.value.rows, p.value.cols) {
        return Err(CoreError::Checkpoint(format!(
            "tensor `{name}` has shape {}x{}, expected {}x{}",
            m.rows, m.cols, p.value.rows, p.value.cols
        )));
    }
    p.set(m.clone());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn container_roundtrip_bitexact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = SplitMix64::new(1);
        let mut tf = TensorFile::default();
        tf.meta.insert("kind".into(), "test".into());
        tf.push("a", Matrix::from_fn(3, 4, |_, _| rng.next_gaussian()));
        tf.push("b", Matrix::from_fn(1, 7, |_, _| rng.next_gaussian()));
        let p1 = dir.path().join("t1.bin");
        tf.write(&p1).unwrap();

        let loaded = TensorFile::read(&p1).unwrap();
        assert_eq!(loaded.meta.get("kind").unwrap(), "test");
        assert_eq!(loaded.get("a").unwrap().data, tf.get("a").unwrap().data);

        // save -> load -> save produces identical bytes
        let p2 = dir.path().join("t2.bin");
        loaded.write(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.bin");
        std::fs::write(&p, b"NOTMAGIC rest of file").unwrap();
        assert!(matches!(
            TensorFile::read(&p),
            Err(CoreError::Checkpoint(_))
        ));
    }

    #[test]
    fn checkpoint_roundtrip() {
        use crate::encoders::{StudentModel, VisionDecoder, VitConfig};
        let dir = tempfile::tempdir().unwrap();
        let cfg = VitConfig {
            d_enc: 32,
            blocks: 2,
            heads: 2,
            mlp_ratio: 2,
            patch: 14,
            input_side: 28,
            layer_ids: vec![],
        };
        let student = StudentModel::new(cfg, 16, 3).unwrap();
        let decoder = VisionDecoder::new(16, 4);
        let p1 = dir.path().join("ck.bin");
        let rng_meta: BTreeMap<String, String> =
            [("seed".to_string(), "7".to_string())].into_iter().collect();
        save_checkpoint(&p1, KIND_FINETUNED, &student, Some(&decoder), "[run]\nseed = 7\n", &rng_meta)
            .unwrap();

        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded.kind, KIND_FINETUNED);
        assert!(loaded.student.is_frozen());
        assert_eq!(loaded.rng_meta.get("seed").unwrap(), "7");
        assert_eq!(loaded.student.param_bytes(), student.param_bytes());

        // round-trip again: bytes identical
        let p2 = dir.path().join("ck2.bin");
        save_checkpoint(
            &p2,
            KIND_FINETUNED,
            &loaded.student,
            loaded.decoder.as_ref(),
            &loaded.config_toml,
            &rng_meta,
        )
        .unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
