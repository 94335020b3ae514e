//! Checkpoint format: a directory holding `manifest.json` (architecture,
//! class binding, loss weights, flags, per-parameter index) and
//! `weights.bin` (little-endian f64 blobs in manifest order). Writes go to a
//! temp directory that is renamed into place, so a crash never leaves a half
//! checkpoint. Loading rebuilds the model from the manifest and restores
//! every parameter bit for bit.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::arch::ArchConfig;
use crate::decoder::DecoderManifest;
use crate::error::{Error, Result};
use crate::model::{ModelFlags, RoadsModel};
use crate::training::{KdForm, LossWeights};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the weights blob.
    offset: usize,
    trainable: bool,
    lr_scale: f64,
    decay: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    classes: Vec<String>,
    arch: ArchConfig,
    flags: ModelFlags,
    loss_weights: LossWeights,
    kd_form: KdForm,
    decoder: DecoderManifest,
    params: Vec<ParamRecord>,
}

/// A loaded checkpoint: the model plus the training context it was saved
/// with.
pub struct Checkpoint {
    pub model: RoadsModel,
    pub loss_weights: LossWeights,
    pub kd_form: KdForm,
}

pub fn save_checkpoint(
    model: &RoadsModel,
    loss_weights: &LossWeights,
    kd_form: KdForm,
    dir: &Path,
) -> Result<()> {
    let mut params = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (_, entry) in model.store.entries() {
        params.push(ParamRecord {
            name: entry.name.clone(),
            shape: entry.value.shape().to_vec(),
            offset,
            trainable: entry.trainable,
            lr_scale: entry.lr_scale,
            decay: entry.decay,
        });
        for v in entry.value.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += entry.value.len();
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        classes: model.classes.clone(),
        arch: model.arch.clone(),
        flags: model.flags,
        loss_weights: *loss_weights,
        kd_form,
        decoder: model.decoder.manifest.clone(),
        params,
    };

    let parent = dir.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let tmp = tmp_sibling(dir);
    std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let write_all = || -> Result<()> {
        let mpath = tmp.join(MANIFEST_FILE);
        let mut f = std::fs::File::create(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Data(format!("manifest serialization failed: {e}")))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&mpath, e))?;
        let wpath = tmp.join(WEIGHTS_FILE);
        std::fs::write(&wpath, &blob).map_err(|e| Error::io(&wpath, e))?;
        Ok(())
    };
    if let Err(e) = write_all() {
        let _ = std::fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn tmp_sibling(dir: &Path) -> PathBuf {
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    let name = format!(
        ".{}.tmp-{stamp}-{}",
        dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        std::process::id()
    );
    dir.parent().unwrap_or_else(|| Path::new(".")).join(name)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("invalid checkpoint manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint format version {}",
            manifest.format_version
        )));
    }
    if manifest.classes.len() != manifest.arch.num_classes {
        return Err(Error::Data(format!(
            "manifest lists {} classes but the architecture expects {}",
            manifest.classes.len(),
            manifest.arch.num_classes
        )));
    }
    let wpath = dir.join(WEIGHTS_FILE);
    let blob = std::fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;

    let mut model = RoadsModel::new(
        manifest.arch.clone(),
        manifest.classes.clone(),
        manifest.flags,
        0,
    )?;
    if model.decoder.manifest != manifest.decoder {
        return Err(Error::Data(
            "checkpoint decoder manifest does not match the rebuilt architecture".into(),
        ));
    }
    let mut restored = 0usize;
    for rec in &manifest.params {
        let id = model
            .store
            .id_by_name(&rec.name)
            .ok_or_else(|| Error::Data(format!("checkpoint has unknown parameter {}", rec.name)))?;
        let expected_shape = model.store.value(id).shape().to_vec();
        if expected_shape != rec.shape {
            return Err(Error::Data(format!(
                "parameter {} shape mismatch: checkpoint {:?}, model {:?}",
                rec.name, rec.shape, expected_shape
            )));
        }
        let len: usize = rec.shape.iter().product();
        let start = rec.offset * 8;
        let end = start + len * 8;
        if end > blob.len() {
            return Err(Error::Data(format!(
                "weights blob too small for parameter {}",
                rec.name
            )));
        }
        let vals: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&rec.shape), vals)
            .map_err(|e| Error::Data(format!("parameter {}: {e}", rec.name)))?;
        model.store.set_value(id, arr);
        model.store.set_trainable(id, rec.trainable);
        restored += 1;
    }
    if restored != model.store.len() {
        return Err(Error::Data(format!(
            "checkpoint restored {restored} of {} parameters",
            model.store.len()
        )));
    }
    Ok(Checkpoint {
        model,
        loss_weights: manifest.loss_weights,
        kd_form: manifest.kd_form,
    })
}
