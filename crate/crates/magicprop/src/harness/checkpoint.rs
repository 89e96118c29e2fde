//! Checkpoint container: magic "MPRP", a u32 format version, a JSON header
//! (run config, schedule descriptor, latent scale, condition channel-order
//! tag, trained flags, optimizer step, tensor manifest) and a raw payload
//! of little-endian f32 tensors at the manifest offsets.
//!
//! Loading validates the magic, version, offset layout and shapes, then
//! recomputes the noise schedule from its descriptor and verifies the
//! stored terminal alpha. Saving is canonical, so save(load(x)) is
//! byte-identical to x.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::adaptor::{Adaptor, RefEncoder, RefEncoderDims};
use crate::codec::{Codec, CodecDims};
use crate::error::{Error, Result};
use crate::pipeline::PropBundle;
use crate::propnet::{PropNet, PropNetDims, CHANNEL_ORDER};
use crate::schedule::ScheduleDescriptor;
use crate::tensor::{AdamState, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MPRP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    /// Element count.
    pub len: u64,
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct TrainedFlags {
    pub codec: bool,
    pub encoder: bool,
    pub prop: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: TrainConfig,
    pub schedule: Option<ScheduleDescriptor>,
    pub latent_scale: f32,
    pub channel_order: String,
    pub trained: TrainedFlags,
    pub optimizer_step: Option<u64>,
    pub manifest: Vec<ManifestEntry>,
}

/// Raw checkpoint contents: header plus named tensors in manifest order.
pub struct RawCheckpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor)>,
}

/// Extra (non-model) tensors appended to the payload, e.g. optimizer
/// moments.
pub struct ExtraTensors<'a> {
    pub entries: Vec<(String, &'a [f32])>,
}

pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    config: &TrainConfig,
    schedule: Option<ScheduleDescriptor>,
    latent_scale: f32,
    trained: TrainedFlags,
    optimizer: Option<&AdamState>,
) -> Result<()> {
    let mut manifest = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let push_tensor = |name: &str, shape: Vec<usize>, data: &[f32], trainable: bool,
                           manifest: &mut Vec<ManifestEntry>,
                           payload: &mut Vec<u8>| {
        manifest.push(ManifestEntry {
            name: name.to_string(),
            shape,
            offset: payload.len() as u64,
            len: data.len() as u64,
            trainable,
        });
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };

    for (name, tensor, trainable) in store.iter_named() {
        push_tensor(
            name,
            tensor.shape().to_vec(),
            tensor.data(),
            trainable,
            &mut manifest,
            &mut payload,
        );
    }
    if let Some(state) = optimizer {
        for (id, m, v) in state.slots() {
            let pname = store.name(id).to_string();
            push_tensor(
                &format!("optim.m.{pname}"),
                vec![m.len()],
                m,
                false,
                &mut manifest,
                &mut payload,
            );
            push_tensor(
                &format!("optim.v.{pname}"),
                vec![v.len()],
                v,
                false,
                &mut manifest,
                &mut payload,
            );
        }
    }

    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        schedule,
        latent_scale,
        channel_order: CHANNEL_ORDER.to_string(),
        trained,
        optimizer_step: optimizer.map(|s| s.step),
        manifest,
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut bytes = Vec::with_capacity(16 + header_json.len() + payload.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&payload);

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<RawCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + header_len])?;
    let payload = &bytes[16 + header_len..];

    // Offsets must be non-overlapping, in order, and inside the file.
    let mut expected_offset = 0u64;
    let mut names = HashSet::new();
    for entry in &header.manifest {
        if entry.offset != expected_offset {
            return Err(Error::Checkpoint(format!(
                "manifest entry {} at offset {} (expected {expected_offset})",
                entry.name, entry.offset
            )));
        }
        let elems: usize = entry.shape.iter().product::<usize>().max(1);
        if entry.shape.iter().product::<usize>() != entry.len as usize && elems != entry.len as usize
        {
            return Err(Error::Checkpoint(format!(
                "manifest entry {}: shape/len mismatch",
                entry.name
            )));
        }
        if !names.insert(entry.name.clone()) {
            return Err(Error::Checkpoint(format!("duplicate tensor {}", entry.name)));
        }
        expected_offset += entry.len * 4;
    }
    if expected_offset as usize != payload.len() {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, manifest covers {expected_offset}",
            payload.len()
        )));
    }

    let mut tensors = Vec::with_capacity(header.manifest.len());
    for entry in &header.manifest {
        let start = entry.offset as usize;
        let end = start + entry.len as usize * 4;
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((entry.name.clone(), Tensor::new(&entry.shape, data)?));
    }
    Ok(RawCheckpoint {
        header,
        tensors,
    })
}

/// Copy all model tensors (names not starting with "optim.") into an
/// already-built store; every store parameter must be present.
pub fn load_into_store(raw: &RawCheckpoint, store: &mut ParamStore) -> Result<()> {
    for (name, tensor) in &raw.tensors {
        if name.starts_with("optim.") {
            continue;
        }
        store.load_named(name, tensor.shape(), tensor.data().to_vec())?;
    }
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        if !raw.tensors.iter().any(|(n, _)| n == &name) {
            return Err(Error::Checkpoint(format!("checkpoint is missing tensor {name}")));
        }
    }
    Ok(())
}

/// Copy one weight group (names under `prefix`) into a store that may hold
/// other groups too; every store parameter under the prefix must be
/// covered.
pub fn load_group(raw: &RawCheckpoint, store: &mut ParamStore, prefix: &str) -> Result<()> {
    for (name, tensor) in &raw.tensors {
        if name.starts_with(prefix) {
            store.load_named(name, tensor.shape(), tensor.data().to_vec())?;
        }
    }
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        if name.starts_with(prefix) && !raw.tensors.iter().any(|(n, _)| n == &name) {
            return Err(Error::Checkpoint(format!(
                "checkpoint is missing tensor {name}"
            )));
        }
    }
    Ok(())
}

/// Restore optimizer moments for the store's trainable parameters.
pub fn load_optimizer(raw: &RawCheckpoint, store: &ParamStore, state: &mut AdamState) -> Result<()> {
    let find = |name: &str| -> Result<Vec<f32>> {
        raw.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.data().to_vec())
            .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {name}")))
    };
    for (idx, &id) in state.ids().to_vec().iter().enumerate() {
        let pname = store.name(id).to_string();
        let m = find(&format!("optim.m.{pname}"))?;
        let v = find(&format!("optim.v.{pname}"))?;
        state.load_slot(idx, m, v)?;
    }
    state.step = raw
        .header
        .optimizer_step
        .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer step".into()))?;
    Ok(())
}

/// Rebuild the codec from a checkpoint written by train-codec.
pub fn load_codec(path: &Path) -> Result<(ParamStore, Codec, TrainedFlags, TrainConfig)> {
    let raw = read_checkpoint(path)?;
    let cfg = raw.header.config.clone();
    let mut store = ParamStore::new();
    let mut codec = Codec::build(
        &mut store,
        CodecDims {
            widths: cfg.codec.widths,
        },
        cfg.seed,
        false,
    );
    load_into_store(&raw, &mut store)?;
    codec.latent_scale = raw.header.latent_scale;
    Ok((store, codec, raw.header.trained, cfg))
}

/// Rebuild the reference encoder from a checkpoint written by
/// train-encoder.
pub fn load_encoder(path: &Path) -> Result<(ParamStore, RefEncoder, TrainedFlags, TrainConfig)> {
    let raw = read_checkpoint(path)?;
    let cfg = raw.header.config.clone();
    let mut store = ParamStore::new();
    let mut enc = RefEncoder::build(
        &mut store,
        RefEncoderDims {
            embed: cfg.encoder.embed,
            widths: cfg.encoder.widths,
        },
        cfg.seed,
        false,
    );
    load_into_store(&raw, &mut store)?;
    enc.trained = raw.header.trained.encoder;
    Ok((store, enc, raw.header.trained, cfg))
}

/// Build the joint store layout used by propagation training and the full
/// bundle checkpoint: codec and encoder frozen, adaptor and denoiser
/// trainable when requested.
pub fn build_joint_store(
    cfg: &TrainConfig,
    trainable_prop: bool,
) -> Result<(ParamStore, Codec, RefEncoder, Adaptor, PropNet)> {
    let mut store = ParamStore::new();
    let codec = Codec::build(
        &mut store,
        CodecDims {
            widths: cfg.codec.widths,
        },
        cfg.seed,
        false,
    );
    let encoder = RefEncoder::build(
        &mut store,
        RefEncoderDims {
            embed: cfg.encoder.embed,
            widths: cfg.encoder.widths,
        },
        cfg.seed,
        false,
    );
    let adaptor = Adaptor::build(&mut store, cfg.encoder.embed, cfg.seed, trainable_prop)?;
    let denoiser = PropNet::build(
        &mut store,
        PropNetDims {
            base: cfg.prop.base,
            mid: cfg.prop.mid,
            token_dim: cfg.encoder.embed,
            attn_dim: cfg.prop.attn_dim,
            time_dim: cfg.prop.time_dim,
        },
        cfg.seed,
        trainable_prop,
    );
    Ok((store, codec, encoder, adaptor, denoiser))
}

/// Load the full propagation bundle (all four weight groups) from a
/// checkpoint written by train-prop.
pub fn load_prop_bundle(path: &Path) -> Result<PropBundle> {
    let raw = read_checkpoint(path)?;
    if raw.header.channel_order != CHANNEL_ORDER {
        return Err(Error::Checkpoint(format!(
            "condition channel order {} is not supported (expected {CHANNEL_ORDER})",
            raw.header.channel_order
        )));
    }
    let cfg = raw.header.config.clone();
    let (mut store, mut codec, mut encoder, adaptor, denoiser) = build_joint_store(&cfg, false)?;
    load_into_store(&raw, &mut store)?;
    codec.latent_scale = raw.header.latent_scale;
    encoder.trained = raw.header.trained.encoder;
    let sched = raw
        .header
        .schedule
        .ok_or_else(|| Error::Checkpoint("bundle checkpoint lacks a schedule".into()))?
        .rebuild()?;
    Ok(PropBundle {
        store,
        codec,
        encoder,
        adaptor,
        denoiser,
        sched,
        config: cfg,
        trained: raw.header.trained.prop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.mprp");
        let mut store = ParamStore::new();
        let mut rng = StreamRng::new(3, 0);
        store.add("a.w", Tensor::randn(&[4, 3], &mut rng), true);
        store.add("b.w", Tensor::randn(&[2, 2, 3, 3], &mut rng), false);
        let cfg = TrainConfig::default();
        let sched = crate::schedule::NoiseSchedule::linear_zero_terminal(64, 1e-4, 2e-2).unwrap();
        save_checkpoint(
            &path,
            &store,
            &cfg,
            Some(sched.descriptor()),
            1.25,
            TrainedFlags::default(),
            None,
        )
        .unwrap();
        let bytes_a = std::fs::read(&path).unwrap();

        let raw = read_checkpoint(&path).unwrap();
        let mut store2 = ParamStore::new();
        store2.add("a.w", Tensor::zeros(&[4, 3]), true);
        store2.add("b.w", Tensor::zeros(&[2, 2, 3, 3]), false);
        load_into_store(&raw, &mut store2).unwrap();
        let path2 = dir.path().join("w2.mprp");
        save_checkpoint(
            &path2,
            &store2,
            &raw.header.config,
            raw.header.schedule,
            raw.header.latent_scale,
            raw.header.trained,
            None,
        )
        .unwrap();
        let bytes_b = std::fs::read(&path2).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn corrupted_magic_and_offsets_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.mprp");
        let mut store = ParamStore::new();
        store.add("a", Tensor::zeros(&[4]), true);
        save_checkpoint(
            &path,
            &store,
            &TrainConfig::default(),
            None,
            1.0,
            TrainedFlags::default(),
            None,
        )
        .unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_checkpoint(&path).is_err());

        // Truncated payload.
        let path2 = dir.path().join("w2.mprp");
        save_checkpoint(
            &path2,
            &store,
            &TrainConfig::default(),
            None,
            1.0,
            TrainedFlags::default(),
            None,
        )
        .unwrap();
        let bytes = std::fs::read(&path2).unwrap();
        std::fs::write(&path2, &bytes[..bytes.len() - 4]).unwrap();
        assert!(read_checkpoint(&path2).is_err());
    }

    #[test]
    fn schedule_descriptor_is_verified_on_bundle_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prop.mprp");
        let mut cfg = TrainConfig::default();
        cfg.prop.steps = 1;
        let (store, codec, _enc, _ad, _dn) = build_joint_store(&cfg, false).unwrap();
        let sched = cfg.schedule.build().unwrap();
        let mut desc = sched.descriptor();
        desc.alpha_terminal = 0.123; // wrong on purpose
        save_checkpoint(
            &path,
            &store,
            &cfg,
            Some(desc),
            codec.latent_scale,
            TrainedFlags {
                codec: true,
                encoder: true,
                prop: true,
            },
            None,
        )
        .unwrap();
        assert!(load_prop_bundle(&path).is_err());
    }
}
