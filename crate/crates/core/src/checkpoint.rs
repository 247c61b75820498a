//! Named-tensor checkpoint files.
//!
//! Layout: `"SAIMCKPT"` | version u32 | count u32 | per tensor: name length
//! u16, UTF-8 name, ndim u8, dims u32 × ndim, f32 payload. All integers and
//! floats little-endian. Tensor order is preserved, so save → load → save is
//! byte-identical.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::model::{
    init_params, ExportedEncoder, HeadKind, MaskCorruption, ModelConfig, ModelError, ModelParams,
    POS_EMBED,
};
use crate::numerics::Tensor;
use crate::rng::seeded;

pub const MAGIC: &[u8; 8] = b"SAIMCKPT";
pub const VERSION: u32 = 1;

/// Model configuration record.
pub const META_MODEL: &str = "meta.model";
/// Marks an encoder-only export.
pub const META_ENCODER: &str = "meta.encoder";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated at byte offset {offset}: needed {expected} bytes, found {found}")]
    Truncated {
        offset: usize,
        expected: usize,
        found: usize,
    },
    #[error("malformed at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("missing tensor {0}")]
    Missing(String),
    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("bad model record: {0}")]
    Meta(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let found = self.bytes.len() - self.pos;
        if found < n {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                expected: n,
                found,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>, CheckpointError> {
        self.get(name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        r.pos = MAGIC.len();
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CheckpointError::Malformed {
                    offset: at,
                    reason: "tensor name is not UTF-8".into(),
                })?
                .to_string();
            let ndim = r.take(1)?[0] as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let at = r.pos;
            let payload = r.take(n.checked_mul(4).ok_or(CheckpointError::Malformed {
                offset: at,
                reason: "tensor size overflows".into(),
            })?)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed {
                offset: at,
                reason: e.to_string(),
            })?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed {
                offset: r.pos,
                reason: "trailing bytes".into(),
            });
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        Ok(fs::write(path, self.encode())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::decode(&fs::read(path)?)
    }
}

fn encode_config(cfg: &ModelConfig) -> Tensor<f32> {
    let head = match cfg.head {
        HeadKind::Linear => 0,
        HeadKind::Mlp => 1,
        HeadKind::Transformer => 2,
    };
    let v = [
        cfg.image_size,
        cfg.channels,
        cfg.patch_size,
        cfg.embed_dim,
        cfg.depth,
        cfg.decoder_depth,
        cfg.n_heads,
        cfg.mlp_ratio,
        head,
        cfg.head_hidden_dim,
        cfg.share_weights as usize,
        cfg.decoder_reads_previous_layer as usize,
        cfg.mask_corruption.code() as usize,
    ];
    Tensor::from_fn(&[v.len()], |i| v[i] as f32)
}

fn decode_config(t: &Tensor<f32>) -> Result<ModelConfig, CheckpointError> {
    let d = t.data();
    if d.len() != 13 || d.iter().any(|v| v.fract() != 0.0 || *v < 0.0) {
        return Err(CheckpointError::Meta(format!(
            "expected 13 non-negative integers, got {d:?}"
        )));
    }
    let u = |i: usize| d[i] as usize;
    let head = match u(8) {
        0 => HeadKind::Linear,
        1 => HeadKind::Mlp,
        2 => HeadKind::Transformer,
        h => return Err(CheckpointError::Meta(format!("unknown head kind {h}"))),
    };
    let cfg = ModelConfig {
        image_size: u(0),
        channels: u(1),
        patch_size: u(2),
        embed_dim: u(3),
        depth: u(4),
        decoder_depth: u(5),
        n_heads: u(6),
        mlp_ratio: u(7),
        head,
        head_hidden_dim: u(9),
        share_weights: u(10) != 0,
        decoder_reads_previous_layer: u(11) != 0,
        mask_corruption: MaskCorruption::from_code(u(12) as u32)
            .ok_or_else(|| CheckpointError::Meta(format!("unknown mask corruption {}", u(12))))?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn take_named(
    ckpt: &Checkpoint,
    name: &str,
    slot: &mut Tensor<f32>,
) -> Result<(), CheckpointError> {
    let t = ckpt.require(name)?;
    if t.shape() != slot.shape() {
        return Err(CheckpointError::Shape {
            name: name.to_string(),
            expected: slot.shape().to_vec(),
            found: t.shape().to_vec(),
        });
    }
    *slot = t.clone();
    Ok(())
}

/// Model record, positional table, then trainable tensors in canonical order.
pub fn model_to_checkpoint(params: &ModelParams<f32>) -> Checkpoint {
    let mut c = Checkpoint::default();
    c.push(META_MODEL, encode_config(&params.config));
    c.push(POS_EMBED, params.pos_embed.clone());
    for (name, t) in params.named() {
        c.push(name, t.clone());
    }
    c
}

pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<ModelParams<f32>, CheckpointError> {
    if ckpt.get(META_ENCODER).is_some() {
        return Err(CheckpointError::Meta(
            "checkpoint holds an exported encoder, not a full model".into(),
        ));
    }
    let cfg = decode_config(ckpt.require(META_MODEL)?)?;
    let mut params = init_params(&cfg, &mut seeded(0))?;
    take_named(ckpt, POS_EMBED, &mut params.pos_embed)?;
    let mut result = Ok(());
    params.visit_mut(&mut |name, slot| {
        if result.is_ok() {
            result = take_named(ckpt, name, slot);
        }
    });
    result.map(|_| params)
}

pub fn encoder_to_checkpoint(enc: &ExportedEncoder<f32>) -> Checkpoint {
    let mut c = Checkpoint::default();
    c.push(META_MODEL, encode_config(&enc.config));
    c.push(META_ENCODER, Tensor::from_fn(&[1], |_| 1.0));
    c.push(POS_EMBED, enc.pos_embed.clone());
    for (name, t) in enc.named() {
        c.push(name, t.clone());
    }
    c
}

pub fn encoder_from_checkpoint(ckpt: &Checkpoint) -> Result<ExportedEncoder<f32>, CheckpointError> {
    let cfg = decode_config(ckpt.require(META_MODEL)?)?;
    let mut enc = init_params(&cfg, &mut seeded(0))?.export_encoder();
    take_named(ckpt, POS_EMBED, &mut enc.pos_embed)?;
    take_named(ckpt, "patch_embed.weight", &mut enc.patch_embed.weight)?;
    take_named(ckpt, "patch_embed.bias", &mut enc.patch_embed.bias)?;
    for (i, b) in enc.blocks.iter_mut().enumerate() {
        let p = format!("enc.{i}");
        take_named(ckpt, &format!("{p}.norm1.weight"), &mut b.norm1.weight)?;
        take_named(ckpt, &format!("{p}.norm1.bias"), &mut b.norm1.bias)?;
        take_named(ckpt, &format!("{p}.attn.qkv.weight"), &mut b.qkv)?;
        take_named(ckpt, &format!("{p}.attn.proj.weight"), &mut b.proj.weight)?;
        take_named(ckpt, &format!("{p}.attn.proj.bias"), &mut b.proj.bias)?;
        take_named(ckpt, &format!("{p}.norm2.weight"), &mut b.norm2.weight)?;
        take_named(ckpt, &format!("{p}.norm2.bias"), &mut b.norm2.bias)?;
        take_named(ckpt, &format!("{p}.mlp.fc1.weight"), &mut b.fc1.weight)?;
        take_named(ckpt, &format!("{p}.mlp.fc1.bias"), &mut b.fc1.bias)?;
        take_named(ckpt, &format!("{p}.mlp.fc2.weight"), &mut b.fc2.weight)?;
        take_named(ckpt, &format!("{p}.mlp.fc2.bias"), &mut b.fc2.bias)?;
    }
    Ok(enc)
}

/// Encoder export from either a full model or an exported encoder checkpoint.
pub fn load_encoder(ckpt: &Checkpoint) -> Result<ExportedEncoder<f32>, CheckpointError> {
    if ckpt.get(META_ENCODER).is_some() {
        encoder_from_checkpoint(ckpt)
    } else {
        Ok(model_from_checkpoint(ckpt)?.export_encoder())
    }
}

/// Store a u64 exactly as four 16-bit limbs.
pub fn u64_to_tensor(values: &[u64]) -> Tensor<f32> {
    Tensor::from_fn(&[values.len() * 4], |i| {
        ((values[i / 4] >> (16 * (i % 4))) & 0xffff) as f32
    })
}

pub fn u64_from_tensor(t: &Tensor<f32>) -> Result<Vec<u64>, CheckpointError> {
    let d = t.data();
    if !d.len().is_multiple_of(4)
        || d.iter()
            .any(|v| v.fract() != 0.0 || !(0.0..65536.0).contains(v))
    {
        return Err(CheckpointError::Meta("bad integer record".into()));
    }
    Ok(d.chunks(4)
        .map(|c| {
            c.iter()
                .enumerate()
                .map(|(i, &v)| (v as u64) << (16 * i))
                .sum()
        })
        .collect())
}
