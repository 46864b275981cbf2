//! `CKP1` model checkpoints.
//!
//! | field                                        | encoding          |
//! |----------------------------------------------|-------------------|
//! | magic `CKP1`, version (= 1)                  | 4 bytes, u32      |
//! | seed                                         | u64               |
//! | input channels, latent, rounds, mlp layers   | u32 ×4            |
//! | activation (0 = relu, 1 = identity), 7 zero  | u8, 7 bytes       |
//! | feature channel hash                         | u64               |
//! | mesh side, mesh spacing                      | u32 ×2            |
//! | output scale, output offset                  | f64 ×2            |
//! | config hash                                  | u64               |
//! | normalizer channels C                        | u32               |
//! | normalizer mean, std                         | f64 ×C each       |
//! | normalizer degenerate flags                  | u8 ×C             |
//! | parameter count P                            | u64               |
//! | parameters in tensor order                   | f32 ×P            |
//!
//! The post-processing state (threshold and quantile map) is stored next
//! to the checkpoint as JSON.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::Normalizer;
use crate::formats::{read_file, write_file, ByteReader, ByteWriter};
use crate::gnn::{init_params, Activation, Hyperparams, ModelParams, OutputScale};
use crate::postprocess::PostprocessState;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub feature_hash: u64,
    pub mesh_side: usize,
    pub mesh_spacing: usize,
    pub config_hash: u64,
    pub normalizer: Normalizer,
}

impl Checkpoint {
    /// Hash of everything two ensemble members must share to be combined.
    pub fn compatibility_hash(&self) -> String {
        let h = self.params.hyper;
        let mut d = Sha256::new();
        for x in [
            h.input_channels as u64,
            h.latent as u64,
            h.rounds as u64,
            h.mlp_layers as u64,
            activation_code(h.activation) as u64,
            self.feature_hash,
            self.mesh_side as u64,
            self.mesh_spacing as u64,
        ] {
            d.update(x.to_le_bytes());
        }
        let digest = d.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let p = &self.params;
        let mut w = ByteWriter::new();
        w.bytes(b"CKP1");
        w.u32(1);
        w.u64(p.seed);
        for x in [p.hyper.input_channels, p.hyper.latent, p.hyper.rounds, p.hyper.mlp_layers] {
            w.u32(x as u32);
        }
        w.u8(activation_code(p.hyper.activation));
        w.zeros(7);
        w.u64(self.feature_hash);
        w.u32(self.mesh_side as u32);
        w.u32(self.mesh_spacing as u32);
        w.f64(p.output.scale);
        w.f64(p.output.offset);
        w.u64(self.config_hash);
        let n = &self.normalizer;
        w.u32(n.channels() as u32);
        for &m in &n.mean {
            w.f64(m);
        }
        for &s in &n.std {
            w.f64(s);
        }
        for &g in &n.degenerate {
            w.u8(u8::from(g));
        }
        w.u64(p.parameter_count() as u64);
        for (_, t) in p.tensors() {
            for &x in t {
                w.f32(x);
            }
        }
        w.buf
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: String| Error::format(path, m);
        let mut r = ByteReader::new(bytes, path);
        r.magic(b"CKP1")?;
        r.version(1)?;
        let seed = r.u64()?;
        let (c, l, rounds, layers) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
        let activation = match r.u8()? {
            0 => Activation::Relu,
            1 => Activation::Identity,
            other => return Err(bad(format!("unknown activation code {other}"))),
        };
        r.take(7)?;
        let hyper = Hyperparams {
            input_channels: c as usize,
            latent: l as usize,
            rounds: rounds as usize,
            mlp_layers: layers as usize,
            activation,
        };
        hyper.validate().map_err(|e| bad(e.to_string()))?;
        let feature_hash = r.u64()?;
        let mesh_side = r.u32()? as usize;
        let mesh_spacing = r.u32()? as usize;
        let output = OutputScale {
            scale: r.f64()?,
            offset: r.f64()?,
        };
        let config_hash = r.u64()?;
        let channels = r.u32()? as usize;
        if channels != hyper.input_channels {
            return Err(bad(format!(
                "normalizer has {channels} channels, model expects {}",
                hyper.input_channels
            )));
        }
        let mean = r.f64s(channels)?;
        let std = r.f64s(channels)?;
        let degenerate = r.take(channels)?.iter().map(|&b| b != 0).collect();
        let mut params: ModelParams<f32> = init_params(seed, hyper).map_err(|e| bad(e.to_string()))?;
        params.output = output;
        let count = r.u64()? as usize;
        if count != params.parameter_count() {
            return Err(bad(format!(
                "parameter count {count} does not match the architecture ({})",
                params.parameter_count()
            )));
        }
        for t in params.tensors_mut() {
            let values = r.f32s(t.len())?;
            t.copy_from_slice(&values);
        }
        r.finish()?;
        Ok(Checkpoint {
            params,
            feature_hash,
            mesh_side,
            mesh_spacing,
            config_hash,
            normalizer: Normalizer { mean, std, degenerate },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?, path)
    }
}

fn activation_code(a: Activation) -> u8 {
    match a {
        Activation::Relu => 0,
        Activation::Identity => 1,
    }
}

/// Path of the post-processing JSON stored next to a checkpoint.
pub fn postprocess_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".qmap.json");
    checkpoint.with_file_name(name)
}

pub fn save_postprocess(checkpoint: &Path, state: &PostprocessState) -> Result<()> {
    let path = postprocess_path(checkpoint);
    let text = serde_json::to_string_pretty(state).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    write_file(&path, text.as_bytes())
}

pub fn load_postprocess(checkpoint: &Path) -> Result<PostprocessState> {
    let path = postprocess_path(checkpoint);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let state: PostprocessState = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    if let Some(q) = &state.quantile_map {
        q.validate()?;
    }
    Ok(state)
}
