//! Single-file model checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u32` length of a JSON config
//! echo followed by the JSON itself, the plane segment and the decoder
//! segment. Parameters are stored as little-endian `f32`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, DecoderParams};
use crate::error::{Error, Result};
use crate::field::{read_u32, FeaturePlaneSet, PlaneConfig};
use crate::scene_io::atomic_write;

pub const MAGIC: &[u8; 8] = b"P4DCKPT\0";
pub const VERSION: u32 = 1;

/// Field and decoder parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub planes: FeaturePlaneSet,
    pub decoder: DecoderParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub planes: PlaneConfig,
    pub decoder: DecoderConfig,
    pub fused_width: usize,
    /// Free-form record of the run that produced the checkpoint.
    #[serde(default)]
    pub run: serde_json::Value,
}

pub fn write_checkpoint<W: Write>(out: &mut W, model: &Model, run: &serde_json::Value) -> Result<()> {
    let echo = ConfigEcho {
        planes: model.planes.config().clone(),
        decoder: model.decoder.config.clone(),
        fused_width: model.decoder.fused_width,
        run: run.clone(),
    };
    let json = serde_json::to_vec(&echo)?;
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    model.planes.write_segment(out)?;
    model.decoder.write_segment(out)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<(Model, ConfigEcho)> {
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = read_u32(input)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = read_u32(input)? as usize;
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    let echo: ConfigEcho = serde_json::from_slice(&json)?;
    let planes = FeaturePlaneSet::read_segment(input)?;
    if planes.config().scales != echo.planes.scales || planes.config().feature_width != echo.planes.feature_width {
        return Err(Error::Checkpoint("plane segment disagrees with the config echo".into()));
    }
    let decoder = DecoderParams::read_segment(input, &echo.decoder, echo.fused_width)?;
    if decoder.fused_width != planes.fused_width() {
        return Err(Error::Checkpoint("decoder width does not match the planes".into()));
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after the decoder segment".into()));
    }
    Ok((Model { planes, decoder }, echo))
}

pub fn save_checkpoint(path: &Path, model: &Model, run: &serde_json::Value) -> Result<()> {
    atomic_write(path, |w| write_checkpoint(w, model, run))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, ConfigEcho)> {
    let bytes = std::fs::read(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    read_checkpoint(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::init_decoder;
    use crate::field::{init_planes, TimeResolution};

    fn model() -> Model {
        let pc = PlaneConfig {
            scales: vec![3, 4],
            feature_width: 2,
            time_resolution: TimeResolution::MatchSpace,
        };
        let planes = init_planes(&pc, 1).unwrap();
        let dc = DecoderConfig {
            hidden_width: 8,
            ..DecoderConfig::default()
        };
        let decoder = init_decoder(&dc, planes.fused_width(), 2).unwrap();
        Model { planes, decoder }
    }

    fn to_f32(m: &Model) -> Model {
        let mut m = m.clone();
        for (_, _, p) in m.planes.planes_mut() {
            for v in p.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        for l in m.decoder.layers_mut() {
            for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *v = *v as f32 as f64;
            }
        }
        m
    }

    #[test]
    fn round_trip_at_f32_precision() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let run = serde_json::json!({"iterations": 3});
        save_checkpoint(&path, &m, &run).unwrap();
        let (back, echo) = load_checkpoint(&path).unwrap();
        assert_eq!(back, to_f32(&m));
        assert_eq!(echo.run, run);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let m = model();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m, &serde_json::Value::Null).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(Error::Checkpoint(_))));
        let short = &buf[..buf.len() - 5];
        assert!(read_checkpoint(&mut &short[..]).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(read_checkpoint(&mut long.as_slice()).is_err());
    }
}
