//! Model checkpoint container: network configuration, normalization
//! statistics, iteration counter and every tensor (weights plus batch-norm
//! running statistics), bit-exact across a save/load cycle.
//!
//! ```text
//! magic       "GIFC" (4 bytes)
//! version     u32 = 1
//! header_len  u64, then that many bytes of TOML (config/stats/iteration)
//! tensor_cnt  u64
//! per tensor: name_len u64, name bytes, ndim u64, dims u64*, data f64 LE
//! ```

use std::io::{Cursor, Read};
use std::path::Path;

use ndarray::{Array1, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use geogan_core::nn::{
    BnRunning, DiscriminatorParams, GeneratorParams, NetworkConfig, NetworkParams, ParamSet,
    GEN_STAGES,
};
use geogan_core::norm::ChannelStats;
use geogan_core::wgan::TrainedModel;

use crate::container::{expect_magic, read_u32, read_u64, write_atomic, write_u32, write_u64};
use crate::error::{PipelineError, Result};

const MAGIC: &[u8; 4] = b"GIFC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    network: NetworkConfig,
    stats: ChannelStats,
    iteration: u64,
}

fn write_tensor(out: &mut Vec<u8>, name: &str, value: &ArrayD<f64>) -> Result<()> {
    write_u64(out, name.len() as u64)?;
    out.extend_from_slice(name.as_bytes());
    write_u64(out, value.ndim() as u64)?;
    for d in value.shape() {
        write_u64(out, *d as u64)?;
    }
    for v in value.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn read_tensor(r: &mut Cursor<&[u8]>) -> Result<(String, ArrayD<f64>)> {
    let name_len = read_u64(r)? as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|e| PipelineError::Format(e.to_string()))?;
    let ndim = read_u64(r)? as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(read_u64(r)? as usize);
    }
    let len: usize = dims.iter().product();
    let mut data = Vec::with_capacity(len);
    let mut buf = [0u8; 8];
    for _ in 0..len {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
        .map_err(|e| PipelineError::Format(e.to_string()))?;
    Ok((name, arr))
}

pub fn model_to_bytes(model: &TrainedModel) -> Result<Vec<u8>> {
    let header = Header {
        network: model.cfg,
        stats: model.stats,
        iteration: model.iteration,
    };
    let header_toml =
        toml::to_string(&header).map_err(|e| PipelineError::Format(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    write_u32(&mut out, VERSION)?;
    write_u64(&mut out, header_toml.len() as u64)?;
    out.extend_from_slice(header_toml.as_bytes());

    let bn = &model.params.gen.bn_running;
    let count = model.params.gen.set.len() + 2 * bn.len() + model.params.disc.set.len();
    write_u64(&mut out, count as u64)?;
    for (name, value) in model.params.gen.set.iter() {
        write_tensor(&mut out, name, value)?;
    }
    for (s, r) in bn.iter().enumerate() {
        write_tensor(&mut out, &format!("g.s{s}.bn.running_mean"), &r.mean.clone().into_dyn())?;
        write_tensor(&mut out, &format!("g.s{s}.bn.running_var"), &r.var.clone().into_dyn())?;
    }
    for (name, value) in model.params.disc.set.iter() {
        write_tensor(&mut out, name, value)?;
    }
    Ok(out)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<TrainedModel> {
    let mut r = Cursor::new(bytes);
    expect_magic(&mut r, MAGIC, "checkpoint")?;
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(PipelineError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let header_len = read_u64(&mut r)? as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = toml::from_str(
        std::str::from_utf8(&header_bytes).map_err(|e| PipelineError::Format(e.to_string()))?,
    )
    .map_err(|e| PipelineError::Format(e.to_string()))?;

    let count = read_u64(&mut r)? as usize;
    let mut gen = ParamSet::new();
    let mut disc = ParamSet::new();
    let mut bn_mean: Vec<Option<Array1<f64>>> = vec![None; GEN_STAGES];
    let mut bn_var: Vec<Option<Array1<f64>>> = vec![None; GEN_STAGES];
    for _ in 0..count {
        let (name, value) = read_tensor(&mut r)?;
        if let Some(stage) = name
            .strip_prefix("g.s")
            .and_then(|rest| rest.split_once(".bn.running_"))
        {
            let (idx, kind) = stage;
            let idx: usize = idx
                .parse()
                .map_err(|_| PipelineError::Format(format!("bad tensor name {name}")))?;
            if idx >= GEN_STAGES {
                return Err(PipelineError::Format(format!("bad stage in {name}")));
            }
            let v = value
                .into_dimensionality::<ndarray::Ix1>()
                .map_err(|e| PipelineError::Format(e.to_string()))?;
            match kind {
                "mean" => bn_mean[idx] = Some(v),
                "var" => bn_var[idx] = Some(v),
                _ => return Err(PipelineError::Format(format!("bad tensor name {name}"))),
            }
        } else if name.starts_with("g.") {
            gen.push(name, value);
        } else if name.starts_with("d.") {
            disc.push(name, value);
        } else {
            return Err(PipelineError::Format(format!("unknown tensor {name}")));
        }
    }
    let mut bn_running = Vec::with_capacity(GEN_STAGES);
    for s in 0..GEN_STAGES {
        match (bn_mean[s].take(), bn_var[s].take()) {
            (Some(mean), Some(var)) => bn_running.push(BnRunning { mean, var }),
            _ => {
                return Err(PipelineError::Format(format!(
                    "missing running statistics for stage {s}"
                )))
            }
        }
    }
    // cross-check tensor shapes against a freshly initialized layout
    let reference = NetworkParams::init(&header.network, 0).map_err(PipelineError::Numeric)?;
    let check = |set: &ParamSet, reference: &ParamSet, which: &str| -> Result<()> {
        if set.len() != reference.len() {
            return Err(PipelineError::Format(format!(
                "{which}: {} tensors, expected {}",
                set.len(),
                reference.len()
            )));
        }
        for i in 0..set.len() {
            if set.name(i) != reference.name(i) || set.value(i).shape() != reference.value(i).shape()
            {
                return Err(PipelineError::Format(format!(
                    "{which}: tensor {} ({}) does not match the declared architecture",
                    i,
                    set.name(i)
                )));
            }
        }
        Ok(())
    };
    check(&gen, &reference.gen.set, "generator")?;
    check(&disc, &reference.disc.set, "discriminator")?;

    Ok(TrainedModel {
        cfg: header.network,
        params: NetworkParams {
            gen: GeneratorParams {
                set: gen,
                bn_running,
            },
            disc: DiscriminatorParams { set: disc },
        },
        stats: header.stats,
        iteration: header.iteration,
    })
}

pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    write_atomic(path, &model_to_bytes(model)?)
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    model_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use geogan_core::make_grid;

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let grid = make_grid(8, 8, 2.0, 2.0).unwrap();
        let cfg = NetworkConfig::new(grid, 5, 4).unwrap();
        let params = NetworkParams::init(&cfg, 31).unwrap();
        let model = TrainedModel {
            cfg,
            params,
            stats: ChannelStats {
                mean: [0.1, 0.2, 0.3, 0.4],
                std: [1.0, 2.0, 3.0, 4.0],
            },
            iteration: 77,
        };
        let bytes = model_to_bytes(&model).unwrap();
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(back.iteration, 77);
        assert_eq!(back.cfg, model.cfg);
        assert_eq!(back.stats, model.stats);
        assert_eq!(back.params, model.params);
        let again = model_to_bytes(&back).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let grid = make_grid(8, 8, 2.0, 2.0).unwrap();
        let cfg = NetworkConfig::new(grid, 3, 2).unwrap();
        let params = NetworkParams::init(&cfg, 1).unwrap();
        let model = TrainedModel {
            cfg,
            params,
            stats: ChannelStats::identity(),
            iteration: 0,
        };
        let mut bytes = model_to_bytes(&model).unwrap();
        bytes[0] = b'Z';
        assert!(model_from_bytes(&bytes).is_err());
    }
}
