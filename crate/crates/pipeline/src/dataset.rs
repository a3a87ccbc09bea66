//! Binary dataset container and its sidecar manifest.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic      "GIFS" (4 bytes)
//! version    u32 = 1
//! nx, ny     u32, u32
//! channels   u32 = 4
//! n_samples  u64
//! stats_flag u8 (1 when normalization statistics are meaningful)
//! reserved   7 zero bytes
//! mean       4 x f64
//! std        4 x f64
//! payload    n_samples * 4 * ny * nx  f32 values, sample-major,
//!            channel-major within a sample, row-major within a channel
//! ```
//!
//! Values are stored as f32; the manifest `<path>.toml` records the
//! generating covariance, boundary conditions, truncation and seed.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use geogan_core::kl::CovarianceSpec;
use geogan_core::norm::ChannelStats;
use geogan_core::{BoundarySpec, FieldStack, GridSpec, N_CHANNELS};

use crate::container::{
    expect_magic, read_f64, read_u32, read_u64, write_atomic, write_f64, write_u32, write_u64,
};
use crate::error::{PipelineError, Result};

const MAGIC: &[u8; 4] = b"GIFS";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct DatasetFile {
    pub grid: GridSpec,
    pub stack: FieldStack,
    /// Normalization statistics; `stats_present` is false for an empty
    /// dataset (the stored values are the identity placeholder).
    pub stats: ChannelStats,
    pub stats_present: bool,
}

/// Provenance sidecar written next to the binary file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub grid: GridSpec,
    pub covariance: CovarianceSpec,
    pub boundary: BoundarySpec,
    pub kl_truncation: usize,
    pub seed: u64,
    pub size: usize,
}

impl DatasetManifest {
    pub fn path_for(dataset: &Path) -> PathBuf {
        let mut os = dataset.as_os_str().to_owned();
        os.push(".toml");
        PathBuf::from(os)
    }

    pub fn save(&self, dataset_path: &Path) -> Result<()> {
        let text =
            toml::to_string_pretty(self).map_err(|e| PipelineError::Format(e.to_string()))?;
        write_atomic(&Self::path_for(dataset_path), text.as_bytes())
    }

    pub fn load(dataset_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(Self::path_for(dataset_path))?;
        toml::from_str(&text).map_err(|e| PipelineError::Format(e.to_string()))
    }
}

impl DatasetFile {
    pub fn new(stack: FieldStack, stats: Option<ChannelStats>) -> Self {
        let grid = stack.grid();
        match stats {
            Some(stats) => Self {
                grid,
                stack,
                stats,
                stats_present: true,
            },
            None => Self {
                grid,
                stack,
                stats: ChannelStats::identity(),
                stats_present: false,
            },
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n = self.stack.n_samples();
        let (ny, nx) = (self.grid.ny, self.grid.nx);
        let mut out = Vec::with_capacity(64 + n * N_CHANNELS * ny * nx * 4);
        out.extend_from_slice(MAGIC);
        write_u32(&mut out, VERSION)?;
        write_u32(&mut out, nx as u32)?;
        write_u32(&mut out, ny as u32)?;
        write_u32(&mut out, N_CHANNELS as u32)?;
        write_u64(&mut out, n as u64)?;
        out.push(u8::from(self.stats_present));
        out.extend_from_slice(&[0u8; 7]);
        for c in 0..N_CHANNELS {
            write_f64(&mut out, self.stats.mean[c])?;
        }
        for c in 0..N_CHANNELS {
            write_f64(&mut out, self.stats.std[c])?;
        }
        let data = self.stack.data();
        let flat = data.as_slice().expect("standard layout");
        for &v in flat {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        expect_magic(&mut r, MAGIC, "dataset")?;
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(PipelineError::Format(format!(
                "unsupported dataset version {version}"
            )));
        }
        let nx = read_u32(&mut r)? as usize;
        let ny = read_u32(&mut r)? as usize;
        let channels = read_u32(&mut r)? as usize;
        if channels != N_CHANNELS {
            return Err(PipelineError::Format(format!(
                "dataset declares {channels} channels, expected {N_CHANNELS}"
            )));
        }
        let n = read_u64(&mut r)? as usize;
        let mut flag = [0u8; 8];
        std::io::Read::read_exact(&mut r, &mut flag)?;
        let stats_present = flag[0] != 0;
        let mut mean = [0.0; N_CHANNELS];
        let mut std = [1.0; N_CHANNELS];
        for m in mean.iter_mut() {
            *m = read_f64(&mut r)?;
        }
        for s in std.iter_mut() {
            *s = read_f64(&mut r)?;
        }
        let header_len = r.position() as usize;
        let expected = n * N_CHANNELS * ny * nx * 4;
        let payload = &bytes[header_len..];
        if payload.len() != expected {
            return Err(PipelineError::Format(format!(
                "dataset payload is {} bytes, header declares {expected}",
                payload.len()
            )));
        }
        let mut values = Vec::with_capacity(n * N_CHANNELS * ny * nx);
        for chunk in payload.chunks_exact(4) {
            values.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        let data = Array4::from_shape_vec((n, N_CHANNELS, ny, nx), values)
            .map_err(|e| PipelineError::Format(e.to_string()))?;
        // the binary header carries pixel counts only; physical extents
        // come from the manifest via `with_grid` (unit cells until then)
        let grid = GridSpec::new(nx, ny, nx as f64, ny as f64)
            .map_err(|e| PipelineError::Format(e.to_string()))?;
        let stack = FieldStack::from_data(grid, data)
            .map_err(|e| PipelineError::Format(e.to_string()))?;
        Ok(Self {
            grid,
            stack,
            stats: ChannelStats { mean, std },
            stats_present,
        })
    }

    /// Re-attach physical domain lengths (the binary header stores only
    /// pixel counts; lengths come from the manifest or config).
    pub fn with_grid(self, grid: GridSpec) -> Result<Self> {
        if grid.nx != self.grid.nx || grid.ny != self.grid.ny {
            return Err(PipelineError::Format(format!(
                "dataset is {}x{}, requested grid {}x{}",
                self.grid.nx, self.grid.ny, grid.nx, grid.ny
            )));
        }
        let stack = FieldStack::from_data(grid, self.stack.data().clone())
            .map_err(PipelineError::Numeric)?;
        Ok(Self {
            grid,
            stack,
            ..self
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Load and attach the physical grid from the sidecar manifest.
    pub fn load_with_manifest(path: &Path) -> Result<(Self, DatasetManifest)> {
        let manifest = DatasetManifest::load(path)?;
        let file = Self::load(path)?.with_grid(manifest.grid)?;
        Ok((file, manifest))
    }
}
