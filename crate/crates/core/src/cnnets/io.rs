//! `CNNT` model files.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "CNNT" | version u32
//! input_size u32 | in_channels u32 | trunk_len u32 | trunk[i] u32 ...
//! shared_depth u32 | feature_channels u32 | num_species u32 | seed u64
//! bn_eps f64 | bn_momentum f64 | bn_batches_seen u64
//! parameter tensors in declaration order as f64
//! running_mean f64 x C | running_var f64 x C
//! ```

use std::path::Path;

use super::{CnNets, NetworkConfig};
use crate::binio::{read_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CNNT";
const VERSION: u32 = 1;

impl CnNets {
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = &self.config;
        let mut w = ByteWriter::new();
        w.magic(MAGIC);
        w.u32(VERSION);
        w.u32(cfg.input_size as u32);
        w.u32(cfg.in_channels as u32);
        w.u32(cfg.trunk.len() as u32);
        for &c in &cfg.trunk {
            w.u32(c as u32);
        }
        w.u32(cfg.shared_depth as u32);
        w.u32(cfg.feature_channels as u32);
        w.u32(cfg.num_species as u32);
        w.u64(cfg.seed);
        w.f64(self.bn.eps);
        w.f64(self.bn.momentum);
        w.u64(self.bn.batches_seen);
        for p in self.param_slices() {
            w.f64s(p);
        }
        w.f64s(&self.bn.running_mean);
        w.f64s(&self.bn.running_var);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(MAGIC)?;
        r.expect_version(VERSION)?;
        let input_size = r.u32()? as usize;
        let in_channels = r.u32()? as usize;
        let at = r.offset();
        let trunk_len = r.u32()? as usize;
        if trunk_len > 64 {
            return Err(Error::format(at, format!("implausible trunk length {trunk_len}")));
        }
        let trunk = (0..trunk_len)
            .map(|_| r.u32().map(|c| c as usize))
            .collect::<Result<Vec<_>>>()?;
        let config = NetworkConfig {
            input_size,
            in_channels,
            trunk,
            shared_depth: r.u32()? as usize,
            feature_channels: r.u32()? as usize,
            num_species: r.u32()? as usize,
            seed: r.u64()?,
        };
        let at = r.offset();
        let mut net = CnNets::new(config).map_err(|e| Error::format(at, format!("invalid stored config: {e}")))?;
        net.bn.eps = r.f64()?;
        net.bn.momentum = r.f64()?;
        net.bn.batches_seen = r.u64()?;
        for p in net.param_slices_mut() {
            let values = r.f64s(p.len())?;
            p.copy_from_slice(&values);
        }
        let c = net.bn.channels();
        net.bn.running_mean = r.f64s(c)?;
        net.bn.running_var = r.f64s(c)?;
        r.finish()?;
        let at = r.offset();
        net.bn
            .validate()
            .map_err(|e| Error::format(at, format!("invalid batch-norm state: {e}")))?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}
