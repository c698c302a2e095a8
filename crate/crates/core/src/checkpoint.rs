//! `BSN1` model checkpoints.
//!
//! Layout (little-endian): magic `BSN1`, `u32` length of a JSON
//! [`NetworkConfig`] followed by its UTF-8 bytes, one `BSM1` block per
//! layer, then a `u8` FC flag; when set, `u32` outputs, `u32` inputs,
//! row-major `f64` weights and `f64` biases.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::network::{FcWeights, Network, NetworkConfig};
use crate::optics::PhaseMask;

pub const NETWORK_MAGIC: &[u8; 4] = b"BSN1";

impl Network {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let json = serde_json::to_string(&self.config)?;
        w.write_all(NETWORK_MAGIC)?;
        w.write_u32::<LittleEndian>(json.len() as u32)?;
        w.write_all(json.as_bytes())?;
        for m in &self.masks {
            m.write_to(w)?;
        }
        match &self.fc {
            None => w.write_u8(0)?,
            Some(fc) => {
                w.write_u8(1)?;
                w.write_u32::<LittleEndian>(fc.outputs as u32)?;
                w.write_u32::<LittleEndian>(fc.inputs as u32)?;
                for &x in fc.weights.iter().chain(&fc.bias) {
                    w.write_f64::<LittleEndian>(x)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read, path: &Path) -> Result<Self> {
        let fmt = |reason: String| Error::Format { path: path.to_path_buf(), reason };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| fmt(format!("missing header: {e}")))?;
        if &magic != NETWORK_MAGIC {
            return Err(fmt(format!("bad magic {magic:?}, expected BSN1")));
        }
        let trunc = |e: std::io::Error| fmt(format!("truncated checkpoint: {e}"));
        let len = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        if len > 1 << 24 {
            return Err(fmt(format!("implausible config block of {len} bytes")));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(trunc)?;
        let config: NetworkConfig =
            serde_json::from_slice(&json).map_err(|e| fmt(format!("bad config block: {e}")))?;
        let masks = (0..config.layers)
            .map(|_| PhaseMask::read_from(r, path))
            .collect::<Result<Vec<_>>>()?;
        let fc = match r.read_u8().map_err(trunc)? {
            0 => None,
            1 => {
                let outputs = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
                let inputs = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
                if inputs * outputs > 1 << 24 {
                    return Err(fmt(format!("implausible FC shape {outputs}x{inputs}")));
                }
                let mut read_n = |n: usize| -> Result<Vec<f64>> {
                    (0..n).map(|_| r.read_f64::<LittleEndian>().map_err(trunc)).collect()
                };
                let weights = read_n(inputs * outputs)?;
                let bias = read_n(outputs)?;
                Some(FcWeights { inputs, outputs, weights, bias })
            }
            other => return Err(fmt(format!("unknown FC flag {other}"))),
        };
        let net = Network { config, masks, fc };
        net.validate().map_err(|e| fmt(e.to_string()))?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{ChannelSet, GridSpec};
    use crate::network::Head;
    use crate::optics::{DispersionKind, DispersionModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(head: Head) -> Network {
        let mut cfg = NetworkConfig::new(GridSpec::new(20, 16, 0.9).unwrap(), ChannelSet::new(vec![1.3, 1.8, 2.2]).unwrap(), head).unwrap();
        cfg.layers = 2;
        cfg.dispersion = DispersionModel { kind: DispersionKind::Table { points: vec![(1.0, 1.52), (2.5, 1.48)] }, n_air: 1.0 };
        let mut n = Network::init(cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        n.masks[1].heights[3] = 1.0 / 3.0;
        n
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for head in [Head::Sum, Head::MaxoutFc] {
            let n = net(head);
            let mut buf = Vec::new();
            n.write_to(&mut buf).unwrap();
            let back = Network::read_from(&mut buf.as_slice(), Path::new("mem")).unwrap();
            assert_eq!(back, n);
            let mut again = Vec::new();
            back.write_to(&mut again).unwrap();
            assert_eq!(buf, again);
        }
    }

    #[test]
    fn rejects_damage() {
        let mut buf = Vec::new();
        net(Head::Maxout).write_to(&mut buf).unwrap();
        assert!(Network::read_from(&mut &buf[..buf.len() - 1], Path::new("mem")).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Network::read_from(&mut bad.as_slice(), Path::new("mem")), Err(Error::Format { .. })));
        let mut bad = buf.clone();
        let last = bad.len() - 1;
        bad[last] = 7;
        assert!(Network::read_from(&mut bad.as_slice(), Path::new("mem")).is_err());
    }
}
