//! Binary model files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic    "SANN"
//! version  u32
//! layers   u32
//! per layer:
//!   tag    u8      0 = conv, 1 = dense
//!   dims   u32 x4  conv: out, in, kh, kw
//!          u32 x2  dense: out, in
//!   weights f64 x (product of dims)
//!   bias    f64 x out
//! crc32    u32     over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use super::{LayerShape, Network, NetworkSpec};
use crate::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"SANN";
pub const MODEL_VERSION: u32 = 1;

const TAG_CONV: u8 = 0;
const TAG_DENSE: u8 = 1;

pub fn write_model(net: &Network) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + net.param_count() * 8 + 64);
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
    for (i, layer) in net.layers().iter().enumerate() {
        match *layer {
            LayerShape::Conv { out, input, kh, kw } => {
                buf.push(TAG_CONV);
                for d in [out, input, kh, kw] {
                    buf.extend_from_slice(&(d as u32).to_le_bytes());
                }
            }
            LayerShape::Dense { out, input } => {
                buf.push(TAG_DENSE);
                for d in [out, input] {
                    buf.extend_from_slice(&(d as u32).to_le_bytes());
                }
            }
        }
        let (w, b) = net.layer(i);
        for v in w.iter().chain(b) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn save(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_model(net))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Network> {
    read_model(&fs::read(path)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.pos as u64, "size overflow"))?, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn read_model(bytes: &[u8]) -> Result<Network> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MODEL_MAGIC {
        return Err(Error::format(
            0,
            format!("bad magic {:?}, expected \"SANN\"", String::from_utf8_lossy(magic)),
        ));
    }
    let version_at = cur.pos as u64;
    let version = cur.u32("version")?;
    if version != MODEL_VERSION {
        return Err(Error::format(version_at, format!("unsupported model version {version}, expected {MODEL_VERSION}")));
    }
    let count_at = cur.pos as u64;
    let count = cur.u32("layer count")? as usize;
    if count > 64 {
        return Err(Error::format(count_at, format!("implausible layer count {count}")));
    }
    let mut layers = Vec::with_capacity(count);
    let mut params = Vec::new();
    for i in 0..count {
        let tag_at = cur.pos as u64;
        let tag = cur.take(1, "layer tag")?[0];
        let layer = match tag {
            TAG_CONV => {
                let mut d = [0usize; 4];
                for v in d.iter_mut() {
                    *v = cur.u32("conv dims")? as usize;
                }
                LayerShape::Conv {
                    out: d[0],
                    input: d[1],
                    kh: d[2],
                    kw: d[3],
                }
            }
            TAG_DENSE => LayerShape::Dense {
                out: cur.u32("dense dims")? as usize,
                input: cur.u32("dense dims")? as usize,
            },
            other => return Err(Error::format(tag_at, format!("unknown role tag {other} for layer {i}"))),
        };
        params.extend(cur.f64s(layer.weight_len(), "weights")?);
        params.extend(cur.f64s(layer.bias_len(), "bias")?);
        layers.push(layer);
    }
    let payload_end = cur.pos;
    let stored = cur.u32("crc32")?;
    let computed = crc32fast::hash(&bytes[..payload_end]);
    if stored != computed {
        return Err(Error::format(
            payload_end as u64,
            format!("crc mismatch: stored {stored:#010x}, computed {computed:#010x}"),
        ));
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(cur.pos as u64, "trailing bytes after crc"));
    }
    if params.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(0, "non-finite parameter"));
    }
    let spec = spec_from_layers(&layers).map_err(|e| Error::format(8, e.to_string()))?;
    Network::from_layers(spec, layers, Some(params))
}

fn spec_from_layers(layers: &[LayerShape]) -> Result<NetworkSpec> {
    let mut spec = NetworkSpec::default();
    let convs: Vec<usize> = layers
        .iter()
        .filter_map(|l| match l {
            LayerShape::Conv { out, .. } => Some(*out),
            _ => None,
        })
        .collect();
    if convs.len() != spec.conv_channels.len() {
        return Err(Error::Config(format!(
            "expected {} conv layers, found {}",
            spec.conv_channels.len(),
            convs.len()
        )));
    }
    spec.conv_channels = convs;
    match layers.last() {
        Some(LayerShape::Dense { out, input }) => {
            spec.outputs = *out;
            spec.hidden = *input;
        }
        _ => return Err(Error::Config("last layer must be dense".into())),
    }
    spec.validate()?;
    if spec.layers() != layers {
        return Err(Error::Config("layer shapes are not a supported architecture".into()));
    }
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bit_exact() {
        let net = Network::new(NetworkSpec::default(), 11).unwrap();
        let bytes = write_model(&net);
        let back = read_model(&bytes).unwrap();
        assert_eq!(back, net);
        assert_eq!(bytes.len(), 4 + 4 + 4 + 3 * 17 + 2 * 9 + 9378 * 8 + 4);
    }

    #[test]
    fn truncated_file() {
        let bytes = write_model(&Network::new(NetworkSpec::default(), 1).unwrap());
        for cut in [0, 3, 10, 500, bytes.len() - 1] {
            assert!(matches!(read_model(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
    }

    #[test]
    fn wrong_magic_names_expected() {
        let mut bytes = write_model(&Network::zeros(NetworkSpec::default()).unwrap());
        bytes[0] = b'X';
        let err = read_model(&bytes).unwrap_err();
        assert!(err.to_string().contains("SANN"), "{err}");
    }

    #[test]
    fn corrupted_payload_caught_by_crc() {
        let mut bytes = write_model(&Network::new(NetworkSpec::default(), 2).unwrap());
        let n = bytes.len();
        bytes[n / 2] ^= 0x40;
        match read_model(&bytes) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset as usize, n - 4);
                assert!(message.contains("crc"));
            }
            other => panic!("expected crc error, got {other:?}"),
        }
    }
}
