//! `ODPN` network checkpoints.
//!
//! Layout (little-endian): magic `"ODPN"`, version `u32 = 1`, layer count
//! `u32`, `layer count + 1` dims as `u32`, then for every layer its `(in, out)`
//! weight matrix row-major followed by its bias vector, all as `f32`.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::mlp::Mlp;
use crate::binio::ByteReader;
use crate::error::{OdpError, Result};

pub const NET_MAGIC: &[u8; 4] = b"ODPN";
pub const NET_VERSION: u32 = 1;

pub fn encode_mlp(net: &Mlp) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * net.num_params());
    out.extend_from_slice(NET_MAGIC);
    out.extend_from_slice(&NET_VERSION.to_le_bytes());
    out.extend_from_slice(&(net.num_layers() as u32).to_le_bytes());
    for &d in net.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for (w, b) in net.weights().iter().zip(net.biases()) {
        for &x in w.iter() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
        for &x in b.iter() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_mlp(bytes: &[u8]) -> Result<Mlp> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(NET_MAGIC)?;
    let at = r.offset();
    let version = r.u32("version")?;
    if version != NET_VERSION {
        return Err(OdpError::format(at, format!("unsupported network version {version}")));
    }
    let at = r.offset();
    let layers = r.u32("layer count")? as usize;
    if layers == 0 || layers > 64 {
        return Err(OdpError::format(at, format!("implausible layer count {layers}")));
    }
    let mut dims = Vec::with_capacity(layers + 1);
    for _ in 0..=layers {
        let at = r.offset();
        let d = r.u32("layer dim")? as usize;
        if d == 0 {
            return Err(OdpError::format(at, "zero layer dim"));
        }
        dims.push(d);
    }
    let mut weights = Vec::with_capacity(layers);
    let mut biases = Vec::with_capacity(layers);
    for pair in dims.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let mut w = Vec::with_capacity(fan_in * fan_out);
        for _ in 0..fan_in * fan_out {
            w.push(r.f32("weights")? as f64);
        }
        let mut b = Vec::with_capacity(fan_out);
        for _ in 0..fan_out {
            b.push(r.f32("biases")? as f64);
        }
        weights.push(Array2::from_shape_vec((fan_in, fan_out), w).unwrap());
        biases.push(Array1::from(b));
    }
    if r.remaining() != 0 {
        return Err(OdpError::format(r.offset(), "trailing bytes after network"));
    }
    Mlp::from_parts(weights, biases)
}

pub fn save_mlp(net: &Mlp, path: &Path) -> Result<()> {
    fs::write(path, encode_mlp(net))?;
    Ok(())
}

pub fn load_mlp(path: &Path) -> Result<Mlp> {
    decode_mlp(&fs::read(path)?)
}
