//! Versioned little-endian binary checkpoints.
//!
//! A network record is
//!
//! ```text
//! "RVNN" | u32 format version | u32 layer count L | (L+1) x u32 sizes
//!        | u8 hidden activation | u8 output activation
//!        | u64 parameter count | parameter count x f64 (row-major weights, then bias, per layer)
//! ```
//!
//! Composite checkpoints (reward ensembles, agents, adapters) are built from
//! the same primitives and carry their own magic.

use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::nn::mlp::{Activation, Layer, Mlp};

pub const MLP_MAGIC: &[u8; 4] = b"RVNN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        for &v in vs {
            self.f64(v);
        }
    }

    pub fn mlp(&mut self, mlp: &Mlp) {
        self.bytes(MLP_MAGIC);
        self.u32(FORMAT_VERSION);
        self.u32((mlp.sizes().len() - 1) as u32);
        for &s in mlp.sizes() {
            self.u32(s as u32);
        }
        self.u8(mlp.hidden_activation().code());
        self.u8(mlp.output_activation().code());
        self.f64s(&mlp.flat_params());
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct ByteReader<'a> {
    buf: &'a [u8],
}

fn truncated() -> Error {
    Error::Checkpoint("truncated checkpoint".into())
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(truncated());
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    pub fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(Error::Checkpoint(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n > self.buf.len() / 8 {
            return Err(truncated());
        }
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn mlp(&mut self) -> Result<Mlp> {
        self.expect_magic(MLP_MAGIC)?;
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let n_layers = self.u32()? as usize;
        if n_layers == 0 || n_layers > 64 {
            return Err(Error::Checkpoint(format!("implausible layer count {n_layers}")));
        }
        let sizes = (0..=n_layers).map(|_| self.u32().map(|s| s as usize)).collect::<Result<Vec<_>>>()?;
        if sizes.contains(&0) {
            return Err(Error::Checkpoint(format!("zero layer size in {sizes:?}")));
        }
        let hidden = Activation::from_code(self.u8()?)
            .ok_or_else(|| Error::Checkpoint("unknown hidden activation".into()))?;
        let output = Activation::from_code(self.u8()?)
            .ok_or_else(|| Error::Checkpoint("unknown output activation".into()))?;
        let params = self.f64s()?;
        let expected: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if params.len() != expected {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match sizes {sizes:?}",
                params.len()
            )));
        }
        let mut offset = 0;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let weights =
                    Array2::from_shape_vec((fan_out, fan_in), params[offset..offset + fan_in * fan_out].to_vec())
                        .expect("sized above");
                offset += fan_in * fan_out;
                let bias = Array1::from(params[offset..offset + fan_out].to_vec());
                offset += fan_out;
                Layer { weights, bias, activation: if l + 1 == n_layers { output } else { hidden } }
            })
            .collect();
        Ok(Mlp::from_parts(sizes, hidden, output, layers))
    }

    pub fn finish(self) -> Result<()> {
        if !self.buf.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", self.buf.len())));
        }
        Ok(())
    }
}

pub fn encode_mlp(mlp: &Mlp) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.mlp(mlp);
    w.finish()
}

pub fn decode_mlp(bytes: &[u8]) -> Result<Mlp> {
    let mut r = ByteReader::new(bytes);
    let m = r.mlp()?;
    r.finish()?;
    Ok(m)
}

pub fn save_mlp(mlp: &Mlp, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_mlp(mlp))?;
    Ok(())
}

pub fn load_mlp(path: impl AsRef<Path>) -> Result<Mlp> {
    decode_mlp(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_bit_exact(seed in any::<u64>(), hidden in 1usize..12, depth in 1usize..4, scale in -1e3f64..1e3) {
            let mut sizes = vec![3];
            sizes.extend(std::iter::repeat_n(hidden, depth));
            sizes.push(2);
            let mut m = Mlp::new(&sizes, Activation::LeakyRelu, Activation::Tanh, seed).unwrap();
            m.map_params(|v| v * scale);
            let back = decode_mlp(&encode_mlp(&m)).unwrap();
            prop_assert_eq!(back.sizes(), m.sizes());
            prop_assert_eq!(back.hidden_activation(), m.hidden_activation());
            let a: Vec<u64> = m.flat_params().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.flat_params().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn truncated_and_corrupt_rejected() {
        let m = Mlp::new(&[2, 3, 1], Activation::Relu, Activation::Identity, 1).unwrap();
        let bytes = encode_mlp(&m);
        assert!(decode_mlp(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_mlp(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_mlp(&extra).is_err());
    }
}
