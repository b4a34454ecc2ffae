//! Binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "UCLR"            4 bytes magic
//! version           u32 (currently 1)
//! epoch             u64  completed epochs
//! seed              u64  run seed; with `epoch` it fixes every later draw
//! encoder           layer block (below)
//! has_twin          u8
//!   momentum        f64           if has_twin
//!   twin encoder    layer block   if has_twin
//! velocity count    u32
//!   per buffer      u32 rows, u32 cols, rows·cols f64
//!
//! layer block:
//!   layer count     u32
//!   per layer       u32 in, u32 out, u8 activation (0 none, 1 relu),
//!                   u8 standardize, out·in f64 weight (row-major),
//!                   out f64 bias
//! ```

use std::fs;
use std::path::Path;

use crate::encoder::{Activation, EncoderState, Layer, MomentumTwin};
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

pub const MAGIC: &[u8; 4] = b"UCLR";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderState,
    pub twin: Option<MomentumTwin>,
    pub velocity: Vec<DenseMatrix>,
    pub epoch: u64,
    pub seed: u64,
}

impl Checkpoint {
    /// A bare encoder with no optimizer state.
    pub fn encoder_only(encoder: EncoderState) -> Self {
        Self {
            encoder,
            twin: None,
            velocity: Vec::new(),
            epoch: 0,
            seed: 0,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        write_encoder(&mut out, &self.encoder);
        match &self.twin {
            Some(t) => {
                out.push(1);
                out.extend_from_slice(&t.momentum.to_le_bytes());
                write_encoder(&mut out, &t.params);
            }
            None => out.push(0),
        }
        out.extend_from_slice(&(self.velocity.len() as u32).to_le_bytes());
        for v in &self.velocity {
            write_matrix(&mut out, v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic {magic:?}, expected \"UCLR\""),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported checkpoint version {version}"),
            });
        }
        let epoch = r.u64()?;
        let seed = r.u64()?;
        let encoder = read_encoder(&mut r)?;
        let twin = match r.u8()? {
            0 => None,
            1 => {
                let momentum = r.f64()?;
                let params = read_encoder(&mut r)?;
                if !params.same_shape(&encoder) {
                    return Err(r.err("twin shape differs from the encoder"));
                }
                Some(MomentumTwin { params, momentum })
            }
            f => return Err(r.err(&format!("twin flag must be 0 or 1, got {f}"))),
        };
        let n = r.u32()? as usize;
        let mut velocity = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            velocity.push(r.matrix(rows, cols)?);
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes after checkpoint"));
        }
        Ok(Self {
            encoder,
            twin,
            velocity,
            epoch,
            seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_matrix(out: &mut Vec<u8>, m: &DenseMatrix) {
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_encoder(out: &mut Vec<u8>, enc: &EncoderState) {
    out.extend_from_slice(&(enc.layers().len() as u32).to_le_bytes());
    for l in enc.layers() {
        out.extend_from_slice(&(l.weight.cols() as u32).to_le_bytes());
        out.extend_from_slice(&(l.weight.rows() as u32).to_le_bytes());
        out.push(match l.activation {
            Activation::None => 0,
            Activation::Relu => 1,
        });
        out.push(l.standardize as u8);
        for v in l.weight.data().iter().chain(l.bias.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: &str) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message: message.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(self.err("checkpoint truncated")),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DenseMatrix> {
        let at = self.pos;
        let n = rows.checked_mul(cols).ok_or_else(|| self.err("matrix size overflows"))?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.err("matrix size overflows"))?)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        DenseMatrix::new(rows, cols, data).map_err(|e| Error::Format {
            offset: at as u64,
            message: e.to_string(),
        })
    }
}

fn read_encoder(r: &mut Reader<'_>) -> Result<EncoderState> {
    let n = r.u32()? as usize;
    let mut layers = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let input = r.u32()? as usize;
        let output = r.u32()? as usize;
        let activation = match r.u8()? {
            0 => Activation::None,
            1 => Activation::Relu,
            a => return Err(r.err(&format!("unknown activation code {a}"))),
        };
        let standardize = match r.u8()? {
            0 => false,
            1 => true,
            s => return Err(r.err(&format!("standardize flag must be 0 or 1, got {s}"))),
        };
        let weight = r.matrix(output, input)?;
        let bias = r.matrix(output, 1)?;
        layers.push(Layer {
            weight,
            bias,
            activation,
            standardize,
        });
    }
    let at = r.pos;
    EncoderState::from_layers(layers).map_err(|e| Error::Format {
        offset: at as u64,
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_params, mlp_architecture};

    fn sample() -> Checkpoint {
        let enc = init_params(&mlp_architecture(3, &[5], 2), 7).unwrap();
        let twin = MomentumTwin::new(&enc, 0.99).unwrap();
        let velocity = enc.params().iter().map(|p| p.scale(0.5)).collect();
        Checkpoint {
            encoder: enc,
            twin: Some(twin),
            velocity,
            epoch: 4,
            seed: 11,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn corrupt_magic_and_version() {
        let mut b = sample().to_bytes();
        b[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Format { offset: 0, .. })));
        let mut b = sample().to_bytes();
        b[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn truncated_and_trailing() {
        let b = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&b[..b.len() - 3]), Err(Error::Format { .. })));
        let mut long = b.clone();
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Format { .. })));
    }
}
