//! Binary network checkpoints.
//!
//! ```text
//! "LGCN" | version u32 | layer count u32
//! per layer: inputs u32 | outputs u32 | activation u32
//!            weights f32 (row-major, outputs x inputs) | biases f32
//! ```
//! All integers and floats little-endian. Several networks may follow each
//! other in one stream.

use std::io::{Read, Write};

use super::mlp::{Activation, Dense, Mlp};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LGCN";
const VERSION: u32 = 1;

fn put_u32(out: &mut impl Write, v: u32) -> Result<()> {
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(input: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_f32s(input: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 4];
    input.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
}

pub fn write_mlp(net: &Mlp, out: &mut impl Write) -> Result<()> {
    out.write_all(MAGIC)?;
    put_u32(out, VERSION)?;
    put_u32(out, net.layers().len() as u32)?;
    for layer in net.layers() {
        put_u32(out, layer.inputs as u32)?;
        put_u32(out, layer.outputs as u32)?;
        put_u32(out, u32::from(layer.activation.code()))?;
        for v in layer.weights.iter().chain(&layer.bias) {
            out.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_mlp(input: &mut impl Read) -> Result<Mlp> {
    let bad = |msg: String| Error::Config(format!("checkpoint: {msg}"));
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = get_u32(input)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = get_u32(input)? as usize;
    let mut layers = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let inputs = get_u32(input)? as usize;
        let outputs = get_u32(input)? as usize;
        let code = get_u32(input)?;
        let activation = u8::try_from(code)
            .ok()
            .and_then(Activation::from_code)
            .ok_or_else(|| bad(format!("unknown activation {code}")))?;
        let weights = get_f32s(input, inputs * outputs)?;
        let bias = get_f32s(input, outputs)?;
        layers.push(Dense::new(inputs, outputs, weights, bias, activation)?);
    }
    Mlp::from_layers(layers)
}
