//! Binary checkpoint of [`QffParams`]: a header with the shape followed by
//! named row-major float64 tensors.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use super::params::{QffParams, QffShape, TENSOR_NAMES};
use crate::error::{Error, Result};
use crate::retrieval::{read_str, write_str};

const MAGIC: &[u8; 8] = b"QKFCKPT\0";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(params: &QffParams, mut out: W) -> Result<()> {
    let s = params.shape;
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;
    for v in [s.n_queries, s.dim, s.vocab, s.image_dim] {
        out.write_u64::<LittleEndian>(v as u64)?;
    }
    out.write_u64::<LittleEndian>(s.seed)?;
    out.write_u32::<LittleEndian>(TENSOR_NAMES.len() as u32)?;
    for (name, t) in TENSOR_NAMES.iter().zip(params.tensors()) {
        write_str(&mut out, name)?;
        out.write_u64::<LittleEndian>(t.nrows() as u64)?;
        out.write_u64::<LittleEndian>(t.ncols() as u64)?;
        for &x in t.iter() {
            out.write_f64::<LittleEndian>(x)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<QffParams> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a QFF checkpoint".into()));
    }
    let version = input.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Format(format!("checkpoint version {version}, expected {VERSION}")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = input.read_u64::<LittleEndian>()? as usize;
    }
    let shape = QffShape {
        n_queries: dims[0],
        dim: dims[1],
        vocab: dims[2],
        image_dim: dims[3],
        seed: input.read_u64::<LittleEndian>()?,
    };
    shape.validate()?;
    let mut params = QffParams::zeros(shape);
    let expected = params.expected_dims();
    let count = input.read_u32::<LittleEndian>()? as usize;
    if count != TENSOR_NAMES.len() {
        return Err(Error::Format(format!("{count} tensors, expected {}", TENSOR_NAMES.len())));
    }
    let mut seen = [false; 9];
    for _ in 0..count {
        let name = read_str(&mut input)?;
        let slot = TENSOR_NAMES
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| Error::Format(format!("unknown tensor `{name}`")))?;
        if std::mem::replace(&mut seen[slot], true) {
            return Err(Error::Format(format!("tensor `{name}` repeated")));
        }
        let rows = input.read_u64::<LittleEndian>()? as usize;
        let cols = input.read_u64::<LittleEndian>()? as usize;
        if (rows, cols) != expected[slot] {
            return Err(Error::Format(format!(
                "tensor `{name}` has shape {rows}x{cols}, expected {}x{}",
                expected[slot].0, expected[slot].1
            )));
        }
        let mut data = vec![0.0; rows * cols];
        input.read_f64_into::<LittleEndian>(&mut data)?;
        *params.tensors_mut()[slot] =
            Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Format(e.to_string()))?;
    }
    if !params.is_finite() {
        return Err(Error::Format("checkpoint holds non-finite values".into()));
    }
    Ok(params)
}
