//! Binary checkpoints of an embedder and its loss parameters.
//!
//! Layout (all integers `u32`, all reals `f64`, little-endian):
//!
//! | field | contents |
//! |-------|----------|
//! | magic | `SPKM` |
//! | version | `1` |
//! | input norm | `0` none, `1` per-utterance mean/variance |
//! | `F`, `H`, `D` | input, hidden and embedding widths |
//! | `W1` | `H×F` row-major, then `b1` (`H`) |
//! | `W2` | `D×H` row-major, then `b2` (`D`) |
//! | loss kind | `0` none, `1` classifier head, `2` affine similarity |
//! | head | `C`, `D`, then `C×D` weights row-major and `C` biases |
//! | affine | `w`, `b` |

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::embedder::{EmbedderConfig, EmbedderParams, InputNorm};
use crate::error::{Error, Result};
use crate::losses::{AffineSimilarityParams, ClassifierHead};
use crate::math::Matrix;
use crate::objective::LossParams;

const MAGIC: &[u8; 4] = b"SPKM";
const VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::format("checkpoint", format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64s(w: &mut impl Write, xs: &[f64]) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

pub fn write_checkpoint(w: &mut impl Write, embedder: &EmbedderParams, loss: &LossParams) -> Result<()> {
    let c = embedder.config();
    w.write_all(MAGIC)?;
    put_u32(w, VERSION as usize)?;
    put_u32(
        w,
        match c.input_norm {
            InputNorm::None => 0,
            InputNorm::Mvn => 1,
        },
    )?;
    for d in [c.input_dim, c.hidden, c.dim] {
        put_u32(w, d)?;
    }
    put_f64s(w, embedder.w1.as_slice())?;
    put_f64s(w, &embedder.b1)?;
    put_f64s(w, embedder.w2.as_slice())?;
    put_f64s(w, &embedder.b2)?;
    match loss {
        LossParams::None => put_u32(w, 0)?,
        LossParams::Head(h) => {
            put_u32(w, 1)?;
            put_u32(w, h.classes())?;
            put_u32(w, h.dim())?;
            put_f64s(w, h.weights.as_slice())?;
            put_f64s(w, &h.bias)?;
        }
        LossParams::Affine(a) => {
            put_u32(w, 2)?;
            put_f64s(w, &[a.w, a.b])?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<(EmbedderParams, LossParams)> {
    let bad = |d: String| Error::format("checkpoint", d);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic bytes".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION as usize {
        return Err(bad(format!("unsupported version {version}")));
    }
    let input_norm = match get_u32(r)? {
        0 => InputNorm::None,
        1 => InputNorm::Mvn,
        k => return Err(bad(format!("unknown input normalisation {k}"))),
    };
    let (f, h, d) = (get_u32(r)?, get_u32(r)?, get_u32(r)?);
    let cfg = EmbedderConfig {
        input_dim: f,
        hidden: h,
        dim: d,
        input_norm,
    };
    let w1 = Matrix::from_vec(h, f, get_f64s(r, h * f)?)?;
    let b1 = get_f64s(r, h)?;
    let w2 = Matrix::from_vec(d, h, get_f64s(r, d * h)?)?;
    let b2 = get_f64s(r, d)?;
    let embedder = EmbedderParams::from_parts(cfg, w1, b1, w2, b2)?;
    let loss = match get_u32(r)? {
        0 => LossParams::None,
        1 => {
            let (c, hd) = (get_u32(r)?, get_u32(r)?);
            let weights = Matrix::from_vec(c, hd, get_f64s(r, c * hd)?)?;
            let bias = get_f64s(r, c)?;
            LossParams::Head(ClassifierHead { weights, bias })
        }
        2 => {
            let v = get_f64s(r, 2)?;
            LossParams::Affine(AffineSimilarityParams { w: v[0], b: v[1] })
        }
        k => return Err(bad(format!("unknown loss parameter kind {k}"))),
    };
    if !embedder.is_finite() || !loss.is_finite() {
        return Err(bad("non-finite parameter".into()));
    }
    Ok((embedder, loss))
}

pub fn save_checkpoint(path: &Path, embedder: &EmbedderParams, loss: &LossParams) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_checkpoint(&mut w, embedder, loss)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(EmbedderParams, LossParams)> {
    read_checkpoint(&mut BufReader::new(fs::File::open(path)?))
}
