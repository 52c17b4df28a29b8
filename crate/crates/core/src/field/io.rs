//! `PDSEQ1` sequence files.
//!
//! Layout (little-endian): 6-byte ASCII magic `PDSEQ1`, 2 zero bytes,
//! `u32 T, u32 H, u32 W, u32 C`, `f64 t0`, `f64 dt`, then `T*H*W*C` f64
//! values in `(t, row, col, channel)` order.

use std::path::Path;

use super::{Field, FieldSequence, Grid};
use crate::binio::{read_file, write_file, ByteReader, ByteWriter};
use crate::error::Result;

pub const SEQ_MAGIC: &[u8; 6] = b"PDSEQ1";
pub const SEQ_HEADER_LEN: usize = 40;

pub fn encode_sequence(seq: &FieldSequence) -> Vec<u8> {
    let (n, c) = seq
        .fields()
        .first()
        .map(|f| (f.grid().n(), f.channels()))
        .unwrap_or((0, 0));
    let mut w = ByteWriter::with_capacity(SEQ_HEADER_LEN + seq.len() * n * n * c * 8);
    w.bytes(SEQ_MAGIC);
    w.bytes(&[0, 0]);
    w.u32(seq.len() as u32);
    w.u32(n as u32);
    w.u32(n as u32);
    w.u32(c as u32);
    w.f64(seq.t0());
    w.f64(seq.dt());
    for f in seq.fields() {
        w.f64s(f.data());
    }
    w.finish()
}

/// Decodes a sequence whose grid spans `[x_min, x_max)` on both axes.
pub fn decode_sequence(bytes: &[u8], x_min: f64, x_max: f64) -> Result<FieldSequence> {
    let mut r = ByteReader::new("PDSEQ1", bytes);
    r.magic(SEQ_MAGIC)?;
    let pad = r.take(2)?;
    if pad != [0, 0] {
        return Err(r.fail("reserved padding bytes are not zero"));
    }
    let t = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let c = r.u32()? as usize;
    if h != w {
        return Err(r.fail(format!("dimension mismatch: non-square field {h}x{w}")));
    }
    if c == 0 {
        return Err(r.fail("dimension mismatch: zero channels"));
    }
    let t0 = r.f64()?;
    let dt = r.f64()?;
    let grid = Grid::new(h, x_min, x_max).map_err(|e| r.fail(e.to_string()))?;
    let per = h * w * c;
    let mut fields = Vec::with_capacity(t);
    for _ in 0..t {
        let at = r.offset();
        let data = r.f64s(per)?;
        let field = Field::from_data(grid, c, data, 0.0).map_err(|e| crate::Error::Format {
            what: "PDSEQ1",
            offset: at,
            reason: e.to_string(),
        })?;
        fields.push(field);
    }
    r.expect_end()?;
    FieldSequence::new(t0, dt, fields)
}

pub fn write_sequence(seq: &FieldSequence, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_sequence(seq))
}

pub fn read_sequence(path: impl AsRef<Path>, x_min: f64, x_max: f64) -> Result<FieldSequence> {
    decode_sequence(&read_file(path.as_ref())?, x_min, x_max)
}
