//! Grayscale image output: field snapshots and loss curves as binary PGM.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::trainer::LossHistory;

/// Gray level used for every pixel of a constant field.
pub const CONSTANT_GRAY: u8 = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn encode_pgm(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    let bad = |reason: &str| Error::Format {
        what: "pgm",
        offset: 0,
        reason: reason.into(),
    };
    // Header: magic, width, height, maxval, each separated by whitespace.
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let pixels = bytes.get(pos..pos + width * height).ok_or_else(|| bad("truncated pixel data"))?;
    Ok(Image {
        width,
        height,
        pixels: pixels.to_vec(),
    })
}

/// Min-max normalized image of one channel; row 0 of the field is the first
/// image row. Returns the image with the data range, `None` for a constant.
pub fn field_image(field: &Field, channel: usize) -> Result<(Image, Option<(f64, f64)>)> {
    if channel >= field.channels() {
        return Err(Error::config(format!(
            "channel {channel} out of range for a {}-channel field",
            field.channels()
        )));
    }
    let vals = field.channel(channel);
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n = field.grid().n();
    let (pixels, range) = if hi > lo {
        let px = vals.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect();
        (px, Some((lo, hi)))
    } else {
        (vec![CONSTANT_GRAY; vals.len()], None)
    };
    Ok((
        Image {
            width: n,
            height: n,
            pixels,
        },
        range,
    ))
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `path` (PGM) and `path.txt` with the value range.
pub fn render_field(field: &Field, channel: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (img, range) = field_image(field, channel)?;
    let (lo, hi) = match range {
        Some(r) => r,
        None => {
            let v = field.channel(channel)[0];
            (v, v)
        }
    };
    let mut side = format!("channel={channel}\nt={:e}\nmin={lo:e}\nmax={hi:e}\n", field.t);
    if range.is_none() {
        side.push_str("constant=true\n");
    }
    write(path, &encode_pgm(&img))?;
    write(&sidecar_path(path), side.as_bytes())
}

/// Rasterized `log10(loss_total)` against epoch on a white canvas.
pub fn loss_image(history: &LossHistory, width: usize, height: usize) -> Result<Image> {
    let logs: Vec<f64> = history
        .records
        .iter()
        .map(|r| r.loss_total.max(f64::MIN_POSITIVE).log10())
        .collect();
    if logs.is_empty() {
        return Err(Error::config("loss history is empty"));
    }
    let lo = logs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut pixels = vec![255u8; width * height];
    let to_px = |i: usize, v: f64| -> (f64, f64) {
        let x = if logs.len() > 1 {
            i as f64 / (logs.len() - 1) as f64 * (width - 1) as f64
        } else {
            0.0
        };
        let y = (hi - v) / span * (height - 1) as f64;
        (x, y)
    };
    let mut plot = |x: f64, y: f64| {
        let (xi, yi) = (x.round() as usize, y.round() as usize);
        if xi < width && yi < height {
            pixels[yi * width + xi] = 0;
        }
    };
    for i in 0..logs.len() {
        let (x0, y0) = to_px(i, logs[i]);
        let (x1, y1) = if i + 1 < logs.len() { to_px(i + 1, logs[i + 1]) } else { (x0, y0) };
        let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let f = s as f64 / steps as f64;
            plot(x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        }
    }
    Ok(Image { width, height, pixels })
}

pub fn render_loss(history: &LossHistory, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let img = loss_image(history, 400, 200)?;
    let first = history.records.first().map_or(f64::NAN, |r| r.loss_total);
    let last = history.records.last().map_or(f64::NAN, |r| r.loss_total);
    let side = format!(
        "y=log10(loss_total)\nepochs={}\nfirst={first:e}\nlast={last:e}\n",
        history.records.len()
    );
    write(path, &encode_pgm(&img))?;
    write(&sidecar_path(path), side.as_bytes())
}
