//! PFM (linear HDR) and binary PPM (8-bit LDR) readers and writers.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::image::{ColorSpace, ImageBuffer};
use crate::error::{Error, Result};

const LDR_GAMMA: f64 = 2.2;

/// Encodes a display value in `[0, 1]` to a PPM byte.
pub fn encode_ldr_byte(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0).powf(1.0 / LDR_GAMMA)).round() as u8
}

pub fn decode_ldr_byte(b: u8) -> f64 {
    (b as f64 / 255.0).powf(LDR_GAMMA)
}

/// Reads whitespace-separated header tokens, skipping `#` comments.
fn header_tokens<R: BufRead>(reader: &mut R, count: usize, format: &'static str) -> Result<Vec<String>> {
    let mut tokens = Vec::with_capacity(count);
    let mut current = String::new();
    let mut in_comment = false;
    let mut byte = [0u8; 1];
    while tokens.len() < count {
        let n = reader
            .read(&mut byte)
            .map_err(|e| Error::format(format, e.to_string()))?;
        if n == 0 {
            return Err(Error::format(format, "truncated header"));
        }
        let c = byte[0];
        if in_comment {
            in_comment = c != b'\n';
            continue;
        }
        if c == b'#' && current.is_empty() {
            in_comment = true;
        } else if c.is_ascii_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else {
            current.push(c as char);
            if current.len() > 64 {
                return Err(Error::format(format, "header token too long"));
            }
        }
    }
    Ok(tokens)
}

fn parse_dim(s: &str, format: &'static str) -> Result<usize> {
    match s.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(Error::format(format, format!("bad dimension `{s}`"))),
    }
}

pub fn write_pfm<W: Write>(img: &ImageBuffer, mut out: W) -> Result<()> {
    if let Some(v) = img.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("PFM payload ({v})")));
    }
    let (w, h) = (img.width(), img.height());
    let mut buf = format!("PF\n{w} {h}\n-1.0\n").into_bytes();
    buf.reserve(w * h * 12);
    for y in (0..h).rev() {
        let row = &img.data()[y * w * 3..(y + 1) * w * 3];
        for &v in row {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.write_all(&buf).map_err(|e| Error::format("PFM", e.to_string()))
}

pub fn read_pfm<R: Read>(input: R) -> Result<ImageBuffer> {
    let mut reader = BufReader::new(input);
    let tokens = header_tokens(&mut reader, 4, "PFM")?;
    let channels = match tokens[0].as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(Error::format("PFM", format!("bad magic `{other}`"))),
    };
    let w = parse_dim(&tokens[1], "PFM")?;
    let h = parse_dim(&tokens[2], "PFM")?;
    let scale: f32 = tokens[3]
        .parse()
        .map_err(|_| Error::format("PFM", format!("bad scale `{}`", tokens[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format("PFM", "scale must be finite and non-zero"));
    }
    let little = scale < 0.0;
    let mut payload = vec![0u8; w * h * channels * 4];
    reader
        .read_exact(&mut payload)
        .map_err(|_| Error::format("PFM", "truncated payload"))?;
    let mut data = vec![0.0; w * h * 3];
    for (k, chunk) in payload.chunks_exact(4).enumerate() {
        let bytes = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(bytes)
        } else {
            f32::from_be_bytes(bytes)
        } as f64;
        let pixel = k / channels;
        let (x, y_file) = (pixel % w, pixel / w);
        let y = h - 1 - y_file;
        if channels == 3 {
            data[(y * w + x) * 3 + k % 3] = v;
        } else {
            data[(y * w + x) * 3..(y * w + x) * 3 + 3].fill(v);
        }
    }
    ImageBuffer::from_vec(w, h, data, ColorSpace::LinearHdr)
}

pub fn write_ppm<W: Write>(img: &ImageBuffer, mut out: W) -> Result<()> {
    if let Some(v) = img.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("PPM payload ({v})")));
    }
    let mut buf = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    buf.extend(img.data().iter().map(|&v| encode_ldr_byte(v)));
    out.write_all(&buf).map_err(|e| Error::format("PPM", e.to_string()))
}

pub fn read_ppm<R: Read>(input: R) -> Result<ImageBuffer> {
    let mut reader = BufReader::new(input);
    let tokens = header_tokens(&mut reader, 4, "PPM")?;
    if tokens[0] != "P6" {
        return Err(Error::format("PPM", format!("bad magic `{}`", tokens[0])));
    }
    let w = parse_dim(&tokens[1], "PPM")?;
    let h = parse_dim(&tokens[2], "PPM")?;
    if tokens[3] != "255" {
        return Err(Error::format("PPM", format!("unsupported maxval `{}`", tokens[3])));
    }
    let mut payload = vec![0u8; w * h * 3];
    reader
        .read_exact(&mut payload)
        .map_err(|_| Error::format("PPM", "truncated payload"))?;
    let data = payload.into_iter().map(decode_ldr_byte).collect();
    ImageBuffer::from_vec(w, h, data, ColorSpace::LdrUnit)
}

pub fn save_pfm(img: &ImageBuffer, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_pfm(img, std::io::BufWriter::new(file))
}

pub fn load_pfm(path: &Path) -> Result<ImageBuffer> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_pfm(file)
}

pub fn save_ppm(img: &ImageBuffer, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_ppm(img, std::io::BufWriter::new(file))
}

pub fn load_ppm(path: &Path) -> Result<ImageBuffer> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_ppm(file)
}
