//! 8-bit PNG and binary PGM/PPM reading and writing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::Path;

use crate::data::image::Image;
use crate::error::{CoreError, Result};
use crate::labels::{LabelMap, DEFAULT_IGNORE};

/// Decoded 8-bit raster with 1 (gray) or 3 (RGB) interleaved channels.
struct Raw {
    height: usize,
    width: usize,
    channels: usize,
    bytes: Vec<u8>,
}

fn format_error(path: &Path, reason: impl Into<String>) -> CoreError {
    CoreError::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn read_png(path: &Path) -> Result<Raw> {
    let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| format_error(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| format_error(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| format_error(path, e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(format_error(path, format!("bit depth {:?} unsupported; 8-bit only", info.bit_depth)));
    }
    let (height, width) = (info.height as usize, info.width as usize);
    buf.truncate(info.buffer_size());
    let (channels, bytes) = match info.color_type {
        png::ColorType::Grayscale => (1, buf),
        png::ColorType::Rgb => (3, buf),
        png::ColorType::Rgba => (3, buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect()),
        other => return Err(format_error(path, format!("color type {other:?} unsupported"))),
    };
    Ok(Raw {
        height,
        width,
        channels,
        bytes,
    })
}

fn next_token(data: &[u8], pos: &mut usize) -> Option<String> {
    loop {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < data.len() && data[*pos] == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < data.len() && !data[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| String::from_utf8_lossy(&data[start..*pos]).into_owned())
}

fn read_pnm(path: &Path) -> Result<Raw> {
    let mut data = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| CoreError::io(path, e))?;
    let mut pos = 0;
    let magic = next_token(&data, &mut pos).unwrap_or_default();
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(format_error(path, format!("netpbm variant `{other}` unsupported; binary P5/P6 only"))),
    };
    let mut field = |name: &str| -> Result<usize> {
        next_token(&data, &mut pos)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| format_error(path, format!("bad {name} in header")))
    };
    let (width, height, maxval) = (field("width")?, field("height")?, field("maxval")?);
    if maxval != 255 {
        return Err(format_error(path, format!("maxval {maxval} unsupported; 8-bit only")));
    }
    pos += 1;
    let len = width * height * channels;
    if data.len() < pos + len {
        return Err(format_error(path, "truncated pixel data"));
    }
    Ok(Raw {
        height,
        width,
        channels,
        bytes: data[pos..pos + len].to_vec(),
    })
}

fn read_raw(path: &Path) -> Result<Raw> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let raw = match ext.as_str() {
        "png" => read_png(path)?,
        "pgm" | "ppm" | "pnm" => read_pnm(path)?,
        other => return Err(format_error(path, format!("unknown extension `{other}`"))),
    };
    if raw.height == 0 || raw.width == 0 {
        return Err(format_error(path, "empty raster"));
    }
    Ok(raw)
}

/// RGB (or gray, replicated) 8-bit raster scaled to `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let raw = read_raw(path)?;
    let rgb = if raw.channels == 1 {
        raw.bytes.iter().flat_map(|&v| [v, v, v]).collect()
    } else {
        raw.bytes
    };
    Image::from_rgb8(raw.height, raw.width, &rgb)
}

/// Single-channel 8-bit raster of raw class ids; 255 is the ignore id.
pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let raw = read_raw(path)?;
    if raw.channels != 1 {
        return Err(format_error(path, "label rasters must be single-channel"));
    }
    LabelMap::new(raw.height, raw.width, raw.bytes, DEFAULT_IGNORE)
}

fn write_png(path: &Path, height: usize, width: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| format_error(path, e.to_string()))?;
    writer.write_image_data(bytes).map_err(|e| format_error(path, e.to_string()))?;
    writer.finish().map_err(|e| format_error(path, e.to_string()))
}

pub fn save_image(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    write_png(path.as_ref(), image.height(), image.width(), png::ColorType::Rgb, &image.to_rgb8())
}

pub fn save_labels(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    write_png(path.as_ref(), labels.height(), labels.width(), png::ColorType::Grayscale, labels.ids())
}

/// Interleaved 8-bit RGB straight to PNG.
pub fn save_rgb8(path: impl AsRef<Path>, height: usize, width: usize, rgb: &[u8]) -> Result<()> {
    write_png(path.as_ref(), height, width, png::ColorType::Rgb, rgb)
}
