//! PNG and binary PPM/PGM (P6/P5, maxval 255) image files.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageFormat};

use super::{Image, PreprocessError};

pub fn encode_png(img: &Image) -> Vec<u8> {
    let bytes = img.to_u8();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let dynimg = if img.channels() == 1 {
        DynamicImage::ImageLuma8(image::GrayImage::from_raw(w, h, bytes).expect("sized"))
    } else {
        DynamicImage::ImageRgb8(image::RgbImage::from_raw(w, h, bytes).expect("sized"))
    };
    let mut out = Cursor::new(Vec::new());
    dynimg
        .write_to(&mut out, ImageFormat::Png)
        .expect("in-memory PNG encoding");
    out.into_inner()
}

/// Decodes a PNG. Grayscale stays single-channel; everything else becomes RGB
/// (alpha is dropped).
pub fn decode_png(bytes: &[u8]) -> Result<Image, PreprocessError> {
    let dynimg = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| PreprocessError::Decode(e.to_string()))?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    match dynimg {
        DynamicImage::ImageLuma8(g) => Image::from_u8(h, w, 1, g.as_raw()),
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageLumaA16(_) => Image::from_u8(h, w, 1, dynimg.to_luma8().as_raw()),
        other => Image::from_u8(h, w, 3, other.to_rgb8().as_raw()),
    }
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.to_u8());
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image, PreprocessError> {
    let bad = |m: &str| PreprocessError::Decode(format!("PPM: {m}"));
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let channels = match tokens[0] {
        "P6" => 3,
        "P5" => 1,
        m => return Err(bad(&format!("unsupported magic {m}"))),
    };
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| bad(&format!("bad number {s}")))
    };
    let (w, h, maxval) = (parse(tokens[1])?, parse(tokens[2])?, parse(tokens[3])?);
    if maxval != 255 {
        return Err(bad(&format!("maxval {maxval} unsupported (need 255)")));
    }
    let need = w * h * channels;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| bad("truncated raster"))?;
    Image::from_u8(h, w, channels, raster)
}

fn is_ppm(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
        Some(ref e) if e == "ppm" || e == "pgm" || e == "pnm"
    )
}

/// Loads by extension: `.ppm`/`.pgm`/`.pnm` as PPM, anything else as PNG.
pub fn load_image(path: &Path) -> Result<Image, PreprocessError> {
    let bytes = fs::read(path)?;
    if is_ppm(path) {
        decode_ppm(&bytes)
    } else {
        decode_png(&bytes)
    }
}

pub fn save_image(img: &Image, path: &Path) -> Result<(), PreprocessError> {
    let bytes = if is_ppm(path) {
        encode_ppm(img)
    } else {
        encode_png(img)
    };
    fs::write(path, bytes)?;
    Ok(())
}
