//! Binary PPM (P6, maxval 255) and, with the `png` feature, 8-bit PNG.

use std::fs;
use std::path::Path;

use crate::error::{NffbError, Result};
use crate::tasks::Image;

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(NffbError::Format(msg.into()))
}

/// Channel value to byte: clamp to `[0, 1]`, scale by 255, round.
fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Image> {
    Image::new(width, height, bytes.iter().map(|&b| f32::from(b) / 255.0).collect())
}

/// Decodes a P6 file; values become `byte / 255`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    if !bytes.starts_with(b"P6") {
        return format_err("not a binary PPM (missing P6 magic)");
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return format_err("truncated PPM header"),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return format_err("malformed PPM header");
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| NffbError::Format("PPM header number out of range".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return format_err("malformed PPM header");
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return format_err(format!("PPM maxval must be 255, got {maxval}"));
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| NffbError::Format("PPM dimensions overflow".into()))?;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return format_err(format!("truncated PPM payload: {} of {need} bytes", payload.len()));
    }
    from_bytes(width, height, &payload[..need])
}

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.data.iter().map(|&v| to_byte(v)));
    out
}

#[cfg(feature = "png")]
pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| NffbError::Format(format!("PNG: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| NffbError::Format("PNG too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| NffbError::Format(format!("PNG: {e}")))?;
    if info.bit_depth != png::BitDepth::Eight {
        return format_err("PNG must have 8-bit channels");
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => buf.to_vec(),
        png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
        other => return format_err(format!("unsupported PNG color type {other:?}")),
    };
    from_bytes(w, h, &rgb)
}

#[cfg(feature = "png")]
pub fn encode_png(image: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, image.width as u32, image.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().map_err(|e| NffbError::Format(format!("PNG: {e}")))?;
        let bytes: Vec<u8> = image.data.iter().map(|&v| to_byte(v)).collect();
        writer
            .write_image_data(&bytes)
            .map_err(|e| NffbError::Format(format!("PNG: {e}")))?;
    }
    Ok(out)
}

/// Loads a P6 or PNG file, detected by its magic bytes.
pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"\x89PNG") {
        #[cfg(feature = "png")]
        return decode_png(&bytes);
        #[cfg(not(feature = "png"))]
        return format_err("PNG support is disabled in this build");
    }
    decode_ppm(&bytes)
}

/// Saves as PNG when the extension is `png`, otherwise as P6.
pub fn save_image(image: &Image, path: &Path) -> Result<()> {
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let bytes = if is_png {
        #[cfg(feature = "png")]
        {
            encode_png(image)?
        }
        #[cfg(not(feature = "png"))]
        return format_err("PNG support is disabled in this build");
    } else {
        encode_ppm(image)
    };
    fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_red_pixel() {
        let img = decode_ppm(b"P6\n1 1\n255\n\xff\x00\x00").unwrap();
        assert_eq!((img.width, img.height), (1, 1));
        assert_eq!(img.data, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn header_comments_and_whitespace() {
        let img = decode_ppm(b"P6 # made by hand\n2\t1 # size\n255\n\x00\x80\xff\x01\x02\x03").unwrap();
        assert_eq!(img.pixel(0, 0), [0.0, 128.0 / 255.0, 1.0]);
    }

    #[test]
    fn ppm_round_trip_is_bit_identical() {
        let bytes: Vec<u8> = b"P6\n3 2\n255\n".iter().copied().chain(0u8..18).collect();
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(encode_ppm(&img), bytes);
    }

    #[test]
    fn malformed_files_rejected() {
        for bad in [
            &b"P5\n1 1\n255\n\x00"[..],
            b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00",
            b"P6\n2 2\n255\n\x00\x00\x00",
            b"P6\n1",
            b"P6\nx 1\n255\n",
            b"P6\n1 1\n255",
        ] {
            assert!(matches!(decode_ppm(bad), Err(NffbError::Format(_))), "{bad:?}");
        }
    }

    #[cfg(feature = "png")]
    #[test]
    fn png_and_ppm_load_equal() {
        let bytes: Vec<u8> = b"P6\n4 3\n255\n".iter().copied().chain((0u8..36).map(|b| b * 7)).collect();
        let img = decode_ppm(&bytes).unwrap();
        let png = encode_png(&img).unwrap();
        assert_eq!(decode_png(&png).unwrap(), img);
    }

    #[test]
    fn save_and_load_by_extension() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(2, 1, vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).unwrap();
        let ppm = dir.path().join("a.ppm");
        save_image(&img, &ppm).unwrap();
        let back = load_image(&ppm).unwrap();
        assert!(back.data.iter().zip(&img.data).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0));
        #[cfg(feature = "png")]
        {
            let png = dir.path().join("a.png");
            save_image(&img, &png).unwrap();
            assert_eq!(load_image(&png).unwrap(), back);
        }
    }
}
