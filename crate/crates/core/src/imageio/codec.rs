use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::ImageBuffer;
use crate::error::{Error, Result};

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

/// Loads an RGB (or grayscale) PNG with 8/16-bit samples, or a binary P6 PPM.
///
/// The codec is chosen by file signature. Samples are divided by the
/// format's maximum sample value.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(&bytes, path)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(&bytes, path)
    } else {
        Err(Error::UnsupportedFormat(format!(
            "{}: not a PNG or binary PPM file",
            path.display()
        )))
    }
}

/// Writes an 8-bit image; `.png` or `.ppm` picks the codec.
pub fn save_image(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    save_image_with_depth(img, path, BitDepth::Eight)
}

/// Samples are clamped to `[0, 1]` and quantized with round-half-up.
pub fn save_image_with_depth(img: &ImageBuffer, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    if !matches!(ext.as_deref(), Some("png" | "ppm")) {
        return Err(Error::UnsupportedFormat(format!(
            "{}: output extension must be .png or .ppm",
            path.display()
        )));
    }
    let max = match depth {
        BitDepth::Eight => 255.0,
        BitDepth::Sixteen => 65535.0,
    };
    let samples: Vec<u16> = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * max + 0.5).floor() as u16)
        .collect();
    let raw: Vec<u8> = match depth {
        BitDepth::Eight => samples.iter().map(|&s| s as u8).collect(),
        BitDepth::Sixteen => samples.iter().flat_map(|s| s.to_be_bytes()).collect(),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    match ext.as_deref() {
        Some("png") => {
            let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(match depth {
                BitDepth::Eight => png::BitDepth::Eight,
                BitDepth::Sixteen => png::BitDepth::Sixteen,
            });
            let mut writer = enc
                .write_header()
                .map_err(|e| png_write_error(path, e))?;
            writer
                .write_image_data(&raw)
                .map_err(|e| png_write_error(path, e))?;
            writer.finish().map_err(|e| png_write_error(path, e))?;
        }
        _ => {
            write!(out, "P6\n{} {}\n{}\n", img.width(), img.height(), max as u32)
                .and_then(|_| out.write_all(&raw))
                .map_err(|e| Error::io(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn png_write_error(path: &Path, e: png::EncodingError) -> Error {
    match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::CorruptImage(format!("{}: {other}", path.display())),
    }
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<ImageBuffer> {
    let corrupt = |e: png::DecodingError| Error::CorruptImage(format!("{}: {e}", path.display()));
    let mut decoder = png::Decoder::new(bytes);
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(corrupt)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(corrupt)?;
    let (width, height) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgba | png::ColorType::GrayscaleAlpha => {
            return Err(Error::AlphaChannel(path.display().to_string()))
        }
        png::ColorType::Indexed => {
            return Err(Error::UnsupportedFormat(format!(
                "{}: unexpanded palette image",
                path.display()
            )))
        }
    };
    let samples: Vec<f64> = match info.bit_depth {
        png::BitDepth::Eight => buf[..info.buffer_size()]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect(),
        png::BitDepth::Sixteen => buf[..info.buffer_size()]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
            .collect(),
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "{}: {other:?}-bit samples",
                path.display()
            )))
        }
    };
    let data = if channels == 3 {
        samples
    } else {
        samples.iter().flat_map(|&v| [v, v, v]).collect()
    };
    ImageBuffer::from_vec(height, width, data)
        .map_err(|e| Error::CorruptImage(format!("{}: {e}", path.display())))
}

fn decode_ppm(bytes: &[u8], path: &Path) -> Result<ImageBuffer> {
    let corrupt = |what: &str| Error::CorruptImage(format!("{}: {what}", path.display()));
    let mut pos = 2;
    let mut header = [0usize; 3];
    for field in header.iter_mut() {
        // whitespace and comments before each header field
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt("bad PPM header"))?;
    }
    let [width, height, maxval] = header;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(corrupt("PPM header values out of range"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(corrupt("missing separator after PPM header"));
    }
    pos += 1;
    let count = width * height * 3;
    let bytes_per = if maxval < 256 { 1 } else { 2 };
    let body = bytes
        .get(pos..pos + count * bytes_per)
        .ok_or_else(|| corrupt("truncated PPM pixel data"))?;
    let max = maxval as f64;
    let data = if bytes_per == 1 {
        body.iter().map(|&b| b as f64 / max).collect()
    } else {
        body.chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / max)
            .collect()
    };
    ImageBuffer::from_vec(height, width, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_red_ppm() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("red.ppm");
        std::fs::write(&p, b"P6\n# a comment\n1 1\n255\n\xff\x00\x00").unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.pixel(0, 0), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn black_white_png() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bw.png");
        let f = File::create(&p).unwrap();
        let mut enc = png::Encoder::new(f, 2, 1);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().unwrap();
        w.write_image_data(&[0, 0, 0, 255, 255, 255]).unwrap();
        w.finish().unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!((img.height(), img.width()), (1, 2));
        assert_eq!(img.data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn round_trip_of_quantized_buffers() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (name, depth, levels) in [
            ("a.png", BitDepth::Eight, 255.0),
            ("a.ppm", BitDepth::Eight, 255.0),
            ("b.png", BitDepth::Sixteen, 65535.0),
            ("b.ppm", BitDepth::Sixteen, 65535.0),
        ] {
            let img = ImageBuffer::from_fn(5, 7, |_, _| {
                [0; 3].map(|_| rng.gen_range(0..=levels as u32) as f64 / levels)
            });
            let p = dir.path().join(name);
            save_image_with_depth(&img, &p, depth).unwrap();
            assert_eq!(load_image(&p).unwrap(), img, "{name}");
        }
    }

    #[test]
    fn save_rounds_half_up_after_clamp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.ppm");
        let img = ImageBuffer::from_vec(1, 1, vec![0.5 / 255.0, -3.0, 1.7]).unwrap();
        save_image(&img, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[bytes.len() - 3..], &[1, 0, 255]);
    }

    #[test]
    fn error_categories() {
        let dir = tempfile::tempdir().unwrap();
        let rgba = dir.path().join("rgba.png");
        let f = File::create(&rgba).unwrap();
        let mut enc = png::Encoder::new(f, 1, 1);
        enc.set_color(png::ColorType::Rgba);
        let mut w = enc.write_header().unwrap();
        w.write_image_data(&[1, 2, 3, 4]).unwrap();
        w.finish().unwrap();
        assert!(matches!(load_image(&rgba), Err(Error::AlphaChannel(_))));

        let txt = dir.path().join("x.png");
        std::fs::write(&txt, b"hello").unwrap();
        assert!(matches!(load_image(&txt), Err(Error::UnsupportedFormat(_))));

        let trunc = dir.path().join("t.ppm");
        std::fs::write(&trunc, b"P6 2 2 255\n\x00\x00").unwrap();
        assert!(matches!(load_image(&trunc), Err(Error::CorruptImage(_))));

        let mut png_bytes = std::fs::read(&rgba).unwrap();
        png_bytes.truncate(20);
        let bad = dir.path().join("bad.png");
        std::fs::write(&bad, png_bytes).unwrap();
        assert!(matches!(load_image(&bad), Err(Error::CorruptImage(_))));

        assert!(matches!(
            load_image(dir.path().join("missing.png")),
            Err(Error::Io { .. })
        ));
        let img = ImageBuffer::filled(1, 1, [0.0; 3]);
        assert!(matches!(
            save_image(&img, dir.path().join("x.jpg")),
            Err(Error::UnsupportedFormat(_))
        ));
        assert!(matches!(
            save_image(&img, dir.path().join("no/such/dir/x.png")),
            Err(Error::Io { .. })
        ));
    }
}
