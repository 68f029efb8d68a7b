//! Binary PGM (P5) and PPM (P6) at maxval 255, read and written bit-exactly.

use std::fs;
use std::path::Path;

use crate::error::{CsError, Result};
use crate::sensing::luminance;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Image {
    Gray {
        width: usize,
        height: usize,
        pixels: Vec<u8>,
    },
    /// Interleaved RGB triples, row-major.
    Rgb {
        width: usize,
        height: usize,
        pixels: Vec<u8>,
    },
}

impl Image {
    pub fn width(&self) -> usize {
        match self {
            Image::Gray { width, .. } | Image::Rgb { width, .. } => *width,
        }
    }

    pub fn height(&self) -> usize {
        match self {
            Image::Gray { height, .. } | Image::Rgb { height, .. } => *height,
        }
    }

    /// Luminance plane in [0,1]; grayscale images pass through unchanged.
    pub fn to_gray_tensor(&self) -> Result<Tensor> {
        match self {
            Image::Gray {
                width,
                height,
                pixels,
            } => Tensor::from_vec(
                &[*height, *width],
                pixels.iter().map(|&p| p as f64 / 255.0).collect(),
            ),
            Image::Rgb { .. } => {
                let rgb = self.to_rgb_tensor()?;
                luminance(&rgb)
            }
        }
    }

    /// Planar [3 x H x W] tensor in [0,1].
    pub fn to_rgb_tensor(&self) -> Result<Tensor> {
        match self {
            Image::Gray { .. } => Err(CsError::data("image has no color channels")),
            Image::Rgb {
                width,
                height,
                pixels,
            } => {
                let plane = width * height;
                let mut data = vec![0.0; 3 * plane];
                for i in 0..plane {
                    for c in 0..3 {
                        data[c * plane + i] = pixels[3 * i + c] as f64 / 255.0;
                    }
                }
                Tensor::from_vec(&[3, *height, *width], data)
            }
        }
    }
}

/// Quantize a [0,1] plane to 8 bits.
pub fn quantize(plane: &Tensor) -> Vec<u8> {
    plane
        .data()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

struct Header {
    color: bool,
    width: usize,
    height: usize,
    raster_at: usize,
}

/// Parse the ASCII header: magic, width, height, maxval, with `#` comments,
/// then exactly one whitespace byte before the raster.
fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let fail = |msg: &str| CsError::data(format!("{}: {msg}", path.display()));
    let color = match bytes.get(..2) {
        Some(b"P5") => false,
        Some(b"P6") => true,
        _ => return Err(fail("not a binary PGM/PPM (want P5 or P6)")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Skip whitespace and comments.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(fail("header ends before raster")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if pos == start {
            return Err(fail("malformed header field"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are utf8");
        *field = text
            .parse()
            .map_err(|_| fail("header field out of range"))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(fail("missing separator before raster"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(fail("zero image dimension"));
    }
    if maxval != 255 {
        return Err(fail("only maxval 255 is supported"));
    }
    Ok(Header {
        color,
        width,
        height,
        raster_at: pos,
    })
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes =
        fs::read(path).map_err(|e| CsError::Io(format!("{}: {e}", path.display())))?;
    let h = parse_header(&bytes, path)?;
    let per_pixel = if h.color { 3 } else { 1 };
    let need = h.width * h.height * per_pixel;
    let raster = &bytes[h.raster_at..];
    if raster.len() != need {
        return Err(CsError::data(format!(
            "{}: raster holds {} bytes, header promises {need}",
            path.display(),
            raster.len()
        )));
    }
    let pixels = raster.to_vec();
    Ok(if h.color {
        Image::Rgb {
            width: h.width,
            height: h.height,
            pixels,
        }
    } else {
        Image::Gray {
            width: h.width,
            height: h.height,
            pixels,
        }
    })
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let (magic, w, h, pixels) = match img {
        Image::Gray {
            width,
            height,
            pixels,
        } => ("P5", width, height, pixels),
        Image::Rgb {
            width,
            height,
            pixels,
        } => ("P6", width, height, pixels),
    };
    let mut bytes = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(|e| CsError::Io(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("csamp-image-test");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn gray_round_trip_is_bit_exact() {
        let img = Image::Gray {
            width: 3,
            height: 2,
            pixels: vec![0, 17, 255, 128, 64, 1],
        };
        let path = tmp("round.pgm");
        write_image(&path, &img).unwrap();
        assert_eq!(read_image(&path).unwrap(), img);
        // The file itself is stable too.
        let a = std::fs::read(&path).unwrap();
        write_image(&path, &img).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), a);
    }

    #[test]
    fn rgb_round_trip_is_bit_exact() {
        let img = Image::Rgb {
            width: 2,
            height: 2,
            pixels: (0..12).map(|i| (i * 20) as u8).collect(),
        };
        let path = tmp("round.ppm");
        write_image(&path, &img).unwrap();
        assert_eq!(read_image(&path).unwrap(), img);
    }

    #[test]
    fn header_comments_are_skipped() {
        let path = tmp("comment.pgm");
        std::fs::write(&path, b"P5\n# made by hand\n2 1\n# another\n255\n\x05\xff").unwrap();
        let img = read_image(&path).unwrap();
        assert_eq!(
            img,
            Image::Gray {
                width: 2,
                height: 1,
                pixels: vec![5, 255],
            }
        );
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let p3 = tmp("ascii.pgm");
        std::fs::write(&p3, b"P3\n1 1\n255\n0 0 0\n").unwrap();
        assert!(matches!(read_image(&p3), Err(CsError::Data(_))));

        let maxval = tmp("maxval.pgm");
        std::fs::write(&maxval, b"P5\n1 1\n65535\n\x00\x00").unwrap();
        assert!(matches!(read_image(&maxval), Err(CsError::Data(_))));

        let short = tmp("short.pgm");
        std::fs::write(&short, b"P5\n2 2\n255\n\x00\x01").unwrap();
        assert!(matches!(read_image(&short), Err(CsError::Data(_))));
    }

    #[test]
    fn luminance_matches_weights() {
        let img = Image::Rgb {
            width: 1,
            height: 1,
            pixels: vec![255, 0, 0],
        };
        let t = img.to_gray_tensor().unwrap();
        assert!((t.data()[0] - 0.299).abs() < 1e-12);
    }

    #[test]
    fn quantize_rounds_and_clamps() {
        let t = Tensor::from_vec(&[1, 4], vec![-0.2, 0.0, 0.5001, 1.3]).unwrap();
        assert_eq!(quantize(&t), vec![0, 0, 128, 255]);
    }
}
