//! Binary PPM (P6, 8-bit) reading and writing.

use std::path::Path;

use super::{ImageTensor, VisionError};

fn err(offset: usize, msg: impl Into<String>) -> VisionError {
    VisionError::Ppm { offset, msg: msg.into() }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, VisionError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(start, format!("{what} out of range")))
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageTensor, VisionError> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(err(0, "missing P6 magic"));
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval_at = h.pos;
    let maxval = h.number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(err(maxval_at, format!("unsupported maxval {maxval}")));
    }
    if h.pos >= bytes.len() || !bytes[h.pos].is_ascii_whitespace() {
        return Err(err(h.pos, "expected single whitespace after maxval"));
    }
    let start = h.pos + 1;
    let need = width * height * 3;
    if bytes.len() < start + need {
        return Err(err(bytes.len(), format!("truncated payload: need {need} bytes after offset {start}")));
    }
    let data = bytes[start..start + need].iter().map(|&b| b as f32 / maxval as f32).collect();
    ImageTensor::new(height, width, 3, data)
}

pub fn encode_ppm(img: &ImageTensor) -> Result<Vec<u8>, VisionError> {
    if img.channels() != 3 {
        return Err(VisionError::Shape(format!("P6 needs 3 channels, image has {}", img.channels())));
    }
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.to_u8());
    Ok(out)
}

pub fn load_image(path: &Path) -> Result<ImageTensor, VisionError> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn save_image(img: &ImageTensor, path: &Path) -> Result<(), VisionError> {
    std::fs::write(path, encode_ppm(img)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn black_2x2() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend([0u8; 12]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.dims(), (2, 2, 3));
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn comments_in_header() {
        let mut bytes = b"P6 # made by hand\n1 1\n# another\n255\n".to_vec();
        bytes.extend([255u8, 0, 51]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.data(), &[1.0, 0.0, 0.2]);
    }

    #[test]
    fn round_trip_random_bytes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let bytes: Vec<u8> = (0..7 * 5 * 3).map(|_| rng.random()).collect();
        let img = ImageTensor::from_u8(5, 7, 3, &bytes).unwrap();
        let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        assert_eq!(back.to_u8(), bytes);
        assert_eq!(back, img);
    }

    #[test]
    fn rejects_bad_files() {
        let mut wide = b"P6\n1 1\n65535\n".to_vec();
        wide.extend([0u8; 6]);
        let e = decode_ppm(&wide).unwrap_err().to_string();
        assert!(e.contains("unsupported maxval"), "{e}");

        let e = decode_ppm(b"P6\n2 2\n255\n\x00\x00").unwrap_err();
        assert!(matches!(e, VisionError::Ppm { offset: 13, .. }), "{e}");

        let e = decode_ppm(b"P3\n1 1\n255\n").unwrap_err();
        assert!(matches!(e, VisionError::Ppm { offset: 0, .. }));

        let e = decode_ppm(b"P6\nx 1\n255\n").unwrap_err();
        assert!(matches!(e, VisionError::Ppm { offset: 3, .. }), "{e}");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let img = ImageTensor::from_u8(2, 3, 3, &[10u8; 18]).unwrap();
        save_image(&img, &path).unwrap();
        assert_eq!(load_image(&path).unwrap(), img);
    }
}
