//! Binary PPM (P6, maxval 255) read and write. Images are `[3, H, W]` in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn bad(msg: impl Into<String>) -> Error {
    Error::Image(msg.into())
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed PPM header"))
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number()?;
    let height = h.number()?;
    let maxval = h.number()?;
    if maxval != 255 {
        return Err(bad(format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(bad("empty image"));
    }
    match bytes.get(h.pos) {
        Some(c) if c.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(bad("malformed PPM header")),
    }
    let n = width * height;
    let body = &bytes[h.pos..];
    if body.len() != 3 * n {
        return Err(bad(format!("expected {} pixel bytes, found {}", 3 * n, body.len())));
    }
    let mut data = vec![0.0; 3 * n];
    for (p, px) in body.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * n + p] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, height, width], data)
}

/// Clamps to `[0, 1]` and rounds to 8 bits.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(bad(format!("expected [3,H,W], got {s:?}")));
    }
    let (height, width) = (s[1], s[2]);
    let n = height * width;
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(3 * n);
    let d = image.data();
    for p in 0..n {
        for c in 0..3 {
            let v = d[c * n + p];
            let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&std::fs::read(path)?).map_err(|e| match e {
        Error::Image(m) => Error::Image(format!("{}: {m}", path.display())),
        e => e,
    })
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    std::fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

/// Every `.ppm` file in a directory, sorted by file name.
pub fn read_ppm_dir(dir: &Path) -> Result<Vec<Tensor>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(bad(format!("no .ppm files in {}", dir.display())));
    }
    paths.iter().map(|p| read_ppm(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_bytes() {
        let mut img = Tensor::zeros(&[3, 1, 2]);
        img.data_mut().copy_from_slice(&[1.0, 0.0, 0.5, 0.2, 0.0, 1.0]);
        let bytes = encode_ppm(&img).unwrap();
        assert_eq!(bytes, b"P6\n2 1\n255\n\xff\x80\x00\x00\x33\xff".to_vec());
        let back = decode_ppm(&bytes).unwrap();
        assert_eq!(back.shape(), &[3, 1, 2]);
        assert_eq!(back.data()[2], 128.0 / 255.0);
    }

    #[test]
    fn header_comments_and_errors() {
        let img = decode_ppm(b"P6 # c\n1 # w\n1\n255\n\x01\x02\x03").unwrap();
        assert_eq!(img.data(), &[1.0 / 255.0, 2.0 / 255.0, 3.0 / 255.0]);
        assert!(decode_ppm(b"P5\n1 1\n255\n\x00").is_err());
        assert!(decode_ppm(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").is_err());
        assert!(decode_ppm(b"P6\n2 1\n255\n\x00\x00\x00").is_err());
        assert!(decode_ppm(b"P6\n1 1\n255").is_err());
        assert!(encode_ppm(&Tensor::zeros(&[1, 2, 2])).is_err());
    }

    #[test]
    fn directory_listing_sorted() {
        let dir = tempfile::tempdir().unwrap();
        for (name, v) in [("b.ppm", 0.0), ("a.ppm", 1.0)] {
            write_ppm(&dir.path().join(name), &Tensor::full(&[3, 2, 2], v)).unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let imgs = read_ppm_dir(dir.path()).unwrap();
        assert_eq!(imgs.len(), 2);
        assert_eq!(imgs[0].data()[0], 1.0);
        assert!(read_ppm_dir(&dir.path().join("missing")).is_err());
    }

    proptest! {
        #[test]
        fn bytes_roundtrip(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            let mut state = seed;
            let pix: Vec<u8> = (0..3 * h * w).map(|_| { state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (state >> 56) as u8 }).collect();
            let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
            bytes.extend_from_slice(&pix);
            let img = decode_ppm(&bytes).unwrap();
            prop_assert_eq!(encode_ppm(&img).unwrap(), bytes);
        }
    }
}
