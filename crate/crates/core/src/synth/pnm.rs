//! Binary PPM (P6) and PGM (P5) images with maxval 255.

use std::path::Path;

use facesr_tensor::Tensor;

use crate::error::{data_err, Error, Result};

/// Quantize a value in [0, 1] to a byte; out-of-range values are clamped.
pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn from_byte(b: u8) -> f32 {
    b as f32 / 255.0
}

/// Round-trip through 8-bit storage.
pub fn quantize(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| from_byte(to_byte(v)))
}

/// Encode a `[3, H, W]` image as P6.
pub fn encode_ppm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(data_err!("PPM needs a [3, H, W] image, got {s:?}"));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for p in 0..h * w {
        for c in 0..3 {
            out.push(to_byte(d[c * h * w + p]));
        }
    }
    Ok(out)
}

/// Encode a `[H, W]` or `[1, H, W]` map as P5.
pub fn encode_pgm(map: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = map.shape();
    let (h, w) = match s {
        [h, w] | [1, h, w] => (*h, *w),
        _ => return Err(data_err!("PGM needs a single-channel map, got {s:?}")),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(data_err!("truncated image header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| data_err!("non-ASCII image header"))?);
    }
    // Exactly one whitespace byte separates the header from the raster.
    let offset = i + 1;
    let magic: [u8; 2] = fields[0]
        .as_bytes()
        .try_into()
        .map_err(|_| data_err!("bad image magic {:?}", fields[0]))?;
    let num = |s: &str| s.parse::<usize>().map_err(|_| data_err!("bad image header field {s:?}"));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(data_err!("only maxval 255 is supported, got {maxval}"));
    }
    Ok(Header {
        magic,
        width,
        height,
        offset,
    })
}

/// Decode P6 into `[3, H, W]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P6" {
        return Err(data_err!("not a binary PPM"));
    }
    let n = h.width * h.height;
    let raster = bytes
        .get(h.offset..h.offset + 3 * n)
        .ok_or_else(|| data_err!("truncated PPM raster"))?;
    let mut data = vec![0.0f32; 3 * n];
    for p in 0..n {
        for c in 0..3 {
            data[c * n + p] = from_byte(raster[3 * p + c]);
        }
    }
    Ok(Tensor::new(vec![3, h.height, h.width], data)?)
}

/// Decode P5 into `[H, W]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P5" {
        return Err(data_err!("not a binary PGM"));
    }
    let n = h.width * h.height;
    let raster = bytes
        .get(h.offset..h.offset + n)
        .ok_or_else(|| data_err!("truncated PGM raster"))?;
    Ok(Tensor::new(vec![h.height, h.width], raster.iter().map(|&b| from_byte(b)).collect())?)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    write_file(path, &encode_ppm(img)?)
}

pub fn write_pgm(path: &Path, map: &Tensor<f32>) -> Result<()> {
    write_file(path, &encode_pgm(map)?)
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    decode_ppm(&read_file(path)?).map_err(|e| data_err!("{}: {e}", path.display()))
}

pub fn read_pgm(path: &Path) -> Result<Tensor<f32>> {
    decode_pgm(&read_file(path)?).map_err(|e| data_err!("{}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_exact_on_quantized_values() {
        let img = Tensor::from_fn(vec![3, 5, 7], |i| from_byte((i * 37 % 256) as u8));
        let bytes = encode_ppm(&img).unwrap();
        assert!(bytes.starts_with(b"P6\n7 5\n255\n"));
        assert_eq!(decode_ppm(&bytes).unwrap(), img);
    }

    #[test]
    fn pgm_round_trip_and_comments() {
        let map = Tensor::from_fn(vec![4, 3], |i| from_byte(i as u8 * 20));
        let bytes = encode_pgm(&map).unwrap();
        assert_eq!(decode_pgm(&bytes).unwrap(), map);
        let mut commented = b"P5\n# made by hand\n3 4\n255\n".to_vec();
        commented.extend(&bytes[bytes.len() - 12..]);
        assert_eq!(decode_pgm(&commented).unwrap(), map);
    }

    #[test]
    fn rejects_truncated_and_wrong_magic() {
        let img = Tensor::zeros(vec![3, 2, 2]);
        let bytes = encode_ppm(&img).unwrap();
        assert!(decode_ppm(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_pgm(&bytes).is_err());
    }
}
