//! Binary (P5) 8-bit PGM encoding.

use std::path::Path;

use super::image::GrayImage;
use crate::error::{Error, Result};

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let bad = |reason: &str| Error::Corruption { path: path.to_path_buf(), reason: reason.to_string() };
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PGM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII PGM header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PGM header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("PGM maxval must be 255"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes.get(pos..).ok_or_else(|| bad("missing raster"))?;
    if raster.len() != w * h {
        return Err(bad("raster size does not match header"));
    }
    GrayImage::new(h, w, raster.to_vec()).map_err(|_| bad("empty image"))
}

pub fn write_pgm(img: &GrayImage, path: &Path) -> Result<()> {
    std::fs::write(path, encode_pgm(img))
        .map_err(|source| Error::DatasetWrite { path: path.to_path_buf(), source })
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::DatasetRead { path: path.to_path_buf(), reason: e.to_string() })?;
    decode_pgm(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_and_round_trip() {
        let img = GrayImage::new(2, 3, vec![0, 10, 20, 30, 40, 255]).unwrap();
        let bytes = encode_pgm(&img);
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(decode_pgm(&bytes, Path::new("x")).unwrap(), img);
    }

    #[test]
    fn truncated_raster_is_corruption() {
        let img = GrayImage::new(2, 2, vec![1, 2, 3, 4]).unwrap();
        let bytes = encode_pgm(&img);
        let err = decode_pgm(&bytes[..bytes.len() - 1], Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Corruption { .. }));
    }
}
