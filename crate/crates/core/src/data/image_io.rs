use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// An RGB image in HWC byte order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::Invalid(format!(
                "{} bytes for a {width}x{height} RGB image",
                pixels.len()
            )));
        }
        Ok(RgbImage { width, height, pixels })
    }

    /// Expand one-channel images to gray RGB; three-channel images pass
    /// through.
    pub fn from_channels(width: usize, height: usize, channels: usize, data: &[u8]) -> Result<Self> {
        match channels {
            3 => RgbImage::new(width, height, data.to_vec()),
            1 => RgbImage::new(width, height, data.iter().flat_map(|&v| [v, v, v]).collect()),
            c => Err(Error::Invalid(format!("cannot export {c}-channel images"))),
        }
    }
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let fail = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    // Header: magic and three integers separated by whitespace, then one
    // whitespace byte before the raster.
    let mut fields = Vec::new();
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
            return Err(fail("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| fail("non-ASCII header"))?);
    }
    if fields[0] != "P6" {
        return Err(fail("not a binary PPM"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| fail("bad header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(fail("only 8-bit PPM is supported"));
    }
    let raster = bytes.get(i + 1..).ok_or_else(|| fail("missing raster"))?;
    if raster.len() != w * h * 3 {
        return Err(fail("raster size does not match header"));
    }
    RgbImage::new(w, h, raster.to_vec())
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    fs::write(path, encode_ppm(img))?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&fs::read(path)?, path)
}

pub const GRID_GUTTER: usize = 2;

/// Tile equally sized images into a near-square grid with black gutters
/// between cells.
pub fn tile_grid(images: &[RgbImage]) -> Result<RgbImage> {
    let first = images.first().ok_or_else(|| Error::Invalid("empty image grid".into()))?;
    let (w, h) = (first.width, first.height);
    if images.iter().any(|im| im.width != w || im.height != h) {
        return Err(Error::Invalid("grid images differ in size".into()));
    }
    let cols = (images.len() as f64).sqrt().ceil() as usize;
    let rows = images.len().div_ceil(cols);
    let cw = cols * w + (cols - 1) * GRID_GUTTER;
    let ch = rows * h + (rows - 1) * GRID_GUTTER;
    let mut pixels = vec![0u8; cw * ch * 3];
    for (k, im) in images.iter().enumerate() {
        let (ox, oy) = ((k % cols) * (w + GRID_GUTTER), (k / cols) * (h + GRID_GUTTER));
        for y in 0..h {
            let dst = ((oy + y) * cw + ox) * 3;
            pixels[dst..dst + w * 3].copy_from_slice(&im.pixels[y * w * 3..(y + 1) * w * 3]);
        }
    }
    RgbImage::new(cw, ch, pixels)
}

pub fn write_ppm_grid(path: &Path, images: &[RgbImage]) -> Result<()> {
    write_ppm(path, &tile_grid(images)?)
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    image::save_buffer(
        path,
        &img.pixels,
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn write_png_grid(path: &Path, images: &[RgbImage]) -> Result<()> {
    write_png(path, &tile_grid(images)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_pixel_bytes() {
        let img = RgbImage::new(1, 1, vec![255; 3]).unwrap();
        assert_eq!(encode_ppm(&img), b"P6\n1 1\n255\n\xff\xff\xff".to_vec());
    }

    #[test]
    fn ppm_round_trip() {
        let img = RgbImage::new(3, 2, (0..18).map(|v| v * 13).collect()).unwrap();
        assert_eq!(decode_ppm(&encode_ppm(&img), Path::new("m")).unwrap(), img);
        assert!(decode_ppm(b"P5\n1 1\n255\n\0", Path::new("m")).is_err());
        assert!(decode_ppm(b"P6\n2 1\n255\n\0\0\0", Path::new("m")).is_err());
    }

    #[test]
    fn grid_layout() {
        let imgs: Vec<_> = (0..16).map(|k| RgbImage::new(32, 32, vec![k as u8 + 1; 32 * 32 * 3]).unwrap()).collect();
        let g = tile_grid(&imgs).unwrap();
        assert_eq!((g.width, g.height), (134, 134));
        let at = |x: usize, y: usize| g.pixels[(y * g.width + x) * 3];
        assert_eq!(at(0, 0), 1);
        assert_eq!(at(32, 0), 0);
        assert_eq!(at(34, 0), 2);
        assert_eq!(at(133, 133), 16);
        let three: Vec<_> = imgs[..3].to_vec();
        let g = tile_grid(&three).unwrap();
        assert_eq!((g.width, g.height), (66, 66));
    }
}
