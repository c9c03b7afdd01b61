//! Binary PGM (P5) and PPM (P6) images as `(1, C, H, W)` tensors in `[0, 1]`.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat, ImageReader};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let reader = if reader.format().is_none() {
        let mut r = reader;
        r.set_format(ImageFormat::Pnm);
        r
    } else {
        reader
    };
    let img = reader
        .decode()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let color = img.color();
    if color.has_color() {
        let rgb = img.to_rgb8();
        let mut data = vec![0.0f32; 3 * h * w];
        for (i, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = px.0[c] as f32 / 255.0;
            }
        }
        Tensor::from_vec(Shape::new(1, 3, h, w), data)
    } else {
        let gray = img.to_luma8();
        let data = gray.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Tensor::from_vec(Shape::new(1, 1, h, w), data)
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes plane data of a 1- or 3-channel tensor as P5 or P6.
pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    match s.c {
        1 => write_gray8(path, s.w, s.h, image.plane(0, 0).iter().map(|&v| quantize(v)).collect()),
        3 => {
            let mut bytes = Vec::with_capacity(3 * s.plane());
            for i in 0..s.plane() {
                for c in 0..3 {
                    bytes.push(quantize(image.plane(0, c)[i]));
                }
            }
            encode(path, s.w, s.h, &bytes, ExtendedColorType::Rgb8, PnmSubtype::Pixmap(SampleEncoding::Binary))
        }
        c => Err(Error::Data(format!(
            "{}: cannot write image with {c} channels",
            path.display()
        ))),
    }
}

pub fn write_gray8(path: &Path, w: usize, h: usize, pixels: Vec<u8>) -> Result<()> {
    encode(path, w, h, &pixels, ExtendedColorType::L8, PnmSubtype::Graymap(SampleEncoding::Binary))
}

fn encode(
    path: &Path,
    w: usize,
    h: usize,
    bytes: &[u8],
    color: ExtendedColorType,
    subtype: PnmSubtype,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(subtype)
        .write_image(bytes, w as u32, h as u32, color)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
