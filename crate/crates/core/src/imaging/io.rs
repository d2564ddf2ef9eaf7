use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ImageEncoder, ImageFormat, ImageReader, RgbImage};

use super::{ColorSpace, Image, CHANNELS};
use crate::error::{Error, Result};

fn image_error(path: &Path, message: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

/// Reads an 8-bit PNG or binary PPM as an sRGB image in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Pnm) => {}
        Some(other) => return Err(image_error(path, format!("unsupported format {other:?}"))),
        None => return Err(image_error(path, "unrecognized image format")),
    }
    let rgb = reader.decode().map_err(|e| image_error(path, e))?.to_rgb8();
    Ok(from_rgb8(&rgb))
}

pub(crate) fn from_rgb8(rgb: &RgbImage) -> Image {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut img = Image::new(h, w, ColorSpace::Srgb);
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..CHANNELS {
            img.set(c, y as usize, x as usize, px[c] as f32 / 255.0);
        }
    }
    img
}

pub(crate) fn to_rgb8(img: &Image) -> RgbImage {
    let (h, w) = img.dims();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let q = |c: usize| (img.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([q(0), q(1), q(2)])
    })
}

/// Writes the image as 8-bit PNG or binary PPM depending on the extension.
/// Values are clamped to `[0, 1]` and rounded to the nearest code value.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let rgb = to_rgb8(img);
    match ext.as_str() {
        "png" => rgb
            .save_with_format(path, ImageFormat::Png)
            .map_err(|e| image_error(path, e)),
        "ppm" | "pnm" => {
            let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
            let writer = std::io::BufWriter::new(file);
            PnmEncoder::new(writer)
                .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
                .write_image(
                    rgb.as_raw(),
                    rgb.width(),
                    rgb.height(),
                    image::ExtendedColorType::Rgb8,
                )
                .map_err(|e| image_error(path, e))
        }
        _ => Err(image_error(path, format!("unsupported output extension '{ext}'"))),
    }
}

/// Encodes to PNG bytes in memory.
pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let rgb = to_rgb8(img);
    let mut buf = std::io::Cursor::new(Vec::new());
    rgb.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| image_error(Path::new("<memory>"), e))?;
    Ok(buf.into_inner())
}

/// Decodes PNG (or PPM) bytes held in memory.
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let path = Path::new("<memory>");
    let reader = ImageReader::new(std::io::Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Pnm) => {}
        _ => return Err(image_error(path, "expected PNG or PPM data")),
    }
    let rgb = reader.decode().map_err(|e| image_error(path, e))?.to_rgb8();
    Ok(from_rgb8(&rgb))
}
