//! PNG round-tripping between disk and `[H, W, C]` float arrays in [0, 1].

use std::path::Path;

use image::{ImageBuffer, Rgb};
use ndarray::Array3;

use crate::error::{DataError, Result};

/// Encodes an `[H, W, 3]` array in [0,1] as an 8-bit RGB PNG.
pub fn save_png(path: &Path, image: &Array3<f32>) -> Result<()> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(DataError::InvalidArgument(format!(
            "save_png expects 3 channels, got {c}"
        )));
    }
    let mut buf = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(w as u32, h as u32);
    for (y, x, px) in buf.enumerate_pixels_mut().map(|(x, y, p)| (y, x, p)) {
        for ch in 0..3 {
            let v = image[[y as usize, x as usize, ch]];
            px.0[ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    buf.save(path).map_err(|source| DataError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Decodes an 8-bit PNG into an `[H, W, 3]` array in [0,1].
pub fn load_png(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|source| DataError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f32>::zeros((h as usize, w as usize, 3));
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[[y as usize, x as usize, ch]] = px.0[ch] as f32 / 255.0;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_exact_on_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.png");
        // Values already on the 1/255 grid survive the round trip bit-exactly.
        let img = Array3::from_shape_fn((5, 7, 3), |(y, x, c)| {
            ((y * 31 + x * 7 + c * 3) % 256) as f32 / 255.0
        });
        save_png(&path, &img).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn load_missing_file_names_path() {
        let err = load_png(Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(err.to_string().contains("x.png"));
    }
}
