//! PNG rendering of stimulus inputs.
//!
//! Inputs are `[h, w, c]` channels-last planes with values in `[0, 1]`. The
//! `c` planes are laid side by side into one 8-bit grayscale image of width
//! `w·c`, so pixel `(r, j·w + col)` holds plane `j`. Two-dimensional inputs
//! are a single plane and flat inputs a one-row strip.

use crate::error::{Result, ServiceError};

/// `(height, width, planes)` of an input shape.
fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n] => Ok((1, n, 1)),
        [h, w] => Ok((h, w, 1)),
        [h, w, c] => Ok((h, w, c)),
        _ => Err(ServiceError::BadRequest(format!("cannot render input of shape {shape:?}"))),
    }
}

/// `(height, width)` of the rendered image.
pub fn image_dims(shape: &[usize]) -> Result<(usize, usize)> {
    let (h, w, c) = layout(shape)?;
    Ok((h, w * c))
}

pub fn to_pixel(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn render_png(shape: &[usize], data: &[f64]) -> Result<Vec<u8>> {
    let (h, w, c) = layout(shape)?;
    let width = w * c;
    let mut pixels = vec![0u8; h * width];
    for r in 0..h {
        for col in 0..w {
            for j in 0..c {
                pixels[r * width + j * w + col] = to_pixel(data[(r * w + col) * c + j]);
            }
        }
    }
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, width as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| std::io::Error::other(e.to_string()))?;
    writer.write_image_data(&pixels).map_err(|e| std::io::Error::other(e.to_string()))?;
    writer.finish().map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(out)
}
