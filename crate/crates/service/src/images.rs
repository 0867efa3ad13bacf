use base64::engine::general_purpose::STANDARD;
use base64::Engine;

use regal::data_model::{ImageSlice, Raster, Rect};
use regal::png_io::encode_gray;

/// Min-max stretch of a normalized slice to 8 bits for display.
pub fn display_u8(image: &ImageSlice) -> Raster<u8> {
    let px = image.pixels.as_slice();
    let lo = px.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    image.pixels.map(|&v| ((v - lo) / span * 255.0).round() as u8)
}

pub fn png_base64(raster: &Raster<u8>) -> regal::Result<String> {
    Ok(STANDARD.encode(encode_gray(raster)?))
}

/// Full-slice and region-crop PNGs, base64 encoded.
pub fn context_and_crop(image: &ImageSlice, rect: Rect) -> regal::Result<(String, String)> {
    let full = display_u8(image);
    Ok((png_base64(&full)?, png_base64(&full.crop(rect))?))
}
