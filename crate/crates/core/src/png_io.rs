//! 8-bit PNG encoding and decoding for slices, masks and heatmaps.

use std::io::Cursor;

use crate::data_model::Raster;
use crate::error::{Error, Result};

/// Palette used for mask PNGs: index 0 black, index 1 red.
const MASK_PALETTE: [u8; 6] = [0, 0, 0, 255, 0, 0];

fn encode(raster: &Raster<u8>, color: png::ColorType, palette: Option<&[u8]>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, raster.width() as u32, raster.height() as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        if let Some(p) = palette {
            enc.set_palette(p.to_vec());
        }
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::invalid(format!("png header: {e}")))?;
        writer
            .write_image_data(raster.as_slice())
            .map_err(|e| Error::invalid(format!("png data: {e}")))?;
    }
    Ok(out)
}

/// Encode an 8-bit grayscale image.
pub fn encode_gray(raster: &Raster<u8>) -> Result<Vec<u8>> {
    encode(raster, png::ColorType::Grayscale, None)
}

/// Encode a class mask as an 8-bit paletted PNG whose indices are the class ids.
pub fn encode_mask(raster: &Raster<u8>) -> Result<Vec<u8>> {
    encode(raster, png::ColorType::Indexed, Some(&MASK_PALETTE))
}

/// Decode an 8-bit PNG into its raw sample values.
///
/// Grayscale images yield intensities; paletted images yield palette
/// indices (no palette expansion), which is how masks are stored.
pub fn decode_u8(bytes: &[u8]) -> Result<Raster<u8>> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::invalid(format!("png decode: {e}")))?;
    let info = reader.info();
    let (width, height) = (info.width as usize, info.height as usize);
    let (color, depth) = (info.color_type, info.bit_depth);
    if depth != png::BitDepth::Eight {
        return Err(Error::invalid(format!("unsupported png bit depth {depth:?}")));
    }
    let channels = match color {
        png::ColorType::Grayscale | png::ColorType::Indexed => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
    };
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::invalid("png too large"))?;
    let mut buf = vec![0u8; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::invalid(format!("png decode: {e}")))?;
    let stride = frame.line_size;
    let mut data = Vec::with_capacity(width * height);
    for r in 0..height {
        let row = &buf[r * stride..r * stride + width * channels];
        // multi-channel inputs keep their first channel
        data.extend(row.iter().step_by(channels).copied());
    }
    Raster::new(height, width, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_and_mask_round_trip() {
        let img = Raster::from_fn(5, 7, |r, c| (r * 37 + c * 11) as u8);
        assert_eq!(decode_u8(&encode_gray(&img).unwrap()).unwrap(), img);
        let mask = Raster::from_fn(6, 3, |r, c| ((r + c) % 2) as u8);
        assert_eq!(decode_u8(&encode_mask(&mask).unwrap()).unwrap(), mask);
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(decode_u8(b"not a png").is_err());
    }
}
