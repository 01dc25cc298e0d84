use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use super::PipelineError;
use crate::raster::{LabelMask, CLASS_COUNT};

pub type Rgb = [u8; 3];

/// Colour per class, indexed by class value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Palette(pub [Rgb; CLASS_COUNT]);

impl Default for Palette {
    /// White background, green crop, red weed.
    fn default() -> Self {
        Palette([[255, 255, 255], [0, 255, 0], [255, 0, 0]])
    }
}

pub fn render_rgb(mask: &LabelMask, palette: &Palette) -> Vec<u8> {
    mask.classes().iter().flat_map(|&c| palette.0[c as usize]).collect()
}

/// Writes an 8-bit RGB PNG with one pixel per mask cell.
pub fn render_map(mask: &LabelMask, path: &Path, palette: &Palette) -> Result<(), PipelineError> {
    let io = |e: std::io::Error| PipelineError::io(path, e);
    let file = File::create(path).map_err(io)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), mask.width() as u32, mask.height() as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let enc = |e: png::EncodingError| PipelineError::Png(path.display().to_string(), e.to_string());
    let mut writer = encoder.write_header().map_err(enc)?;
    writer.write_image_data(&render_rgb(mask, palette)).map_err(enc)?;
    writer.finish().map_err(enc)
}

/// Decodes an 8-bit RGB PNG into (width, height, pixels).
pub fn read_png_rgb(path: &Path) -> Result<(usize, usize, Vec<Rgb>), PipelineError> {
    let file = File::open(path).map_err(|e| PipelineError::io(path, e))?;
    let dec = |e: png::DecodingError| PipelineError::Png(path.display().to_string(), e.to_string());
    let mut reader = png::Decoder::new(std::io::BufReader::new(file)).read_info().map_err(dec)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(dec)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(PipelineError::Png(path.display().to_string(), "expected 8-bit RGB".into()));
    }
    let pixels = buf[..info.buffer_size()].chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect();
    Ok((info.width as usize, info.height as usize, pixels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Class;

    #[test]
    fn background_is_white() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bg.png");
        render_map(&LabelMask::filled(5, 4, Class::Background).unwrap(), &path, &Palette::default()).unwrap();
        let (w, h, px) = read_png_rgb(&path).unwrap();
        assert_eq!((w, h), (5, 4));
        assert!(px.iter().all(|p| *p == [255, 255, 255]));
    }

    #[test]
    fn single_weed_pixel() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.png");
        let mut mask = LabelMask::filled(6, 5, Class::Background).unwrap();
        mask.set(2, 3, Class::Weed);
        render_map(&mask, &path, &Palette::default()).unwrap();
        let (w, _, px) = read_png_rgb(&path).unwrap();
        let red: Vec<usize> = px.iter().enumerate().filter(|(_, p)| **p == [255, 0, 0]).map(|(i, _)| i).collect();
        assert_eq!(red, vec![3 * w + 2]);
    }

    #[test]
    fn identical_masks_give_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let mask = LabelMask::new(4, 2, vec![0, 1, 2, 1, 0, 0, 2, 2]).unwrap();
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        render_map(&mask, &a, &Palette::default()).unwrap();
        render_map(&mask.clone(), &b, &Palette::default()).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn unwritable_path_is_io_failure() {
        let mask = LabelMask::filled(1, 1, Class::Crop).unwrap();
        let err = render_map(&mask, Path::new("/nonexistent-dir/x.png"), &Palette::default()).unwrap_err();
        assert!(matches!(err, PipelineError::Io { .. }));
    }
}
