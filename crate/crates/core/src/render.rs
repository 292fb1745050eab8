//! PNG rendering of predicted change maps against ground truth.
//!
//! Area maps: true positive white, true negative black, false positive red, false
//! negative green. Moment maps show the predicted moment: 0 is black, moments `1..`
//! cycle through [`MOMENT_PALETTE`].

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::data::ChangeLabels;
use crate::error::{CaimError, Result};

pub type Rgb = [u8; 3];

pub const TRUE_POSITIVE: Rgb = [255, 255, 255];
pub const TRUE_NEGATIVE: Rgb = [0, 0, 0];
pub const FALSE_POSITIVE: Rgb = [255, 0, 0];
pub const FALSE_NEGATIVE: Rgb = [0, 255, 0];

/// Colours for moments 1, 2, ...; moment `m` uses entry `(m − 1) mod 12`.
pub const MOMENT_PALETTE: [Rgb; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [170, 110, 40],
];

pub fn moment_color(m: u16) -> Rgb {
    if m == 0 {
        [0, 0, 0]
    } else {
        MOMENT_PALETTE[(m as usize - 1) % MOMENT_PALETTE.len()]
    }
}

fn check_shapes(pred: &ChangeLabels, truth: &ChangeLabels) -> Result<()> {
    if (pred.height, pred.width) != (truth.height, truth.width) || pred.area.len() != truth.area.len() {
        return Err(CaimError::Export(format!(
            "prediction is {}x{}, labels are {}x{}",
            pred.height, pred.width, truth.height, truth.width
        )));
    }
    Ok(())
}

pub fn area_image(pred: &ChangeLabels, truth: &ChangeLabels) -> Result<Vec<Rgb>> {
    check_shapes(pred, truth)?;
    Ok(pred
        .area
        .iter()
        .zip(&truth.area)
        .map(|(&p, &t)| match (p != 0, t != 0) {
            (true, true) => TRUE_POSITIVE,
            (false, false) => TRUE_NEGATIVE,
            (true, false) => FALSE_POSITIVE,
            (false, true) => FALSE_NEGATIVE,
        })
        .collect())
}

pub fn moment_image(pred: &ChangeLabels) -> Vec<Rgb> {
    pred.moment.iter().map(|&m| moment_color(m)).collect()
}

pub fn write_png(path: &Path, width: usize, height: usize, pixels: &[Rgb]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(CaimError::Export(format!("{} pixels for a {width}x{height} image", pixels.len())));
    }
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| CaimError::Export(e.to_string());
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(pixels.as_flattened()).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Writes `<stem>_area.png` and `<stem>_moment.png` into `dir`.
pub fn export_maps(pred: &ChangeLabels, truth: &ChangeLabels, dir: &Path, stem: &str) -> Result<[PathBuf; 2]> {
    let area = area_image(pred, truth)?;
    let area_path = dir.join(format!("{stem}_area.png"));
    write_png(&area_path, pred.width, pred.height, &area)?;
    let moment_path = dir.join(format!("{stem}_moment.png"));
    write_png(&moment_path, pred.width, pred.height, &moment_image(pred))?;
    Ok([area_path, moment_path])
}

/// Decodes an 8-bit RGB PNG back into pixels.
pub fn read_png(path: &Path) -> Result<(usize, usize, Vec<Rgb>)> {
    let dec = png::Decoder::new(std::io::BufReader::new(File::open(path)?));
    let png_err = |e: png::DecodingError| CaimError::Export(e.to_string());
    let mut reader = dec.read_info().map_err(png_err)?;
    let size = reader.output_buffer_size().ok_or_else(|| CaimError::Export("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(CaimError::Export(format!("unsupported PNG {:?}/{:?}", info.color_type, info.bit_depth)));
    }
    let px = buf[..info.buffer_size()].chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    Ok((info.width as usize, info.height as usize, px))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(area: Vec<u8>, moment: Vec<u16>, h: usize, w: usize) -> ChangeLabels {
        ChangeLabels::new(3, h, w, area, moment).unwrap()
    }

    #[test]
    fn four_outcomes_round_trip() {
        let pred = labels(vec![1, 0, 1, 0], vec![1, 0, 2, 0], 2, 2);
        let truth = labels(vec![1, 0, 0, 1], vec![1, 0, 0, 2], 2, 2);
        let dir = tempfile::tempdir().unwrap();
        let [a, m] = export_maps(&pred, &truth, dir.path(), "s").unwrap();
        let (w, h, px) = read_png(&a).unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(px, vec![TRUE_POSITIVE, TRUE_NEGATIVE, FALSE_POSITIVE, FALSE_NEGATIVE]);
        let (_, _, px) = read_png(&m).unwrap();
        assert_eq!(px, vec![MOMENT_PALETTE[0], [0, 0, 0], MOMENT_PALETTE[1], [0, 0, 0]]);
    }

    #[test]
    fn shape_mismatch_is_an_export_error() {
        let a = labels(vec![0; 4], vec![0; 4], 2, 2);
        let b = labels(vec![0; 4], vec![0; 4], 1, 4);
        assert!(matches!(area_image(&a, &b), Err(CaimError::Export(_))));
    }
}
