//! Cube container format (little-endian, uncompressed):
//!
//! ```text
//! "CAIM" | version u32 = 1 | T u32 | C u32 | H u32 | W u32 | flag u8 (bit0: labels)
//! T·C·H·W × f32 (t, c, h, w order)
//! [labels] H·W × u8 area, H·W × u16 moment
//! ```
//!
//! Prediction dumps reuse the container with `C = 0` (no image payload) and the predicted
//! argmax maps in the label section.

use std::path::Path;

use super::cube::{ChangeLabels, TsiCube};
use crate::error::{CaimError, Result};
use crate::params::ByteCursor;
use crate::tensor::Tensor;

pub const CUBE_MAGIC: &[u8; 4] = b"CAIM";
pub const CUBE_VERSION: u32 = 1;
const FLAG_LABELS: u8 = 1;

fn header(buf: &mut Vec<u8>, dims: [usize; 4], labels: bool) {
    buf.extend_from_slice(CUBE_MAGIC);
    buf.extend_from_slice(&CUBE_VERSION.to_le_bytes());
    for d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.push(if labels { FLAG_LABELS } else { 0 });
}

fn label_payload(buf: &mut Vec<u8>, labels: &ChangeLabels) {
    buf.extend_from_slice(&labels.area);
    for m in &labels.moment {
        buf.extend_from_slice(&m.to_le_bytes());
    }
}

pub fn encode_cube(cube: &TsiCube, labels: Option<&ChangeLabels>) -> Result<Vec<u8>> {
    let dims = [cube.t_len(), cube.bands(), cube.height(), cube.width()];
    if let Some(l) = labels {
        if l.height != dims[2] || l.width != dims[3] || l.t_len != dims[0] {
            return Err(CaimError::Format("labels do not match the cube".into()));
        }
    }
    let mut buf = Vec::with_capacity(25 + cube.images().numel() * 4 + dims[2] * dims[3] * 3);
    header(&mut buf, dims, labels.is_some());
    for v in cube.images().data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(l) = labels {
        label_payload(&mut buf, l);
    }
    Ok(buf)
}

/// Raw container contents; `cube` is `None` for image-less prediction dumps.
pub struct Container {
    pub cube: Option<TsiCube>,
    pub labels: Option<ChangeLabels>,
    pub dims: [usize; 4],
}

pub fn decode_container(bytes: &[u8]) -> Result<Container> {
    let mut cur = ByteCursor { bytes, pos: 0 };
    if cur.take(4)? != CUBE_MAGIC {
        return Err(CaimError::Format("bad cube magic".into()));
    }
    let version = cur.u32()?;
    if version != CUBE_VERSION {
        return Err(CaimError::Format(format!("unsupported cube version {version}")));
    }
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        *d = cur.u32()? as usize;
    }
    let flag = cur.take(1)?[0];
    let [t, c, h, w] = dims;
    let has_labels = flag & FLAG_LABELS != 0;
    let image_len = t.checked_mul(c).and_then(|v| v.checked_mul(h)).and_then(|v| v.checked_mul(w));
    let label_len = if has_labels { h.checked_mul(w).and_then(|v| v.checked_mul(3)) } else { Some(0) };
    let expected = image_len
        .and_then(|n| n.checked_mul(4))
        .zip(label_len)
        .and_then(|(a, b)| a.checked_add(b))
        .and_then(|v| v.checked_add(cur.pos))
        .ok_or_else(|| CaimError::Format("header dimensions overflow".into()))?;
    if expected != bytes.len() {
        return Err(CaimError::Format(format!("header declares {} bytes, file has {}", expected, bytes.len())));
    }
    let n = image_len.unwrap();
    let payload = cur.take(n * 4)?;
    let cube = if c == 0 {
        None
    } else {
        let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        Some(TsiCube::new(Tensor::from_vec(&[t, c, h, w], data)?).map_err(|e| CaimError::Format(e.to_string()))?)
    };
    let labels = if has_labels {
        let area = cur.take(h * w)?.to_vec();
        let moment = cur.take(h * w * 2)?.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
        Some(ChangeLabels::new(t, h, w, area, moment).map_err(|e| CaimError::Format(e.to_string()))?)
    } else {
        None
    };
    Ok(Container { cube, labels, dims })
}

pub fn save_cube(path: &Path, cube: &TsiCube, labels: Option<&ChangeLabels>) -> Result<()> {
    std::fs::write(path, encode_cube(cube, labels)?)?;
    Ok(())
}

pub fn load_cube(path: &Path) -> Result<(TsiCube, Option<ChangeLabels>)> {
    let c = decode_container(&std::fs::read(path)?)?;
    let cube = c.cube.ok_or_else(|| CaimError::Format(format!("{} holds no images", path.display())))?;
    Ok((cube, c.labels))
}

/// Argmax maps written by `infer`: moment (u16) and area (u8) grids.
pub fn encode_prediction_maps(maps: &ChangeLabels) -> Vec<u8> {
    let mut buf = Vec::with_capacity(25 + maps.area.len() * 3);
    header(&mut buf, [maps.t_len, 0, maps.height, maps.width], true);
    label_payload(&mut buf, maps);
    buf
}

pub fn save_prediction_maps(path: &Path, maps: &ChangeLabels) -> Result<()> {
    std::fs::write(path, encode_prediction_maps(maps))?;
    Ok(())
}

/// Label section of any container (cube with labels or prediction dump).
pub fn load_label_maps(path: &Path) -> Result<ChangeLabels> {
    decode_container(&std::fs::read(path)?)?
        .labels
        .ok_or_else(|| CaimError::Format(format!("{} holds no label maps", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic_scene, SceneConfig};

    fn scene() -> (TsiCube, ChangeLabels) {
        let cfg = SceneConfig { height: 16, width: 12, t_len: 4, bands: 3, seed: 3, min_size: 4, max_size: 8, ..Default::default() };
        let (c, _, l) = generate_synthetic_scene(&cfg).unwrap();
        (c, l)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (cube, labels) = scene();
        let bytes = encode_cube(&cube, Some(&labels)).unwrap();
        assert_eq!(&bytes[..4], b"CAIM");
        assert_eq!(bytes.len(), 25 + 4 * 3 * 16 * 12 * 4 + 16 * 12 * 3);
        let back = decode_container(&bytes).unwrap();
        assert_eq!(back.cube.unwrap(), cube);
        assert_eq!(back.labels.unwrap(), labels);
        let no_labels = decode_container(&encode_cube(&cube, None).unwrap()).unwrap();
        assert!(no_labels.labels.is_none());
    }

    #[test]
    fn truncated_and_mismatched_files_rejected() {
        let (cube, labels) = scene();
        let bytes = encode_cube(&cube, Some(&labels)).unwrap();
        for cut in [3, 10, 25, bytes.len() - 1] {
            assert!(matches!(decode_container(&bytes[..cut]), Err(CaimError::Format(_))));
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(decode_container(&longer), Err(CaimError::Format(_))));
        let mut wrong_dims = bytes.clone();
        wrong_dims[12..16].copy_from_slice(&5u32.to_le_bytes()); // C = 5
        assert!(matches!(decode_container(&wrong_dims), Err(CaimError::Format(_))));
        let mut bad_magic = bytes;
        bad_magic[0] = b'X';
        assert!(matches!(decode_container(&bad_magic), Err(CaimError::Format(_))));
    }

    #[test]
    fn prediction_maps_round_trip() {
        let (_, labels) = scene();
        let back = decode_container(&encode_prediction_maps(&labels)).unwrap();
        assert!(back.cube.is_none());
        assert_eq!(back.labels.unwrap(), labels);
    }
}
