//! Binary container of per-image object proposals (boxes plus feature vectors).
//!
//! Layout, little-endian: `IRLCFEAT`, version `u32`, then per image the id length
//! (`u32`) and bytes, `N: u32`, `d_v: u32`, width and height (`f32`), `N×4` box
//! coordinates (`f32`, x1 y1 x2 y2), `N×d_v` features (`f32`). A CRC32 of all
//! preceding bytes closes the file.

use std::fs;
use std::path::Path;

use super::scene::SceneRecord;
use crate::error::{format_err, Error, Result};
use crate::geometry::BBox;
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 8] = b"IRLCFEAT";
pub const FEATURE_VERSION: u32 = 1;
const WHAT: &str = "feature container";

/// Serializes scenes. Labels and ground truth are not part of the container.
pub fn encode_features(scenes: &[SceneRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    for s in scenes {
        s.validate()?;
        let id = s.image_id.as_bytes();
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id);
        out.extend_from_slice(&(s.num_objects() as u32).to_le_bytes());
        out.extend_from_slice(&(s.feature_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(s.width as f32).to_le_bytes());
        out.extend_from_slice(&(s.height as f32).to_le_bytes());
        for b in &s.boxes {
            for v in b.to_array() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        for &v in s.features.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            format_err(WHAT, format!("truncated at byte {} (need {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as f64)
    }
}

/// Parses a whole container, checking magic, version and checksum.
pub fn decode_features(bytes: &[u8]) -> Result<Vec<SceneRecord>> {
    if bytes.len() < FEATURE_MAGIC.len() + 8 {
        return Err(format_err(WHAT, format!("file of {} bytes is too short", bytes.len())));
    }
    if &bytes[..8] != FEATURE_MAGIC {
        return Err(format_err(WHAT, "bad magic bytes"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(format_err(WHAT, format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    let mut c = Cursor { buf: body, pos: 8 };
    let version = c.u32()?;
    if version != FEATURE_VERSION {
        return Err(format_err(WHAT, format!("unsupported version {version}")));
    }
    let mut scenes = Vec::new();
    while c.pos < body.len() {
        let id_len = c.u32()? as usize;
        let id = String::from_utf8(c.take(id_len)?.to_vec()).map_err(|_| format_err(WHAT, "image id is not UTF-8"))?;
        let n = c.u32()? as usize;
        let d = c.u32()? as usize;
        let width = c.f32()?;
        let height = c.f32()?;
        let need = n
            .checked_mul(4 + d)
            .and_then(|k| k.checked_mul(4))
            .ok_or_else(|| format_err(WHAT, format!("image {id}: N={n}, d_v={d} overflow")))?;
        if need > body.len() - c.pos {
            return Err(format_err(WHAT, format!("image {id}: N={n}, d_v={d} exceeds remaining bytes")));
        }
        let mut boxes = Vec::with_capacity(n);
        for _ in 0..n {
            let (x1, y1, x2, y2) = (c.f32()?, c.f32()?, c.f32()?, c.f32()?);
            boxes.push(BBox::new(x1, y1, x2, y2).map_err(|e| format_err(WHAT, format!("image {id}: {e}")))?);
        }
        let mut feats = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            feats.push(c.f32()?);
        }
        let features = Tensor::new(vec![n, d], feats)?;
        scenes.push(
            SceneRecord::new(id.clone(), width, height, boxes, features)
                .map_err(|e| format_err(WHAT, format!("image {id}: {e}")))?,
        );
    }
    Ok(scenes)
}

pub fn write_features(path: &Path, scenes: &[SceneRecord]) -> Result<()> {
    fs::write(path, encode_features(scenes)?)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Vec<SceneRecord>> {
    decode_features(&fs::read(path)?)
}

/// Reads the scene of one image from a container file.
pub fn load_features(path: &Path, image_id: &str) -> Result<SceneRecord> {
    read_features(path)?
        .into_iter()
        .find(|s| s.image_id == image_id)
        .ok_or_else(|| Error::MissingKey(format!("image {image_id} not in {}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(id: &str, n: usize, d: usize) -> SceneRecord {
        let boxes = (0..n).map(|i| BBox::new(0.1 * i as f64, 0.0, 0.1 * i as f64 + 0.25, 0.5).unwrap()).collect();
        let feats = (0..n * d).map(|k| (k as f32 * 0.37).sin() as f64).collect();
        SceneRecord::new(id, 1.0, 1.0, boxes, Tensor::new(vec![n, d], feats).unwrap()).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let scenes = vec![scene("a", 3, 5), scene("b", 0, 5), scene("ccc", 1, 2)];
        let bytes = encode_features(&scenes).unwrap();
        let back = decode_features(&bytes).unwrap();
        // Values chosen as f32, so nothing is lost.
        for (x, y) in scenes.iter().zip(&back) {
            assert_eq!(x.image_id, y.image_id);
            assert_eq!(x.boxes.iter().map(|b| b.to_array().map(|v| v as f32)).collect::<Vec<_>>(),
                       y.boxes.iter().map(|b| b.to_array().map(|v| v as f32)).collect::<Vec<_>>());
            assert_eq!(x.features, y.features);
        }
        assert_eq!(encode_features(&back).unwrap(), bytes);
    }

    #[test]
    fn empty_scene_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        write_features(&p, &[scene("empty", 0, 8)]).unwrap();
        let s = load_features(&p, "empty").unwrap();
        assert_eq!(s.num_objects(), 0);
        assert_eq!(s.feature_dim(), 8);
        assert!(matches!(load_features(&p, "other"), Err(Error::MissingKey(_))));
    }

    #[test]
    fn truncation_and_corruption_are_errors() {
        let bytes = encode_features(&[scene("a", 2, 3)]).unwrap();
        for cut in [0, 5, 12, bytes.len() - 1] {
            assert!(decode_features(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(decode_features(&bad).unwrap_err().to_string().contains("checksum"));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut bytes = encode_features(&[scene("a", 2, 3)]).unwrap();
        bytes.truncate(bytes.len() - 4);
        // Claim N=9.
        let n_at = 8 + 4 + 4 + 1;
        bytes[n_at..n_at + 4].copy_from_slice(&9u32.to_le_bytes());
        let crc = crc32fast::hash(&bytes);
        bytes.extend_from_slice(&crc.to_le_bytes());
        assert!(decode_features(&bytes).unwrap_err().to_string().contains("exceeds"));
    }
}
