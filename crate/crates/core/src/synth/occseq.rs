//! OCCSEQ binary sequence format.
//!
//! Layout (little-endian):
//! - magic `OCCSEQ01`
//! - header: H, W, L, num_categories, T (u32 each), voxel_size f32,
//!   frame_hz f32, box_count u32
//! - T dense frames of u8 labels, x-major then y then z
//! - T actions as 2 x f32
//! - per box: category u8, then T poses of 5 x f32 (x, y, ex, ey, heading)

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::occ::{Action, BoxPose, GridDims, ObstacleBox, OccGrid, SceneSequence};

const MAGIC: &[u8; 8] = b"OCCSEQ01";

pub fn write_occseq(seq: &SceneSequence, path: &Path) -> Result<()> {
    if seq.grids.is_empty() {
        return Err(Error::data("cannot write empty sequence"));
    }
    crate::occ::validate_sequence(seq).map_err(|issue| Error::data(issue.to_string()))?;
    let dims = seq.grids[0].dims();
    let g0 = &seq.grids[0];
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    for v in [
        dims.h as u32,
        dims.w as u32,
        dims.l as u32,
        g0.num_categories as u32,
        seq.grids.len() as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&g0.voxel_size.to_le_bytes())?;
    w.write_all(&seq.frame_hz.to_le_bytes())?;
    w.write_all(&(seq.boxes.len() as u32).to_le_bytes())?;
    for grid in &seq.grids {
        w.write_all(grid.labels())?;
    }
    for a in &seq.actions {
        w.write_all(&a.dx.to_le_bytes())?;
        w.write_all(&a.dy.to_le_bytes())?;
    }
    for b in &seq.boxes {
        w.write_all(&[b.category])?;
        for p in &b.poses {
            for v in [p.x, p.y, p.ex, p.ey, p.heading] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_occseq(path: &Path) -> Result<SceneSequence> {
    let mut r = SectionReader {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
        section: "magic",
    };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad OCCSEQ magic/version".into(),
        });
    }
    r.section = "header";
    let h = r.read_u32()? as usize;
    let w = r.read_u32()? as usize;
    let l = r.read_u32()? as usize;
    let num_categories = r.read_u32()? as usize;
    let t = r.read_u32()? as usize;
    let voxel_size = r.read_f32()?;
    let frame_hz = r.read_f32()?;
    let box_count = r.read_u32()? as usize;
    let dims = GridDims { h, w, l };

    r.section = "frames";
    let mut grids = Vec::with_capacity(t);
    for _ in 0..t {
        let mut labels = vec![0u8; dims.voxels()];
        r.read_exact(&mut labels)?;
        grids.push(OccGrid::new(dims, voxel_size, num_categories, labels)?);
    }

    r.section = "actions";
    let mut actions = Vec::with_capacity(t);
    for _ in 0..t {
        actions.push(Action::new(r.read_f32()?, r.read_f32()?));
    }

    r.section = "boxes";
    let mut boxes = Vec::with_capacity(box_count);
    for _ in 0..box_count {
        let mut cat = [0u8; 1];
        r.read_exact(&mut cat)?;
        let mut poses = Vec::with_capacity(t);
        for _ in 0..t {
            poses.push(BoxPose {
                x: r.read_f32()?,
                y: r.read_f32()?,
                ex: r.read_f32()?,
                ey: r.read_f32()?,
                heading: r.read_f32()?,
            });
        }
        boxes.push(ObstacleBox {
            category: cat[0],
            poses,
        });
    }

    let seq = SceneSequence {
        grids,
        actions,
        boxes,
        frame_hz,
    };
    crate::occ::validate_sequence(&seq).map_err(|issue| Error::data(issue.to_string()))?;
    Ok(seq)
}

/// Exact file size for a sequence, from the format definition.
pub fn occseq_file_size(dims: GridDims, t: usize, box_count: usize) -> u64 {
    let header = 8 + 5 * 4 + 2 * 4 + 4;
    let frames = t * dims.voxels();
    let actions = t * 8;
    let boxes = box_count * (1 + t * 5 * 4);
    (header + frames + actions + boxes) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::occ::validate_sequence;
    use crate::synth::scene::{generate_scene, SceneConfig};

    fn sample_seq() -> SceneSequence {
        generate_scene(&SceneConfig {
            seed: 4,
            frames: 12,
            ..SceneConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.occseq");
        let seq = sample_seq();
        write_occseq(&seq, &path).unwrap();
        let back = read_occseq(&path).unwrap();
        assert_eq!(seq, back);
        assert!(validate_sequence(&back).is_ok());
    }

    #[test]
    fn file_size_matches_format_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.occseq");
        let seq = sample_seq();
        write_occseq(&seq, &path).unwrap();
        let expect = occseq_file_size(seq.grids[0].dims(), seq.len(), seq.boxes.len());
        assert_eq!(std::fs::metadata(&path).unwrap().len(), expect);
        // 12-frame (16,64,64) frames section alone: 12 * 16 * 64 * 64 bytes
        assert_eq!(seq.len() * seq.grids[0].dims().voxels(), 12 * 16 * 64 * 64);
    }

    #[test]
    fn truncation_names_missing_section() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.occseq");
        let seq = sample_seq();
        write_occseq(&seq, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // cut inside the actions section
        let frames_end = 8 + 32 + seq.len() * seq.grids[0].dims().voxels();
        std::fs::write(&path, &bytes[..frames_end + 5]).unwrap();
        match read_occseq(&path) {
            Err(Error::Format { msg, .. }) => assert!(msg.contains("actions"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
        // bad magic
        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        std::fs::write(&path, &corrupt).unwrap();
        assert!(matches!(read_occseq(&path), Err(Error::Format { .. })));
    }
}

struct SectionReader<R> {
    inner: R,
    offset: u64,
    section: &'static str,
}

impl<R: Read> SectionReader<R> {
    fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|_| Error::Format {
            offset: self.offset,
            msg: format!("truncated in {} section", self.section),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_f32(&mut self) -> Result<f32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(f32::from_le_bytes(b))
    }
}
