//! On-disk sequence container: one directory per sequence holding
//! `meta.json` plus raw little-endian f32 arrays (`frames.f32`,
//! `depth.f32`, `poses.f32`). Round trips are bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geom::{CameraPose, Intrinsics, Quat, Vec3};

use super::{DomainTag, FrameSequence};

pub const SCHEMA_VERSION: u32 = 1;
const CONVENTION: &str = "world_to_camera, z_depth";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub schema_version: u32,
    pub seq_id: String,
    pub domain_tag: DomainTag,
    pub s: usize,
    pub h: usize,
    pub w: usize,
    pub dtype: String,
    pub convention: String,
    pub intrinsics: Intrinsics,
    pub has_depth: bool,
    pub has_poses: bool,
}

/// Records which array files were opened, and under which phase label.
/// Used to prove that training paths never touch label arrays.
pub mod access_log {
    use std::path::{Path, PathBuf};
    use std::sync::Mutex;

    #[derive(Default)]
    struct LogState {
        enabled: bool,
        phase: String,
        entries: Vec<(PathBuf, String)>,
    }

    static LOG: Mutex<Option<LogState>> = Mutex::new(None);

    /// Starts recording; clears any previous entries.
    pub fn enable() {
        let mut guard = LOG.lock().unwrap();
        *guard = Some(LogState {
            enabled: true,
            phase: String::new(),
            entries: Vec::new(),
        });
    }

    /// Stops recording and returns the `(path, phase)` entries.
    pub fn disable_and_take() -> Vec<(PathBuf, String)> {
        let mut guard = LOG.lock().unwrap();
        guard.take().map(|s| s.entries).unwrap_or_default()
    }

    /// Labels subsequent reads (for example "train" or "eval").
    pub fn set_phase(phase: &str) {
        if let Some(state) = LOG.lock().unwrap().as_mut() {
            state.phase = phase.to_string();
        }
    }

    pub(crate) fn record(path: &Path) {
        if let Some(state) = LOG.lock().unwrap().as_mut() {
            if state.enabled {
                state.entries.push((path.to_path_buf(), state.phase.clone()));
            }
        }
    }
}

/// Writes the sequence container into `dir`, creating it if needed.
pub fn write_sequence(seq: &FrameSequence, dir: &Path) -> Result<()> {
    seq.validate()?;
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let meta = SequenceMeta {
        schema_version: SCHEMA_VERSION,
        seq_id: seq.seq_id.clone(),
        domain_tag: seq.domain_tag,
        s: seq.num_frames,
        h: seq.height(),
        w: seq.width(),
        dtype: "f32".into(),
        convention: CONVENTION.into(),
        intrinsics: seq.intrinsics,
        has_depth: seq.gt_depth.is_some(),
        has_poses: seq.gt_poses.is_some(),
    };
    let meta_path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| CoreError::Json {
            path: meta_path.clone(),
            source: e,
        })?;
    fs::write(&meta_path, json).map_err(|e| CoreError::io(&meta_path, e))?;

    write_f32(&dir.join("frames.f32"), &seq.frames)?;
    if let Some(d) = &seq.gt_depth {
        write_f32(&dir.join("depth.f32"), d)?;
    }
    if let Some(p) = &seq.gt_poses {
        let flat: Vec<f32> = p
            .iter()
            .flat_map(|pose| pose.to_array().into_iter().map(|v| v as f32))
            .collect();
        write_f32(&dir.join("poses.f32"), &flat)?;
    }
    Ok(())
}

/// Reads a full sequence container, including label arrays when present.
pub fn read_sequence(dir: &Path) -> Result<FrameSequence> {
    read_sequence_impl(dir, true)
}

/// Reads only `meta.json` and `frames.f32`; label arrays are never opened.
/// This is the loader used by training code paths.
pub fn read_sequence_frames_only(dir: &Path) -> Result<FrameSequence> {
    read_sequence_impl(dir, false)
}

fn read_sequence_impl(dir: &Path, load_labels: bool) -> Result<FrameSequence> {
    let meta_path = dir.join("meta.json");
    let meta_raw = fs::read_to_string(&meta_path).map_err(|e| CoreError::io(&meta_path, e))?;
    let meta: SequenceMeta = serde_json::from_str(&meta_raw).map_err(|e| CoreError::Json {
        path: meta_path.clone(),
        source: e,
    })?;
    if meta.schema_version != SCHEMA_VERSION {
        return Err(CoreError::SchemaVersion {
            path: meta_path,
            found: meta.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    if meta.dtype != "f32" {
        return Err(CoreError::corrupt(
            &meta_path,
            format!("unsupported dtype {:?}", meta.dtype),
        ));
    }
    if meta.intrinsics.width != meta.w || meta.intrinsics.height != meta.h {
        return Err(CoreError::corrupt(
            &meta_path,
            "intrinsics disagree with declared image size",
        ));
    }
    let px = meta.h * meta.w;
    let frames = read_f32(&dir.join("frames.f32"), meta.s * px * 3)?;
    let gt_depth = if load_labels && meta.has_depth {
        Some(read_f32(&dir.join("depth.f32"), meta.s * px)?)
    } else {
        None
    };
    let gt_poses = if load_labels && meta.has_poses {
        let flat = read_f32(&dir.join("poses.f32"), meta.s * 7)?;
        Some(
            flat.chunks(7)
                .map(|row| {
                    CameraPose::new(
                        Quat::new(row[0] as f64, row[1] as f64, row[2] as f64, row[3] as f64),
                        Vec3::new(row[4] as f64, row[5] as f64, row[6] as f64),
                    )
                })
                .collect(),
        )
    } else {
        None
    };
    FrameSequence::new(
        frames,
        gt_depth,
        gt_poses,
        meta.intrinsics,
        meta.seq_id,
        meta.domain_tag,
        meta.s,
    )
}

fn write_f32(path: &PathBuf, data: &[f32]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&bytes).map_err(|e| CoreError::io(path, e))
}

fn read_f32(path: &PathBuf, expected_len: usize) -> Result<Vec<f32>> {
    access_log::record(path);
    let mut file = fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| CoreError::io(path, e))?;
    if bytes.len() != expected_len * 4 {
        return Err(CoreError::corrupt(
            path,
            format!(
                "expected {} bytes, found {} (truncated or wrong shape)",
                expected_len * 4,
                bytes.len()
            ),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, render_sequence, GenConfig};

    #[test]
    fn round_trip_is_bit_exact() {
        let scene = generate_scene(&GenConfig::source(), 4).unwrap();
        let seq = render_sequence(&scene, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_sequence(&seq, dir.path()).unwrap();
        let back = read_sequence(dir.path()).unwrap();
        assert_eq!(seq.frames, back.frames);
        assert_eq!(seq.gt_depth, back.gt_depth);
        assert_eq!(seq.gt_poses, back.gt_poses);
        assert_eq!(seq.seq_id, back.seq_id);
        // Writing the read-back sequence again produces identical bytes.
        let dir2 = tempfile::tempdir().unwrap();
        write_sequence(&back, dir2.path()).unwrap();
        for name in ["meta.json", "frames.f32", "depth.f32", "poses.f32"] {
            let a = std::fs::read(dir.path().join(name)).unwrap();
            let b = std::fs::read(dir2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
    }

    #[test]
    fn truncated_array_reports_corrupt_file() {
        let scene = generate_scene(&GenConfig::source(), 5).unwrap();
        let seq = render_sequence(&scene, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_sequence(&seq, dir.path()).unwrap();
        let frames_path = dir.path().join("frames.f32");
        let bytes = std::fs::read(&frames_path).unwrap();
        std::fs::write(&frames_path, &bytes[..bytes.len() - 7]).unwrap();
        match read_sequence(dir.path()) {
            Err(CoreError::Corrupt { .. }) => {}
            other => panic!("expected corrupt-file error, got {other:?}"),
        }
    }

    #[test]
    fn absent_optional_arrays_stay_unset() {
        let scene = generate_scene(&GenConfig::source(), 6).unwrap();
        let seq = render_sequence(&scene, 2).unwrap().without_labels();
        let dir = tempfile::tempdir().unwrap();
        write_sequence(&seq, dir.path()).unwrap();
        let back = read_sequence(dir.path()).unwrap();
        assert!(back.gt_depth.is_none());
        assert!(back.gt_poses.is_none());
        assert!(!dir.path().join("depth.f32").exists());
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let scene = generate_scene(&GenConfig::source(), 7).unwrap();
        let seq = render_sequence(&scene, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_sequence(&seq, dir.path()).unwrap();
        let meta_path = dir.path().join("meta.json");
        let text = std::fs::read_to_string(&meta_path)
            .unwrap()
            .replace("\"schema_version\": 1", "\"schema_version\": 99");
        std::fs::write(&meta_path, text).unwrap();
        match read_sequence(dir.path()) {
            Err(CoreError::SchemaVersion { found: 99, .. }) => {}
            other => panic!("expected schema-version error, got {other:?}"),
        }
    }

    #[test]
    fn frames_only_reader_never_touches_labels() {
        let scene = generate_scene(&GenConfig::source(), 8).unwrap();
        let seq = render_sequence(&scene, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_sequence(&seq, dir.path()).unwrap();
        access_log::enable();
        access_log::set_phase("train");
        let back = read_sequence_frames_only(dir.path()).unwrap();
        let entries = access_log::disable_and_take();
        assert!(back.gt_depth.is_none() && back.gt_poses.is_none());
        assert!(entries.iter().all(|(p, _)| {
            let name = p.file_name().unwrap().to_string_lossy();
            name != "depth.f32" && name != "poses.f32"
        }));
        assert!(entries.iter().any(|(p, phase)| {
            p.file_name().unwrap() == "frames.f32" && phase == "train"
        }));
    }
}
