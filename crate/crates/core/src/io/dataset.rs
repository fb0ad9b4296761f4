//! On-disk sequences.
//!
//! A dataset directory holds one subdirectory per sequence:
//!
//! ```text
//! seq_0000/
//!   manifest.txt         `frames N`, `height H`, `width W`
//!   frame_000.ppm        RGB frame
//!   depth_000.pfm        ground-truth depth in metres
//!   flow_001.flo         ground-truth backward flow t -> t-1 (t >= 1)
//!   input_flow_001.flo   flow given to the model
//!   mask_001.pfm         backward flow validity
//! ```
//!
//! Frames go through 8-bit quantisation on save.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::synth::SequenceSample;
use crate::tensor::{Scalar, Shape, Tensor};

use super::flo::{read_flo, write_flo};
use super::pfm::{read_pfm, write_pfm};
use super::ppm::{read_ppm, write_ppm};
use super::report::{read_report, write_report};

const MANIFEST: &str = "manifest.txt";

pub fn sequence_dir(root: impl AsRef<Path>, index: usize) -> PathBuf {
    root.as_ref().join(format!("seq_{index:04}"))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn save_sequence<T: Scalar>(dir: impl AsRef<Path>, sample: &SequenceSample<T>) -> Result<()> {
    let dir = dir.as_ref();
    sample.validate()?;
    create_dir(dir)?;
    let s = sample.frames[0].shape();
    write_report(
        dir.join(MANIFEST),
        &[
            ("frames", sample.len().to_string()),
            ("height", s.h.to_string()),
            ("width", s.w.to_string()),
        ],
    )?;
    for t in 0..sample.len() {
        write_ppm(dir.join(format!("frame_{t:03}.ppm")), &sample.frames[t].cast())?;
        write_pfm(dir.join(format!("depth_{t:03}.pfm")), &sample.depths[t].cast())?;
        if t > 0 {
            write_flo(dir.join(format!("flow_{t:03}.flo")), &sample.flows[t].cast())?;
            write_flo(dir.join(format!("input_flow_{t:03}.flo")), &sample.input_flows[t].cast())?;
            write_pfm(dir.join(format!("mask_{t:03}.pfm")), &sample.masks[t].cast())?;
        }
    }
    Ok(())
}

fn manifest_value(entries: &[(String, String)], key: &str, dir: &Path) -> Result<usize> {
    let bad = || Error::Format {
        format: "manifest",
        detail: format!("{}: missing or invalid `{key}`", dir.display()),
    };
    entries
        .iter()
        .find(|(k, _)| k == key)
        .ok_or_else(bad)?
        .1
        .parse()
        .map_err(|_| bad())
}

pub fn load_sequence<T: Scalar>(dir: impl AsRef<Path>) -> Result<SequenceSample<T>> {
    let dir = dir.as_ref();
    let manifest = read_report(dir.join(MANIFEST))?;
    let n = manifest_value(&manifest, "frames", dir)?;
    let h = manifest_value(&manifest, "height", dir)?;
    let w = manifest_value(&manifest, "width", dir)?;
    if n == 0 {
        return Err(Error::Format {
            format: "manifest",
            detail: format!("{}: empty sequence", dir.display()),
        });
    }
    let zero_flow = Tensor::zeros(Shape::new(1, 2, h, w));
    let mut sample = SequenceSample {
        frames: Vec::with_capacity(n),
        depths: Vec::with_capacity(n),
        flows: vec![zero_flow.clone()],
        input_flows: vec![zero_flow],
        masks: vec![Tensor::zeros(Shape::new(1, 1, h, w))],
    };
    for t in 0..n {
        sample.frames.push(read_ppm(dir.join(format!("frame_{t:03}.ppm")))?.cast());
        sample.depths.push(read_pfm(dir.join(format!("depth_{t:03}.pfm")))?.cast());
        if t > 0 {
            sample.flows.push(read_flo(dir.join(format!("flow_{t:03}.flo")))?.cast());
            sample.input_flows.push(read_flo(dir.join(format!("input_flow_{t:03}.flo")))?.cast());
            sample.masks.push(read_pfm(dir.join(format!("mask_{t:03}.pfm")))?.cast());
        }
    }
    if sample.frames[0].shape() != Shape::new(1, 3, h, w) {
        return Err(Error::Format {
            format: "manifest",
            detail: format!("{}: frames do not match the declared {h}x{w}", dir.display()),
        });
    }
    sample.validate()?;
    Ok(sample)
}

/// Sequence directories under `root` in name order.
pub fn list_sequences(root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let root = root.as_ref();
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.join(MANIFEST).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

pub fn load_dataset<T: Scalar>(root: impl AsRef<Path>) -> Result<Vec<SequenceSample<T>>> {
    list_sequences(root)?.iter().map(load_sequence).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::ppm::to_byte;
    use crate::synth::{generate_sequence, SceneConfig};

    #[test]
    fn sequence_round_trip() {
        let cfg = SceneConfig {
            height: 16,
            width: 24,
            length: 3,
            sprite_height: (4, 8),
            sprite_width: (4, 8),
            ..SceneConfig::default()
        };
        let sample = generate_sequence::<f32>(&cfg, 5).unwrap();
        let root = tempfile::tempdir().unwrap();
        save_sequence(sequence_dir(root.path(), 1), &sample).unwrap();
        save_sequence(sequence_dir(root.path(), 0), &sample).unwrap();
        let dirs = list_sequences(root.path()).unwrap();
        assert_eq!(dirs.len(), 2);
        assert!(dirs[0].ends_with("seq_0000"));
        let back: SequenceSample<f32> = load_sequence(&dirs[0]).unwrap();
        assert_eq!(back.depths, sample.depths);
        assert_eq!(back.flows, sample.flows);
        assert_eq!(back.input_flows, sample.input_flows);
        assert_eq!(back.masks, sample.masks);
        for (a, b) in back.frames.iter().zip(&sample.frames) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, to_byte(*y) as f32 / 255.0);
            }
        }
    }

    #[test]
    fn missing_files_are_reported() {
        let root = tempfile::tempdir().unwrap();
        assert!(matches!(load_sequence::<f32>(root.path()), Err(Error::Io { .. })));
    }
}
