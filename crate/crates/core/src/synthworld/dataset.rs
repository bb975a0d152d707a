//! On-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.json                  format tag, world config, seeds, episode list
//! <dir>/episode_00000.json             states, actions, frame blob headers
//! <dir>/episode_00000_global.f32       raw little-endian f32, shape [T, H, W, 3]
//! <dir>/episode_00000_wrist.f32
//! ```

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{render_view, sample_trajectory, ActionCmd, Frame, Trajectory, View, WorldConfig, WorldState, CHANNELS};
use crate::error::{AlamError, Result};
use crate::rng::{derive_indexed, rng_from};

pub const DATASET_FORMAT: &str = "alam-synthworld-v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: WorldConfig,
    pub episode_len: usize,
    pub seeds: Vec<u64>,
    pub episodes: Vec<Trajectory>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    episode_count: usize,
    episode_len: usize,
    world: WorldConfig,
    seeds: Vec<u64>,
    episodes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct BlobHeader {
    file: String,
    dtype: String,
    /// `[T, H, W, C]`
    shape: [usize; 4],
}

#[derive(Serialize, Deserialize)]
struct EpisodeRecord {
    id: usize,
    seed: u64,
    states: Vec<WorldState>,
    actions: Vec<ActionCmd>,
    frames: Vec<(View, BlobHeader)>,
}

impl Dataset {
    /// Generates `count` random-velocity episodes; episode `i` uses the seed
    /// `derive_indexed(seed, "episode", i)`.
    pub fn generate(config: &WorldConfig, count: usize, episode_len: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let seeds: Vec<u64> = (0..count as u64).map(|i| derive_indexed(seed, "episode", i)).collect();
        let episodes = seeds
            .iter()
            .map(|&s| sample_trajectory(s, episode_len, config))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config: config.clone(), episode_len, seeds, episodes })
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Deterministic train/test partition of episode ids; at least one test
    /// episode whenever `test_fraction > 0` and there are two or more episodes.
    pub fn split(&self, seed: u64, test_fraction: f64) -> EpisodeSplit {
        let n = self.len();
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(&mut rng_from(seed));
        let mut n_test = (n as f64 * test_fraction).round() as usize;
        if test_fraction > 0.0 && n >= 2 {
            n_test = n_test.clamp(1, n - 1);
        }
        let mut test: Vec<usize> = ids[..n_test].to_vec();
        let mut train: Vec<usize> = ids[n_test..].to_vec();
        test.sort_unstable();
        train.sort_unstable();
        EpisodeSplit { train, test }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let res = self.config.resolution;
        let mut names = Vec::with_capacity(self.len());
        for (id, (traj, &seed)) in self.episodes.iter().zip(&self.seeds).enumerate() {
            let stem = format!("episode_{id:05}");
            let mut frames = Vec::new();
            for view in View::ALL {
                let file = format!("{stem}_{}.f32", view.name());
                let mut bytes = Vec::with_capacity(traj.len() * res * res * CHANNELS * 4);
                for f in traj.frames(view) {
                    for p in &f.pixels {
                        bytes.extend_from_slice(&p.to_le_bytes());
                    }
                }
                fs::write(dir.join(&file), bytes)?;
                frames.push((
                    view,
                    BlobHeader { file, dtype: "f32le".into(), shape: [traj.len(), res, res, CHANNELS] },
                ));
            }
            let record = EpisodeRecord {
                id,
                seed,
                states: traj.states.clone(),
                actions: traj.actions.clone(),
                frames,
            };
            let name = format!("{stem}.json");
            fs::write(dir.join(&name), serde_json::to_vec_pretty(&record)?)?;
            names.push(name);
        }
        let manifest = Manifest {
            format: DATASET_FORMAT.into(),
            episode_count: self.len(),
            episode_len: self.episode_len,
            world: self.config.clone(),
            seeds: self.seeds.clone(),
            episodes: names,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        if manifest.format != DATASET_FORMAT {
            return Err(AlamError::invalid(format!("unknown dataset format {}", manifest.format)));
        }
        let mut episodes = Vec::with_capacity(manifest.episode_count);
        for name in &manifest.episodes {
            let record: EpisodeRecord = serde_json::from_slice(&fs::read(dir.join(name))?)?;
            let mut frames: [Vec<Frame>; 2] = [Vec::new(), Vec::new()];
            for (view, header) in &record.frames {
                if header.dtype != "f32le" {
                    return Err(AlamError::invalid(format!("{}: unsupported dtype {}", header.file, header.dtype)));
                }
                let [t, h, w, c] = header.shape;
                let bytes = fs::read(dir.join(&header.file))?;
                if bytes.len() != t * h * w * c * 4 || c != CHANNELS {
                    return Err(AlamError::invalid(format!("{}: size does not match shape header", header.file)));
                }
                let values: Vec<f32> =
                    bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
                let per = h * w * c;
                frames[view.index()] = values
                    .chunks_exact(per)
                    .map(|px| Frame { height: h, width: w, view: *view, pixels: px.to_vec() })
                    .collect();
            }
            let traj = Trajectory { states: record.states, frames, actions: record.actions };
            if traj.frames.iter().any(|f| f.len() != traj.len()) || traj.actions.len() + 1 != traj.len() {
                return Err(AlamError::invalid(format!("{name}: inconsistent episode lengths")));
            }
            episodes.push(traj);
        }
        Ok(Self { config: manifest.world, episode_len: manifest.episode_len, seeds: manifest.seeds, episodes })
    }

    /// Re-renders every frame from the stored states and checks it matches.
    pub fn verify_frames(&self) -> bool {
        self.episodes.iter().all(|traj| {
            View::ALL.iter().all(|&view| {
                traj.states
                    .iter()
                    .zip(traj.frames(view))
                    .all(|(s, f)| render_view(s, view, self.config.resolution, &self.config) == *f)
            })
        })
    }
}

pub fn frame_to_image(frame: &Frame) -> image::RgbImage {
    let mut img = image::RgbImage::new(frame.width as u32, frame.height as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        let p = &frame.pixels[i * CHANNELS..(i + 1) * CHANNELS];
        *px = image::Rgb([0, 1, 2].map(|c| (p[c].clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    img
}

/// Writes frames side by side as one PNG.
pub fn write_png_row(frames: &[&Frame], path: &Path) -> Result<()> {
    let Some(first) = frames.first() else {
        return Err(AlamError::invalid("no frames to export"));
    };
    let (h, w) = (first.height as u32, first.width as u32);
    let mut canvas = image::RgbImage::new(w * frames.len() as u32, h);
    for (k, f) in frames.iter().enumerate() {
        if !f.same_shape(first) {
            return Err(AlamError::invalid("frames in a PNG row must share a shape"));
        }
        image::imageops::replace(&mut canvas, &frame_to_image(f), (k as u32 * w) as i64, 0);
    }
    canvas.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_read_roundtrip() {
        let cfg = WorldConfig { resolution: 8, ..Default::default() };
        let ds = Dataset::generate(&cfg, 3, 6, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        let back = Dataset::read(dir.path()).unwrap();
        assert_eq!(ds, back);
        assert!(back.verify_frames());
    }

    #[test]
    fn corrupted_blob_rejected() {
        let cfg = WorldConfig { resolution: 8, ..Default::default() };
        let ds = Dataset::generate(&cfg, 1, 4, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        let blob = dir.path().join("episode_00000_wrist.f32");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
        assert!(Dataset::read(dir.path()).is_err());
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let cfg = WorldConfig { resolution: 4, ..Default::default() };
        let ds = Dataset::generate(&cfg, 40, 3, 2).unwrap();
        let s = ds.split(5, 0.05);
        assert_eq!(s, ds.split(5, 0.05));
        assert_eq!(s.test.len(), 2);
        assert_eq!(s.train.len() + s.test.len(), 40);
        assert!(s.test.iter().all(|t| !s.train.contains(t)));
    }

    #[test]
    fn png_export() {
        let cfg = WorldConfig { resolution: 8, ..Default::default() };
        let ds = Dataset::generate(&cfg, 1, 2, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("row.png");
        let f = ds.episodes[0].frames(View::Global);
        write_png_row(&[&f[0], &f[1]], &path).unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!((img.width(), img.height()), (16, 8));
    }
}
