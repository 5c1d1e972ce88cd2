//! Multi-camera video datasets: the on-disk loader and the synthetic scene
//! generator used as an end-to-end oracle.
//!
//! On disk a dataset is a directory holding `poses.json`, one
//! `cam_<id>/frame_%05d.png` sequence per camera and, optionally, a
//! `points3d.json` seed point cloud.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix4, Vector2, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussian::{Camera, GaussianPrimitive, GeometryError};
use crate::image::{Image, ImageError};
use crate::model::SeedPoint;
use crate::raster::{rasterize, RasterError, RenderSettings};
use crate::sh;

pub const POSES_FILE: &str = "poses.json";
pub const POINTS_FILE: &str = "points3d.json";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("no poses file at {0}")]
    MissingPoses(PathBuf),
    #[error("camera {camera}: rotation block is not a rigid rotation ({reason})")]
    NonRigidRotation { camera: String, reason: String },
    #[error("camera {camera} has {got} frames but {expected} were expected")]
    RaggedFrames { camera: String, expected: usize, got: usize },
    #[error("camera {camera}: {reason}")]
    InvalidCamera { camera: String, reason: String },
    #[error("no frames found")]
    NoFrames,
    #[error("unknown camera id {0:?}")]
    UnknownCamera(String),
    #[error("every camera is held out; at least one training camera is required")]
    NoTrainingCamera,
    #[error("duplicate camera id {0:?}")]
    DuplicateCamera(String),
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub id: String,
    pub camera: Camera,
}

#[derive(Clone, Debug, PartialEq)]
enum Frames {
    Memory(Vec<Vec<Image>>),
    Disk(Vec<Vec<PathBuf>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewDataset {
    pub cameras: Vec<CameraView>,
    pub timesteps: usize,
    pub held_out: Vec<String>,
    pub points: Option<Vec<SeedPoint>>,
    frames: Frames,
}

/// One image of the dataset: camera index and timestep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ViewRef {
    pub camera: usize,
    pub timestep: usize,
}

impl MultiViewDataset {
    /// In-memory dataset; `frames[camera][timestep]`.
    pub fn from_memory(
        cameras: Vec<CameraView>,
        frames: Vec<Vec<Image>>,
        held_out: Vec<String>,
        points: Option<Vec<SeedPoint>>,
    ) -> Result<Self, DatasetError> {
        let counts: Vec<usize> = frames.iter().map(|f| f.len()).collect();
        let ds = Self {
            timesteps: validate_counts(&cameras, &counts)?,
            cameras,
            held_out,
            points,
            frames: Frames::Memory(frames),
        };
        ds.validate_split()?;
        Ok(ds)
    }

    fn validate_split(&self) -> Result<(), DatasetError> {
        for id in &self.held_out {
            self.camera_index(id)?;
        }
        if self.cameras.iter().all(|c| self.held_out.contains(&c.id)) {
            return Err(DatasetError::NoTrainingCamera);
        }
        Ok(())
    }

    pub fn camera_index(&self, id: &str) -> Result<usize, DatasetError> {
        self.cameras
            .iter()
            .position(|c| c.id == id)
            .ok_or_else(|| DatasetError::UnknownCamera(id.to_string()))
    }

    pub fn frame(&self, view: ViewRef) -> Result<Image, DatasetError> {
        match &self.frames {
            Frames::Memory(f) => Ok(f[view.camera][view.timestep].clone()),
            Frames::Disk(p) => Ok(Image::load_png(&p[view.camera][view.timestep])?),
        }
    }

    /// Replaces the held-out camera list.
    pub fn with_held_out(mut self, held_out: Vec<String>) -> Result<Self, DatasetError> {
        self.held_out = held_out;
        self.validate_split()?;
        Ok(self)
    }

    /// Writes the loader layout under `root`.
    pub fn write(&self, root: &Path) -> Result<(), DatasetError> {
        fs::create_dir_all(root).map_err(io_err(root))?;
        let poses = PosesFile {
            cameras: self.cameras.iter().map(PoseRecord::from_view).collect(),
            held_out: self.held_out.clone(),
        };
        write_json(&root.join(POSES_FILE), &poses)?;
        for (ci, cam) in self.cameras.iter().enumerate() {
            let dir = root.join(format!("cam_{}", cam.id));
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            for t in 0..self.timesteps {
                let img = self.frame(ViewRef { camera: ci, timestep: t })?;
                img.save_png(&dir.join(frame_name(t)))?;
            }
        }
        if let Some(points) = &self.points {
            let file = PointsFile {
                points: points
                    .iter()
                    .map(|p| PointRecord {
                        position: [p.position.x, p.position.y, p.position.z],
                        color: p.color,
                    })
                    .collect(),
            };
            write_json(&root.join(POINTS_FILE), &file)?;
        }
        Ok(())
    }
}

pub fn frame_name(t: usize) -> String {
    format!("frame_{t:05}.png")
}

fn validate_counts(cameras: &[CameraView], counts: &[usize]) -> Result<usize, DatasetError> {
    for (i, c) in cameras.iter().enumerate() {
        if cameras[..i].iter().any(|o| o.id == c.id) {
            return Err(DatasetError::DuplicateCamera(c.id.clone()));
        }
    }
    let expected = counts.iter().copied().max().unwrap_or(0);
    if expected == 0 {
        return Err(DatasetError::NoFrames);
    }
    for (cam, &got) in cameras.iter().zip(counts) {
        if got != expected {
            return Err(DatasetError::RaggedFrames {
                camera: cam.id.clone(),
                expected,
                got,
            });
        }
    }
    Ok(expected)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoseRecord {
    pub id: String,
    /// Row-major 4×4.
    pub world_to_camera: [f64; 16],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl PoseRecord {
    fn from_view(v: &CameraView) -> Self {
        let m = &v.camera.world_to_camera;
        let mut w = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                w[4 * r + c] = m[(r, c)];
            }
        }
        Self {
            id: v.id.clone(),
            world_to_camera: w,
            fx: v.camera.focal.x,
            fy: v.camera.focal.y,
            cx: v.camera.principal_point.x,
            cy: v.camera.principal_point.y,
            width: v.camera.image_size.0,
            height: v.camera.image_size.1,
        }
    }

    fn to_view(&self) -> Result<CameraView, DatasetError> {
        let m = Matrix4::from_row_slice(&self.world_to_camera);
        let cam = Camera {
            world_to_camera: m,
            focal: Vector2::new(self.fx, self.fy),
            principal_point: Vector2::new(self.cx, self.cy),
            image_size: (self.width, self.height),
        };
        if let Err(GeometryError::InvalidCamera(reason)) = cam.validate() {
            let r = cam.rotation();
            let rigid = (r.transpose() * r - nalgebra::Matrix3::identity()).abs().max() <= 1e-6
                && (r.determinant() - 1.0).abs() <= 1e-6;
            return Err(if rigid {
                DatasetError::InvalidCamera {
                    camera: self.id.clone(),
                    reason,
                }
            } else {
                DatasetError::NonRigidRotation {
                    camera: self.id.clone(),
                    reason,
                }
            });
        }
        Ok(CameraView {
            id: self.id.clone(),
            camera: cam,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PosesFile {
    pub cameras: Vec<PoseRecord>,
    #[serde(default)]
    pub held_out: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PointRecord {
    position: [f64; 3],
    color: [f64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PointsFile {
    points: Vec<PointRecord>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DatasetError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| DatasetError::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Loads a dataset directory. Frames are read lazily.
pub fn load_multiview(root: &Path) -> Result<MultiViewDataset, DatasetError> {
    let poses_path = root.join(POSES_FILE);
    if !poses_path.is_file() {
        return Err(DatasetError::MissingPoses(poses_path));
    }
    let poses: PosesFile = read_json(&poses_path)?;
    let cameras = poses.cameras.iter().map(PoseRecord::to_view).collect::<Result<Vec<_>, _>>()?;
    let mut paths = Vec::with_capacity(cameras.len());
    for cam in &cameras {
        let dir = root.join(format!("cam_{}", cam.id));
        let mut seq = Vec::new();
        loop {
            let p = dir.join(frame_name(seq.len()));
            if !p.is_file() {
                break;
            }
            seq.push(p);
        }
        paths.push(seq);
    }
    let counts: Vec<usize> = paths.iter().map(|p| p.len()).collect();
    let points_path = root.join(POINTS_FILE);
    let points = if points_path.is_file() {
        let file: PointsFile = read_json(&points_path)?;
        Some(
            file.points
                .iter()
                .map(|p| SeedPoint {
                    position: Vector3::from(p.position),
                    color: p.color,
                })
                .collect(),
        )
    } else {
        None
    };
    let ds = MultiViewDataset {
        timesteps: validate_counts(&cameras, &counts)?,
        cameras,
        held_out: poses.held_out,
        points,
        frames: Frames::Disk(paths),
    };
    ds.validate_split()?;
    Ok(ds)
}

/// Train and eval views for the given held-out camera ids.
pub fn split_train_eval(
    dataset: &MultiViewDataset,
    held_out: &[String],
) -> Result<(Vec<ViewRef>, Vec<ViewRef>), DatasetError> {
    let mut held = Vec::with_capacity(held_out.len());
    for id in held_out {
        held.push(dataset.camera_index(id)?);
    }
    if held.is_empty() {
        log::warn!("no held-out camera: the eval split is empty");
    }
    if held.len() >= dataset.cameras.len() && (0..dataset.cameras.len()).all(|c| held.contains(&c)) {
        return Err(DatasetError::NoTrainingCamera);
    }
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for camera in 0..dataset.cameras.len() {
        for timestep in 0..dataset.timesteps {
            let v = ViewRef { camera, timestep };
            if held.contains(&camera) {
                eval.push(v);
            } else {
                train.push(v);
            }
        }
    }
    Ok((train, eval))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    Static,
    Oscillate,
    Drift,
}

impl std::str::FromStr for Motion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "static" => Ok(Motion::Static),
            "oscillate" => Ok(Motion::Oscillate),
            "drift" => Ok(Motion::Drift),
            other => Err(format!("unknown motion {other:?} (expected static, oscillate or drift)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SynthParams {
    pub seed: u64,
    pub n_gaussians: usize,
    pub motion: Motion,
    pub n_cameras: usize,
    pub timesteps: usize,
    pub image_size: (usize, usize),
    pub sh_degree: usize,
    /// Largest displacement of any Gaussian; at most 0.1.
    pub amplitude: f64,
    /// Standard deviation of the noise added to the seed point cloud.
    pub point_noise: f64,
    pub held_out: Vec<String>,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            seed: 0,
            n_gaussians: 200,
            motion: Motion::Oscillate,
            n_cameras: 6,
            timesteps: 100,
            image_size: (96, 96),
            sh_degree: 1,
            amplitude: 0.1,
            point_noise: 0.02,
            held_out: vec!["00".into()],
        }
    }
}

/// Ground-truth scene: canonical Gaussians and per-Gaussian motion.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub gaussians: Vec<GaussianPrimitive>,
    pub motion: Motion,
    /// Peak displacement vector of each Gaussian.
    pub displacement: Vec<Vector3<f64>>,
    pub timesteps: usize,
}

impl GroundTruth {
    /// Center offset of Gaussian `i` at frame `t`.
    pub fn offset(&self, i: usize, t: usize) -> Vector3<f64> {
        let phase = t as f64 / self.timesteps as f64;
        match self.motion {
            Motion::Static => Vector3::zeros(),
            Motion::Oscillate => self.displacement[i] * (std::f64::consts::TAU * phase).sin(),
            Motion::Drift => self.displacement[i] * phase,
        }
    }

    pub fn at(&self, t: usize) -> Vec<GaussianPrimitive> {
        self.gaussians
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let mut g = g.clone();
                g.center += self.offset(i, t);
                g
            })
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<(), DatasetError> {
        let file = GroundTruthFile {
            motion: self.motion,
            timesteps: self.timesteps,
            gaussians: self
                .gaussians
                .iter()
                .zip(&self.displacement)
                .map(|(g, d)| GaussianRecord {
                    center: g.center.into(),
                    rotation: g.rotation.into(),
                    log_scale: g.log_scale.into(),
                    opacity_logit: g.opacity_logit,
                    sh_coeffs: g.sh_coeffs.clone(),
                    displacement: (*d).into(),
                })
                .collect(),
        };
        write_json(path, &file)
    }

    pub fn read(path: &Path) -> Result<Self, DatasetError> {
        let file: GroundTruthFile = read_json(path)?;
        Ok(Self {
            motion: file.motion,
            timesteps: file.timesteps,
            displacement: file.gaussians.iter().map(|g| Vector3::from(g.displacement)).collect(),
            gaussians: file
                .gaussians
                .into_iter()
                .map(|g| GaussianPrimitive {
                    center: Vector3::from(g.center),
                    rotation: Vector4::from(g.rotation),
                    log_scale: Vector3::from(g.log_scale),
                    opacity_logit: g.opacity_logit,
                    sh_coeffs: g.sh_coeffs,
                    embedding: Vec::new(),
                })
                .collect(),
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct GaussianRecord {
    center: [f64; 3],
    rotation: [f64; 4],
    log_scale: [f64; 3],
    opacity_logit: f64,
    sh_coeffs: Vec<[f64; 3]>,
    displacement: [f64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct GroundTruthFile {
    motion: Motion,
    timesteps: usize,
    gaussians: Vec<GaussianRecord>,
}

fn f32r(v: f64) -> f64 {
    v as f32 as f64
}

/// Cameras on a horizontal ring of radius 3 around the origin, alternating
/// above and below the equator, looking at the origin with +z up.
pub fn ring_cameras(n: usize, image_size: (usize, usize)) -> Vec<CameraView> {
    (0..n)
        .map(|i| {
            let theta = std::f64::consts::TAU * i as f64 / n as f64;
            let z = if i % 2 == 0 { 0.6 } else { -0.6 };
            let eye = Vector3::new(3.0 * theta.cos(), 3.0 * theta.sin(), z);
            let focal = 1.5 * image_size.0 as f64;
            CameraView {
                id: format!("{i:02}"),
                camera: Camera::look_at(eye, Vector3::zeros(), Vector3::z(), focal, image_size)
                    .expect("ring cameras are valid"),
            }
        })
        .collect()
}

/// Render settings used for synthetic ground truth (black background).
pub fn synth_settings(camera: &Camera) -> RenderSettings {
    RenderSettings::for_camera(camera)
}

/// Samples a scene in the unit box `[-0.5, 0.5]^3`, renders every frame from
/// every ring camera and returns the ground truth with an in-memory dataset.
/// Frames are quantized to 8 bits, exactly as they would be read back from PNG.
pub fn synth_scene(p: &SynthParams) -> Result<(GroundTruth, MultiViewDataset), DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let amp = p.amplitude.clamp(0.0, 0.1);
    let sh_count = sh::coeff_count(p.sh_degree.min(sh::MAX_DEGREE));
    let mut gaussians = Vec::with_capacity(p.n_gaussians);
    let mut displacement = Vec::with_capacity(p.n_gaussians);
    for _ in 0..p.n_gaussians {
        let center = Vector3::from_fn(|_, _| f32r(rng.random_range(-0.5..0.5)));
        let q = Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0f64));
        let rotation = (q / q.norm()).map(f32r);
        let log_scale = Vector3::from_fn(|_, _| f32r(rng.random_range(0.03f64..0.09).ln()));
        let opacity = rng.random_range(0.5..0.95);
        let sh_coeffs = (0..sh_count)
            .map(|k| {
                if k == 0 {
                    [0; 3].map(|_| f32r(sh::dc_from_color(rng.random_range(0.1..0.9))))
                } else {
                    [0; 3].map(|_| f32r(rng.random_range(-0.1..0.1)))
                }
            })
            .collect();
        gaussians.push(GaussianPrimitive {
            center,
            rotation,
            log_scale,
            opacity_logit: f32r(crate::gaussian::logit(opacity)),
            sh_coeffs,
            embedding: Vec::new(),
        });
        let dir = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0f64));
        let dir = dir.try_normalize(1e-9).unwrap_or(Vector3::x());
        displacement.push((dir * amp * rng.random_range(0.3..1.0)).map(f32r));
    }
    let gt = GroundTruth {
        gaussians,
        motion: p.motion,
        displacement,
        timesteps: p.timesteps.max(1),
    };
    let cameras = ring_cameras(p.n_cameras, p.image_size);
    let mut frames = vec![Vec::with_capacity(p.timesteps); cameras.len()];
    let static_scene = (p.motion == Motion::Static).then(|| gt.at(0));
    for t in 0..p.timesteps {
        let scene = match &static_scene {
            Some(s) => s.clone(),
            None => gt.at(t),
        };
        for (ci, cam) in cameras.iter().enumerate() {
            let out = rasterize(&scene, &cam.camera, &synth_settings(&cam.camera))?;
            frames[ci].push(Image::from_render(&out).quantized());
        }
    }
    let normal = rand_distr::Normal::new(0.0, p.point_noise.max(0.0)).expect("valid normal");
    let points = gt
        .gaussians
        .iter()
        .map(|g| {
            let c = sh::eval_sh(&g.sh_coeffs[..1], &Vector3::z(), 0).expect("degree 0");
            SeedPoint {
                position: g.center + Vector3::from_fn(|_, _| rand_distr::Distribution::sample(&normal, &mut rng)),
                color: c,
            }
        })
        .collect();
    let held_out = p.held_out.clone();
    let ds = MultiViewDataset::from_memory(cameras, frames, held_out, Some(points))?;
    Ok((gt, ds))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(motion: Motion) -> SynthParams {
        SynthParams {
            n_gaussians: 20,
            motion,
            n_cameras: 3,
            timesteps: 4,
            image_size: (16, 16),
            ..Default::default()
        }
    }

    #[test]
    fn static_frames_are_identical() {
        let (_, ds) = synth_scene(&tiny(Motion::Static)).unwrap();
        for c in 0..3 {
            let f0 = ds.frame(ViewRef { camera: c, timestep: 0 }).unwrap();
            for t in 1..4 {
                assert_eq!(ds.frame(ViewRef { camera: c, timestep: t }).unwrap(), f0);
            }
        }
    }

    #[test]
    fn oscillate_starts_at_static_pose() {
        let (_, s) = synth_scene(&tiny(Motion::Static)).unwrap();
        let (_, o) = synth_scene(&tiny(Motion::Oscillate)).unwrap();
        for c in 0..3 {
            let v = ViewRef { camera: c, timestep: 0 };
            assert_eq!(s.frame(v).unwrap(), o.frame(v).unwrap());
        }
        let moved = (0..3).any(|c| {
            let v = ViewRef { camera: c, timestep: 1 };
            s.frame(v).unwrap() != o.frame(v).unwrap()
        });
        assert!(moved);
    }

    #[test]
    fn synth_is_seeded() {
        let (ga, a) = synth_scene(&tiny(Motion::Drift)).unwrap();
        let (gb, b) = synth_scene(&tiny(Motion::Drift)).unwrap();
        assert_eq!(ga, gb);
        assert_eq!(a, b);
        let (_, c) = synth_scene(&SynthParams { seed: 1, ..tiny(Motion::Drift) }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rerendering_ground_truth_reproduces_frames() {
        let (gt, ds) = synth_scene(&tiny(Motion::Oscillate)).unwrap();
        for t in 0..4 {
            for (c, cam) in ds.cameras.iter().enumerate() {
                let out = rasterize(&gt.at(t), &cam.camera, &synth_settings(&cam.camera)).unwrap();
                assert_eq!(Image::from_render(&out).quantized(), ds.frame(ViewRef { camera: c, timestep: t }).unwrap());
            }
        }
    }

    #[test]
    fn amplitude_is_bounded() {
        let (gt, _) = synth_scene(&tiny(Motion::Oscillate)).unwrap();
        for i in 0..gt.gaussians.len() {
            for t in 0..gt.timesteps {
                assert!(gt.offset(i, t).norm() <= 0.1 + 1e-6);
            }
        }
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (gt, ds) = synth_scene(&tiny(Motion::Oscillate)).unwrap();
        ds.write(dir.path()).unwrap();
        gt.write(&dir.path().join(GROUND_TRUTH_FILE)).unwrap();
        let back = load_multiview(dir.path()).unwrap();
        assert_eq!(back.timesteps, 4);
        assert_eq!(back.held_out, ds.held_out);
        assert_eq!(back.points, ds.points);
        for (a, b) in back.cameras.iter().zip(&ds.cameras) {
            assert_eq!(a, b);
            assert_eq!(a.camera.focal.x.to_bits(), b.camera.focal.x.to_bits());
        }
        for c in 0..3 {
            for t in 0..4 {
                let v = ViewRef { camera: c, timestep: t };
                assert_eq!(back.frame(v).unwrap(), ds.frame(v).unwrap());
            }
        }
        assert_eq!(GroundTruth::read(&dir.path().join(GROUND_TRUTH_FILE)).unwrap(), gt);
    }

    fn write_fixture(root: &Path, frames: &[usize], w2c: Option<[f64; 16]>) {
        let cams = ring_cameras(frames.len(), (4, 4));
        let mut poses = PosesFile {
            cameras: cams.iter().map(PoseRecord::from_view).collect(),
            held_out: vec![],
        };
        if let Some(m) = w2c {
            poses.cameras[0].world_to_camera = m;
        }
        write_json(&root.join(POSES_FILE), &poses).unwrap();
        for (cam, &n) in cams.iter().zip(frames) {
            let d = root.join(format!("cam_{}", cam.id));
            fs::create_dir_all(&d).unwrap();
            for t in 0..n {
                Image::filled(4, 4, [0.5, 0.25, t as f32 / 10.0]).save_png(&d.join(frame_name(t))).unwrap();
            }
        }
    }

    #[test]
    fn two_cameras_four_frames() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), &[4, 4], None);
        let ds = load_multiview(dir.path()).unwrap();
        assert_eq!(ds.timesteps, 4);
        assert_eq!(ds.cameras.len(), 2);
        assert!(ds.points.is_none());
    }

    #[test]
    fn ragged_frames() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), &[4, 3, 4], None);
        assert!(matches!(
            load_multiview(dir.path()),
            Err(DatasetError::RaggedFrames { expected: 4, got: 3, .. })
        ));
    }

    #[test]
    fn missing_poses() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_multiview(dir.path()), Err(DatasetError::MissingPoses(_))));
    }

    #[test]
    fn non_rigid_rotation() {
        let dir = tempfile::tempdir().unwrap();
        let sheared = [1.0, 0.5, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 3.0, 0.0, 0.0, 0.0, 1.0];
        write_fixture(dir.path(), &[2, 2], Some(sheared));
        assert!(matches!(load_multiview(dir.path()), Err(DatasetError::NonRigidRotation { .. })));
    }

    #[test]
    fn no_frames() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), &[0, 0], None);
        assert!(matches!(load_multiview(dir.path()), Err(DatasetError::NoFrames)));
    }

    #[test]
    fn bad_json() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(POSES_FILE), "{ not json").unwrap();
        assert!(matches!(load_multiview(dir.path()), Err(DatasetError::Parse { .. })));
    }

    #[test]
    fn split_examples() {
        let (_, ds) = synth_scene(&SynthParams {
            n_cameras: 6,
            ..tiny(Motion::Static)
        })
        .unwrap();
        let (train, eval) = split_train_eval(&ds, &["03".to_string()]).unwrap();
        let train_cams: std::collections::BTreeSet<_> = train.iter().map(|v| v.camera).collect();
        assert_eq!(train_cams.len(), 5);
        assert!(eval.iter().all(|v| v.camera == 3));
        assert_eq!(train.len() + eval.len(), 6 * 4);
        assert!(train.iter().all(|v| !eval.contains(v)));

        let (train, eval) = split_train_eval(&ds, &[]).unwrap();
        assert!(eval.is_empty());
        assert_eq!(train.len(), 24);

        assert!(matches!(split_train_eval(&ds, &["99".to_string()]), Err(DatasetError::UnknownCamera(_))));
        let all: Vec<String> = (0..6).map(|i| format!("{i:02}")).collect();
        assert!(matches!(split_train_eval(&ds, &all), Err(DatasetError::NoTrainingCamera)));
    }
}
