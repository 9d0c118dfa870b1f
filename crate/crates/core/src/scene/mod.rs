//! Procedural dynamic 3D scenes and their rendered frame sequences.
//!
//! Scenes are built from spheres and planes with flat albedo modulated by a
//! low-frequency procedural texture, a piecewise-linear camera trajectory,
//! and optional linearly-moving spheres. Everything is a pure function of
//! `(config, seed)`.

mod covis;
mod io;
mod render;

pub use covis::covisibility;
pub use io::{access_log, read_sequence, read_sequence_frames_only, write_sequence, SequenceMeta};
pub use render::render_sequence;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geom::{CameraPose, Intrinsics, Vec3};

/// Which generation distribution a scene or sequence was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Source,
    Target,
}

impl std::fmt::Display for DomainTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DomainTag::Source => write!(f, "source"),
            DomainTag::Target => write!(f, "target"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    Plane { point: Vec3, normal: Vec3 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub albedo: [f64; 3],
}

/// A sphere translating linearly over time (units per frame).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MovingPrimitive {
    pub primitive: Primitive,
    pub velocity: Vec3,
}

/// Camera trajectory control point: eye position plus look target.
/// Per-frame poses interpolate linearly along the control polyline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajControl {
    pub eye: Vec3,
    pub target: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub static_primitives: Vec<Primitive>,
    pub dynamic_primitives: Vec<MovingPrimitive>,
    pub trajectory: Vec<TrajControl>,
    pub intrinsics: Intrinsics,
    pub domain_tag: DomainTag,
    /// Spatial frequency of the procedural albedo texture.
    pub texture_freq: f64,
    /// Texture phase offsets, randomized per scene.
    pub texture_phase: [f64; 3],
    /// Amplitude of the fixed per-pixel sensor noise pattern.
    pub noise_sigma: f64,
    /// Seed for the per-scene noise pattern and the sequence id.
    pub scene_seed: u64,
}

/// Generation parameters for one domain distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub domain: DomainTag,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Inclusive count range for static spheres (planes are added on top).
    pub static_count_range: [usize; 2],
    /// Inclusive count range for linearly moving spheres.
    pub dynamic_count_range: [usize; 2],
    pub radius_range: [f64; 2],
    /// Speed range for dynamic spheres, scene units per frame.
    pub speed_range: [f64; 2],
    pub texture_freq: f64,
    /// Total orbit sweep of the camera trajectory, degrees.
    pub traj_sweep_deg: f64,
    pub traj_height_amp: f64,
    pub traj_control_points: usize,
    pub noise_sigma: f64,
}

impl GenConfig {
    /// Source-domain distribution: sparse scenes, mild motion.
    pub fn source() -> Self {
        GenConfig {
            domain: DomainTag::Source,
            width: 64,
            height: 64,
            focal: 64.0,
            static_count_range: [4, 7],
            dynamic_count_range: [1, 3],
            radius_range: [0.55, 1.25],
            speed_range: [0.02, 0.06],
            texture_freq: 1.3,
            traj_sweep_deg: 40.0,
            traj_height_amp: 0.5,
            traj_control_points: 4,
            noise_sigma: 0.03,
        }
    }

    /// Target-domain distribution: denser scenes, higher texture frequency,
    /// and twice the motion magnitude of the source domain.
    pub fn target() -> Self {
        GenConfig {
            domain: DomainTag::Target,
            width: 64,
            height: 64,
            focal: 64.0,
            static_count_range: [10, 17],
            dynamic_count_range: [5, 8],
            radius_range: [0.35, 0.95],
            speed_range: [0.04, 0.12],
            texture_freq: 2.6,
            traj_sweep_deg: 80.0,
            traj_height_amp: 1.0,
            traj_control_points: 4,
            noise_sigma: 0.03,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(CoreError::Config(
                "image dimensions must be positive".into(),
            ));
        }
        if self.static_count_range[0] > self.static_count_range[1]
            || self.dynamic_count_range[0] > self.dynamic_count_range[1]
        {
            return Err(CoreError::Config("empty primitive count range".into()));
        }
        if self.radius_range[0] <= 0.0 || self.radius_range[0] > self.radius_range[1] {
            return Err(CoreError::Config("invalid radius range".into()));
        }
        if self.focal <= 0.0 {
            return Err(CoreError::Config("focal length must be positive".into()));
        }
        if self.traj_control_points == 0 {
            return Err(CoreError::Config(
                "trajectory needs at least one control point".into(),
            ));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::new(
            self.focal,
            self.focal,
            self.width as f64 / 2.0,
            self.height as f64 / 2.0,
            self.width,
            self.height,
        )
    }
}

/// Center of the volume primitives are scattered in.
const SCENE_CENTER: Vec3 = Vec3 {
    x: 0.0,
    y: 0.0,
    z: 8.0,
};

/// Procedurally generates a scene. Identical `(config, seed)` pairs yield
/// bit-identical scenes.
pub fn generate_scene(config: &GenConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain_salt(config.domain));
    let intrinsics = config.intrinsics()?;

    let mut static_primitives = Vec::new();
    // Ground plane below the scene (world y points down) plus a back wall
    // so most pixels carry valid depth.
    static_primitives.push(Primitive {
        shape: Shape::Plane {
            point: Vec3::new(0.0, 2.8, 0.0),
            normal: Vec3::new(0.0, -1.0, 0.0),
        },
        albedo: [0.45, 0.5, 0.4],
    });
    static_primitives.push(Primitive {
        shape: Shape::Plane {
            point: Vec3::new(0.0, 0.0, 15.5),
            normal: Vec3::new(0.0, 0.0, -1.0),
        },
        albedo: [0.55, 0.5, 0.55],
    });

    let n_static = sample_count(&mut rng, config.static_count_range);
    for _ in 0..n_static {
        static_primitives.push(Primitive {
            shape: sample_sphere(&mut rng, config),
            albedo: sample_albedo(&mut rng),
        });
    }

    let n_dynamic = sample_count(&mut rng, config.dynamic_count_range);
    let mut dynamic_primitives = Vec::with_capacity(n_dynamic);
    for _ in 0..n_dynamic {
        let primitive = Primitive {
            shape: sample_sphere(&mut rng, config),
            albedo: sample_albedo(&mut rng),
        };
        let speed = rng.random_range(config.speed_range[0]..=config.speed_range[1]);
        let dir = sample_unit_vector(&mut rng);
        dynamic_primitives.push(MovingPrimitive {
            primitive,
            velocity: dir * speed,
        });
    }

    let trajectory = sample_trajectory(&mut rng, config);
    let texture_phase = [
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.0..std::f64::consts::TAU),
    ];

    Ok(Scene {
        static_primitives,
        dynamic_primitives,
        trajectory,
        intrinsics,
        domain_tag: config.domain,
        texture_freq: config.texture_freq,
        texture_phase,
        noise_sigma: config.noise_sigma,
        scene_seed: seed,
    })
}

fn domain_salt(domain: DomainTag) -> u64 {
    match domain {
        DomainTag::Source => 0x5eed_0001,
        DomainTag::Target => 0x5eed_0002,
    }
}

fn sample_count(rng: &mut ChaCha8Rng, range: [usize; 2]) -> usize {
    rng.random_range(range[0]..=range[1])
}

fn sample_sphere(rng: &mut ChaCha8Rng, config: &GenConfig) -> Shape {
    let center = Vec3::new(
        rng.random_range(-4.5..4.5),
        rng.random_range(-2.0..2.2),
        SCENE_CENTER.z + rng.random_range(-3.0..3.0),
    );
    let radius = rng.random_range(config.radius_range[0]..=config.radius_range[1]);
    Shape::Sphere { center, radius }
}

fn sample_albedo(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.random_range(0.25..0.95),
        rng.random_range(0.25..0.95),
        rng.random_range(0.25..0.95),
    ]
}

fn sample_unit_vector(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v * (1.0 / n);
        }
    }
}

fn sample_trajectory(rng: &mut ChaCha8Rng, config: &GenConfig) -> Vec<TrajControl> {
    let sweep = config.traj_sweep_deg.to_radians();
    let direction = if rng.random_range(0.0..1.0) < 0.5 {
        1.0
    } else {
        -1.0
    };
    let radius = rng.random_range(7.0..9.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let target_jitter = Vec3::new(
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.5..0.5),
    );
    let target = SCENE_CENTER + target_jitter;
    let n = config.traj_control_points.max(1);
    (0..n)
        .map(|i| {
            let u = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
            let theta = direction * sweep * (u - 0.5);
            let height = -1.2 + config.traj_height_amp * (2.3 * theta + phase).sin();
            let eye = Vec3::new(
                SCENE_CENTER.x + radius * theta.sin(),
                height,
                SCENE_CENTER.z - radius * theta.cos(),
            );
            TrajControl { eye, target }
        })
        .collect()
}

impl Scene {
    /// Camera pose at normalized trajectory parameter `u` in [0, 1].
    pub fn pose_at(&self, u: f64) -> Result<CameraPose> {
        let (eye, target) = self.eye_target_at(u)?;
        Ok(crate::geom::look_at(eye, target))
    }

    pub(crate) fn eye_target_at(&self, u: f64) -> Result<(Vec3, Vec3)> {
        if self.trajectory.is_empty() {
            return Err(CoreError::Degenerate(
                "camera trajectory spline has zero length".into(),
            ));
        }
        if self.trajectory.len() == 1 {
            let c = self.trajectory[0];
            return Ok((c.eye, c.target));
        }
        let u = u.clamp(0.0, 1.0);
        let segments = self.trajectory.len() - 1;
        let pos = u * segments as f64;
        let idx = (pos.floor() as usize).min(segments - 1);
        let frac = pos - idx as f64;
        let a = self.trajectory[idx];
        let b = self.trajectory[idx + 1];
        Ok((
            a.eye + (b.eye - a.eye) * frac,
            a.target + (b.target - a.target) * frac,
        ))
    }

    /// Sphere/plane list with dynamic spheres advanced to frame time `t`.
    pub(crate) fn primitives_at(&self, t: f64) -> Vec<Primitive> {
        let mut out = self.static_primitives.clone();
        for m in &self.dynamic_primitives {
            let mut p = m.primitive;
            if let Shape::Sphere { center, radius } = p.shape {
                p.shape = Shape::Sphere {
                    center: center + m.velocity * t,
                    radius,
                };
            }
            out.push(p);
        }
        out
    }
}

/// An ordered sequence of rendered frames with optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    /// `S*H*W*3` intensities in [0, 1], row-major, channel-last.
    pub frames: Vec<f32>,
    /// `S*H*W` z-depths; 0 marks invalid (background) pixels.
    pub gt_depth: Option<Vec<f32>>,
    /// World-to-camera poses, one per frame.
    pub gt_poses: Option<Vec<CameraPose>>,
    pub intrinsics: Intrinsics,
    pub seq_id: String,
    pub domain_tag: DomainTag,
    pub num_frames: usize,
}

impl FrameSequence {
    pub fn new(
        frames: Vec<f32>,
        gt_depth: Option<Vec<f32>>,
        gt_poses: Option<Vec<CameraPose>>,
        intrinsics: Intrinsics,
        seq_id: String,
        domain_tag: DomainTag,
        num_frames: usize,
    ) -> Result<Self> {
        let seq = FrameSequence {
            frames,
            gt_depth,
            gt_poses,
            intrinsics,
            seq_id,
            domain_tag,
            num_frames,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn pixels_per_frame(&self) -> usize {
        self.height() * self.width()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_frames == 0 {
            return Err(CoreError::Shape("sequence must have at least one frame".into()));
        }
        self.intrinsics.validate()?;
        let expected = self.num_frames * self.pixels_per_frame() * 3;
        if self.frames.len() != expected {
            return Err(CoreError::Shape(format!(
                "frames has {} values, expected {}",
                self.frames.len(),
                expected
            )));
        }
        if self.frames.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(CoreError::Shape("frame intensities outside [0,1]".into()));
        }
        if let Some(d) = &self.gt_depth {
            if d.len() != self.num_frames * self.pixels_per_frame() {
                return Err(CoreError::Shape("gt_depth size mismatch".into()));
            }
            if d.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(CoreError::Shape(
                    "gt_depth values must be finite and non-negative".into(),
                ));
            }
        }
        if let Some(p) = &self.gt_poses {
            if p.len() != self.num_frames {
                return Err(CoreError::Shape("gt_poses length mismatch".into()));
            }
            for pose in p {
                pose.validate_unit()?;
            }
        }
        Ok(())
    }

    /// Gathers the frames (and labels, when present) at `indices`, which
    /// must be strictly increasing and in range.
    pub fn subset(&self, indices: &[usize]) -> Result<FrameSequence> {
        if indices.is_empty() {
            return Err(CoreError::Shape("subset needs at least one index".into()));
        }
        for w in indices.windows(2) {
            if w[1] <= w[0] {
                return Err(CoreError::Shape("subset indices must be strictly increasing".into()));
            }
        }
        if *indices.last().unwrap() >= self.num_frames {
            return Err(CoreError::Shape(format!(
                "subset index {} out of range ({} frames)",
                indices.last().unwrap(),
                self.num_frames
            )));
        }
        let px = self.pixels_per_frame();
        let mut frames = Vec::with_capacity(indices.len() * px * 3);
        for &i in indices {
            frames.extend_from_slice(&self.frames[i * px * 3..(i + 1) * px * 3]);
        }
        let gt_depth = self.gt_depth.as_ref().map(|d| {
            let mut out = Vec::with_capacity(indices.len() * px);
            for &i in indices {
                out.extend_from_slice(&d[i * px..(i + 1) * px]);
            }
            out
        });
        let gt_poses = self
            .gt_poses
            .as_ref()
            .map(|p| indices.iter().map(|&i| p[i]).collect());
        FrameSequence::new(
            frames,
            gt_depth,
            gt_poses,
            self.intrinsics,
            self.seq_id.clone(),
            self.domain_tag,
            indices.len(),
        )
    }

    /// Frame data (H*W*3) of one frame.
    pub fn frame(&self, i: usize) -> &[f32] {
        let n = self.pixels_per_frame() * 3;
        &self.frames[i * n..(i + 1) * n]
    }

    pub fn depth_frame(&self, i: usize) -> Option<&[f32]> {
        self.gt_depth.as_ref().map(|d| {
            let n = self.pixels_per_frame();
            &d[i * n..(i + 1) * n]
        })
    }

    pub fn require_ground_truth(&self) -> Result<(&[f32], &[CameraPose])> {
        match (&self.gt_depth, &self.gt_poses) {
            (Some(d), Some(p)) => Ok((d.as_slice(), p.as_slice())),
            _ => Err(CoreError::MissingGroundTruth(format!(
                "sequence {} lacks depth or poses",
                self.seq_id
            ))),
        }
    }

    /// Drops ground-truth arrays (training views of unlabeled data).
    pub fn without_labels(mut self) -> FrameSequence {
        self.gt_depth = None;
        self.gt_poses = None;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = GenConfig::source();
        let a = generate_scene(&cfg, 7).unwrap();
        let b = generate_scene(&cfg, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dynamic_count_range_zero_forces_static_scene() {
        let mut cfg = GenConfig::source();
        cfg.dynamic_count_range = [0, 0];
        for seed in 0..5 {
            let scene = generate_scene(&cfg, seed).unwrap();
            assert!(scene.dynamic_primitives.is_empty());
        }
    }

    #[test]
    fn source_and_target_distributions_differ() {
        // Sample both domains with the same seeds and compare summary
        // statistics: target must be denser and faster on average.
        let src_cfg = GenConfig::source();
        let tgt_cfg = GenConfig::target();
        let mut src_count = 0.0;
        let mut tgt_count = 0.0;
        let mut src_speed = 0.0;
        let mut tgt_speed = 0.0;
        let n = 20;
        for seed in 0..n {
            let s = generate_scene(&src_cfg, seed).unwrap();
            let t = generate_scene(&tgt_cfg, seed).unwrap();
            src_count += (s.static_primitives.len() + s.dynamic_primitives.len()) as f64;
            tgt_count += (t.static_primitives.len() + t.dynamic_primitives.len()) as f64;
            src_speed += s
                .dynamic_primitives
                .iter()
                .map(|m| m.velocity.norm())
                .sum::<f64>()
                / s.dynamic_primitives.len().max(1) as f64;
            tgt_speed += t
                .dynamic_primitives
                .iter()
                .map(|m| m.velocity.norm())
                .sum::<f64>()
                / t.dynamic_primitives.len().max(1) as f64;
        }
        assert!(tgt_count / n as f64 > src_count / n as f64 + 5.0);
        assert!(tgt_speed > src_speed * 1.3);
        assert!((tgt_cfg.texture_freq - src_cfg.texture_freq).abs() > 0.5);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = GenConfig::source();
        cfg.width = 0;
        assert!(generate_scene(&cfg, 1).is_err());
        let mut cfg = GenConfig::source();
        cfg.static_count_range = [5, 2];
        assert!(generate_scene(&cfg, 1).is_err());
    }

    #[test]
    fn primitive_radii_positive() {
        let scene = generate_scene(&GenConfig::target(), 3).unwrap();
        for p in scene
            .static_primitives
            .iter()
            .chain(scene.dynamic_primitives.iter().map(|m| &m.primitive))
        {
            if let Shape::Sphere { radius, .. } = p.shape {
                assert!(radius > 0.0);
            }
        }
    }

    #[test]
    fn subset_gathers_frames_and_labels() {
        let scene = generate_scene(&GenConfig::source(), 11).unwrap();
        let seq = render_sequence(&scene, 5).unwrap();
        let sub = seq.subset(&[0, 2, 4]).unwrap();
        assert_eq!(sub.num_frames, 3);
        assert_eq!(sub.frame(1), seq.frame(2));
        assert_eq!(
            sub.gt_poses.as_ref().unwrap()[2],
            seq.gt_poses.as_ref().unwrap()[4]
        );
        assert!(seq.subset(&[2, 2]).is_err());
        assert!(seq.subset(&[0, 9]).is_err());
    }
}
