//! Covisibility: the fraction of pixels that reproject consistently
//! between frame pairs, averaged over all ordered pairs.

use crate::error::Result;

use super::FrameSequence;

/// Relative depth tolerance for a reprojected pixel to count as covisible.
/// Loose enough to absorb rendering discretization.
const DEPTH_REL_TOL: f64 = 0.05;

/// Mean covisible fraction over all ordered frame pairs. A pixel of frame
/// `i` counts as covisible in frame `j` when its unprojected point lands
/// in-bounds in `j` with depth matching `j`'s ground truth within 5%
/// relative. Requires ground truth; a single-frame sequence scores 1.0.
pub fn covisibility(seq: &FrameSequence) -> Result<f64> {
    let (depth, poses) = seq.require_ground_truth()?;
    let s = seq.num_frames;
    if s == 1 {
        return Ok(1.0);
    }
    let (w, h) = (seq.width(), seq.height());
    let px = w * h;
    let k = seq.intrinsics;

    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..s {
        let depth_i = &depth[i * px..(i + 1) * px];
        for j in 0..s {
            if i == j {
                continue;
            }
            let depth_j = &depth[j * px..(j + 1) * px];
            let rel = poses[j].compose(&poses[i].inverse());
            let mut valid = 0usize;
            let mut covis = 0usize;
            for row in 0..h {
                for col in 0..w {
                    let d = depth_i[row * w + col] as f64;
                    if d <= 0.0 {
                        continue;
                    }
                    valid += 1;
                    let p_j = rel.apply(k.unproject(col, row, d));
                    let Some((u, v)) = k.project(p_j) else {
                        continue;
                    };
                    let (uc, vc) = (u.floor(), v.floor());
                    if uc < 0.0 || vc < 0.0 || uc >= w as f64 || vc >= h as f64 {
                        continue;
                    }
                    let dj = depth_j[vc as usize * w + uc as usize] as f64;
                    if dj > 0.0 && (p_j.z - dj).abs() <= DEPTH_REL_TOL * dj {
                        covis += 1;
                    }
                }
            }
            // A frame seeing only background contributes a zero pair score.
            total += if valid > 0 {
                covis as f64 / valid as f64
            } else {
                0.0
            };
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Intrinsics, Vec3};
    use crate::scene::{generate_scene, render_sequence, DomainTag, GenConfig, Scene, TrajControl};
    use crate::scene::{Primitive, Shape};

    #[test]
    fn single_frame_scores_one() {
        let scene = generate_scene(&GenConfig::source(), 1).unwrap();
        let seq = render_sequence(&scene, 1).unwrap();
        assert_eq!(covisibility(&seq).unwrap(), 1.0);
    }

    #[test]
    fn identical_poses_of_static_scene_score_one() {
        let mut scene = generate_scene(
            &GenConfig {
                dynamic_count_range: [0, 0],
                ..GenConfig::source()
            },
            13,
        )
        .unwrap();
        scene.trajectory = vec![TrajControl {
            eye: Vec3::new(0.0, -1.0, 0.0),
            target: Vec3::new(0.0, 0.0, 8.0),
        }];
        let seq = render_sequence(&scene, 2).unwrap();
        let c = covisibility(&seq).unwrap();
        assert!((c - 1.0).abs() < 1e-6, "covisibility {c}");
    }

    #[test]
    fn opposite_views_of_disjoint_content_score_near_zero() {
        // Two spheres on opposite sides; camera 0 looks at one, camera 1
        // turns its back on it and looks at the other.
        let scene = Scene {
            static_primitives: vec![
                Primitive {
                    shape: Shape::Sphere {
                        center: Vec3::new(0.0, 0.0, 8.0),
                        radius: 2.0,
                    },
                    albedo: [0.8, 0.3, 0.3],
                },
                Primitive {
                    shape: Shape::Sphere {
                        center: Vec3::new(0.0, 0.0, -8.0),
                        radius: 2.0,
                    },
                    albedo: [0.3, 0.8, 0.3],
                },
            ],
            dynamic_primitives: vec![],
            trajectory: vec![
                TrajControl {
                    eye: Vec3::ZERO,
                    target: Vec3::new(0.0, 0.0, 8.0),
                },
                TrajControl {
                    eye: Vec3::ZERO,
                    target: Vec3::new(0.0, 0.0, -8.0),
                },
            ],
            intrinsics: Intrinsics::new(64.0, 64.0, 32.0, 32.0, 64, 64).unwrap(),
            domain_tag: DomainTag::Source,
            texture_freq: 1.0,
            texture_phase: [0.0; 3],
            noise_sigma: 0.0,
            scene_seed: 0,
        };
        let seq = render_sequence(&scene, 2).unwrap();
        let c = covisibility(&seq).unwrap();
        assert!(c < 0.05, "covisibility {c}");
    }

    #[test]
    fn missing_ground_truth_is_an_error() {
        let scene = generate_scene(&GenConfig::source(), 2).unwrap();
        let seq = render_sequence(&scene, 2).unwrap().without_labels();
        assert!(covisibility(&seq).is_err());
    }

    #[test]
    fn intermediate_frames_do_not_decrease_covisibility_on_static_scenes() {
        for seed in [3u64, 17, 29] {
            let scene = generate_scene(
                &GenConfig {
                    dynamic_count_range: [0, 0],
                    ..GenConfig::source()
                },
                seed,
            )
            .unwrap();
            let seq = render_sequence(&scene, 9).unwrap();
            let anchors = seq.subset(&[0, 8]).unwrap();
            let with_mid = seq.subset(&[0, 4, 8]).unwrap();
            let with_more = seq.subset(&[0, 2, 4, 6, 8]).unwrap();
            let c0 = covisibility(&anchors).unwrap();
            let c1 = covisibility(&with_mid).unwrap();
            let c2 = covisibility(&with_more).unwrap();
            assert!(c1 >= c0 - 1e-6, "seed {seed}: {c0} -> {c1}");
            assert!(c2 >= c1 - 1e-6, "seed {seed}: {c1} -> {c2}");
        }
    }
}
