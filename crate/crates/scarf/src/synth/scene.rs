//! Synthetic scene generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batching::{BoxLabel, SamplePair};
use crate::benchmark::BBox;
use crate::error::{Result, ScarfError};
use crate::tensor::Tensor;

/// Per-object visibility across the two modalities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Visibility {
    Both,
    VisOnly,
    IrOnly,
}

/// Geometry and appearance of generated scenes. Objects always lie fully
/// inside the image; visibility probabilities must sum to 1.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub p_both: f64,
    pub p_vis_only: f64,
    pub p_ir_only: f64,
    /// Standard deviation of the additive Gaussian pixel noise.
    pub noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 32,
            width: 32,
            min_objects: 2,
            max_objects: 4,
            min_size: 4,
            max_size: 10,
            p_both: 0.5,
            p_vis_only: 0.25,
            p_ir_only: 0.25,
            noise: 0.05,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_objects > self.max_objects || self.min_size > self.max_size {
            return Err(ScarfError::Argument("scene ranges are inverted".into()));
        }
        if self.max_size > self.height || self.max_size > self.width {
            return Err(ScarfError::Argument(
                "objects must fit fully inside the image".into(),
            ));
        }
        let total = self.p_both + self.p_vis_only + self.p_ir_only;
        if (total - 1.0).abs() > 1e-9
            || self.p_both < 0.0
            || self.p_vis_only < 0.0
            || self.p_ir_only < 0.0
        {
            return Err(ScarfError::Argument(format!(
                "visibility probabilities must be non-negative and sum to 1, got {total}"
            )));
        }
        if self.noise < 0.0 {
            return Err(ScarfError::Argument("noise must be non-negative".into()));
        }
        Ok(())
    }
}

const BACKGROUND: f64 = 0.1;

/// Standard normal via Box-Muller.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.gen_range(f64::EPSILON..1.0);
    let v: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}

fn draw_visibility(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Visibility {
    let x: f64 = rng.gen_range(0.0..1.0);
    if x < spec.p_both {
        Visibility::Both
    } else if x < spec.p_both + spec.p_vis_only {
        Visibility::VisOnly
    } else {
        Visibility::IrOnly
    }
}

/// Renders one scene: bright rectangles into the modality images they are
/// visible in, Gaussian noise everywhere. Ground truth lists every object
/// regardless of visibility, so labels are shared across modalities.
pub fn generate_scene(
    spec: &SceneSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor, Vec<BoxLabel>)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut vis = vec![BACKGROUND; h * w * 3];
    let mut ir = vec![BACKGROUND; h * w * 3];
    let count = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let bw = rng.gen_range(spec.min_size..=spec.max_size);
        let bh = rng.gen_range(spec.min_size..=spec.max_size);
        let x0 = rng.gen_range(0..=w - bw);
        let y0 = rng.gen_range(0..=h - bh);
        let visibility = draw_visibility(spec, rng);
        let vis_level = rng.gen_range(0.7..1.0);
        let ir_level = rng.gen_range(0.7..1.0);
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                let base = (y * w + x) * 3;
                if visibility != Visibility::IrOnly {
                    for ch in 0..3 {
                        vis[base + ch] = vis_level;
                    }
                }
                if visibility != Visibility::VisOnly {
                    for ch in 0..3 {
                        ir[base + ch] = ir_level;
                    }
                }
            }
        }
        labels.push(BoxLabel {
            category: 0,
            bbox: BBox::new(x0 as f64, y0 as f64, bw as f64, bh as f64),
        });
    }
    if spec.noise > 0.0 {
        for v in vis.iter_mut() {
            *v += spec.noise * gaussian(rng);
        }
        for v in ir.iter_mut() {
            *v += spec.noise * gaussian(rng);
        }
    }
    Ok((
        Tensor::from_parts(vec![h, w, 3], vis),
        Tensor::from_parts(vec![h, w, 3], ir),
        labels,
    ))
}

/// Generates `count` scenes as sample pairs with ids `scene000`, ...
pub fn generate_pairs(spec: &SceneSpec, count: usize, seed: u64) -> Result<Vec<SamplePair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let (vis_image, ir_image, labels) = generate_scene(spec, &mut rng)?;
            Ok(SamplePair {
                pair_id: format!("scene{i:04}"),
                vis_image,
                ir_image,
                labels,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_objects_gives_noise_only_scene() {
        let spec = SceneSpec {
            min_objects: 0,
            max_objects: 0,
            ..SceneSpec::default()
        };
        let (vis, ir, labels) = generate_scene(&spec, &mut rng(0)).unwrap();
        assert!(labels.is_empty());
        // Noise-only pixels stay near the background level.
        for &v in vis.data().iter().chain(ir.data()) {
            assert!((v - BACKGROUND).abs() < 0.5);
        }
    }

    #[test]
    fn both_visible_object_lands_in_both_images() {
        let spec = SceneSpec {
            min_objects: 1,
            max_objects: 1,
            p_both: 1.0,
            p_vis_only: 0.0,
            p_ir_only: 0.0,
            noise: 0.0,
            ..SceneSpec::default()
        };
        let (vis, ir, labels) = generate_scene(&spec, &mut rng(1)).unwrap();
        let b = labels[0].bbox;
        let (cx, cy) = (b.x as usize + 1, b.y as usize + 1);
        assert!(vis.get(&[cy, cx, 0]) > 0.5);
        assert!(ir.get(&[cy, cx, 0]) > 0.5);
        // identical patch location: both bright exactly inside the box
        for (img, _) in [(&vis, "vis"), (&ir, "ir")] {
            for y in 0..spec.height {
                for x in 0..spec.width {
                    let bright = img.get(&[y, x, 0]) > 0.5;
                    assert_eq!(bright, b.contains(x as f64 + 0.5, y as f64 + 0.5));
                }
            }
        }
    }

    #[test]
    fn objects_fit_inside_the_image() {
        let spec = SceneSpec::default();
        let mut r = rng(2);
        for _ in 0..50 {
            let (_, _, labels) = generate_scene(&spec, &mut r).unwrap();
            for l in &labels {
                assert!(l.bbox.x >= 0.0 && l.bbox.y >= 0.0);
                assert!(l.bbox.x + l.bbox.w <= spec.width as f64);
                assert!(l.bbox.y + l.bbox.h <= spec.height as f64);
            }
        }
    }

    #[test]
    fn fixed_seed_replays_identical_scenes() {
        let spec = SceneSpec::default();
        let a = generate_pairs(&spec, 3, 9).unwrap();
        let b = generate_pairs(&spec, 3, 9).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.pair_id, y.pair_id);
            assert_eq!(x.vis_image, y.vis_image);
            assert_eq!(x.ir_image, y.ir_image);
            assert_eq!(x.labels, y.labels);
        }
    }

    #[test]
    fn invalid_probabilities_are_rejected() {
        let spec = SceneSpec {
            p_both: 0.9,
            p_vis_only: 0.9,
            p_ir_only: 0.0,
            ..SceneSpec::default()
        };
        assert!(generate_scene(&spec, &mut rng(0)).is_err());
    }
}
