use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{derive_seed, LatentScene, ACTIONS, CATEGORIES, COLORS, NUM_FRAMES, TAGS};
use crate::encoder::{VideoFeatures, FRAME_DIM, OBJECT_DIM};
use crate::error::{GpnError, Result};
use crate::tensor::Tensor;

pub const PHASE_DIM: usize = 8;
/// tag, primary category/color/action, category counts, frame phase.
pub const DESCRIPTOR_DIM: usize =
    TAGS.len() + CATEGORIES.len() + COLORS.len() + ACTIONS.len() + CATEGORIES.len() + PHASE_DIM;

const PROJECTION_STREAM: u64 = 2;
const PROTOTYPE_STREAM: u64 = 3;
const NOISE_STREAM: u64 = 4;

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

/// Frozen projection and prototype tables for one corpus seed.
#[derive(Clone, Debug)]
pub struct Renderer {
    corpus_seed: u64,
    /// `[DESCRIPTOR_DIM, FRAME_DIM]`
    projection: Vec<f64>,
    categories: Vec<Vec<f64>>,
    colors: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
}

impl Renderer {
    pub fn new(corpus_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(corpus_seed, PROJECTION_STREAM, 0));
        let projection = gaussian(&mut rng, DESCRIPTOR_DIM * FRAME_DIM, 1.0 / 8f64.sqrt());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(corpus_seed, PROTOTYPE_STREAM, 0));
        let mut table = |n: usize| (0..n).map(|_| gaussian(&mut rng, OBJECT_DIM, 1.0)).collect();
        Renderer {
            corpus_seed,
            projection,
            categories: table(CATEGORIES.len()),
            colors: table(COLORS.len()),
            actions: table(ACTIONS.len()),
        }
    }

    pub fn corpus_seed(&self) -> u64 {
        self.corpus_seed
    }

    /// Prototype embedding of one (category, color, action) triple.
    pub fn prototype(&self, category: usize, color: usize, action: usize) -> Vec<f64> {
        let s = 1.0 / 3f64.sqrt();
        (0..OBJECT_DIM)
            .map(|i| (self.categories[category][i] + self.colors[color][i] + self.actions[action][i]) * s)
            .collect()
    }

    /// Scene descriptor for one frame, before projection.
    pub fn descriptor(&self, scene: &LatentScene, frame: usize) -> Vec<f64> {
        let mut d = vec![0.0; DESCRIPTOR_DIM];
        d[scene.tag] = 1.0;
        let mut off = TAGS.len();
        if let Some(p) = scene.objects.first() {
            d[off + p.category] = 1.0;
            d[off + CATEGORIES.len() + p.color] = 1.0;
            d[off + CATEGORIES.len() + COLORS.len() + p.action] = 1.0;
        }
        off += CATEGORIES.len() + COLORS.len() + ACTIONS.len();
        for o in &scene.objects {
            d[off + o.category] += 1.0;
        }
        off += CATEGORIES.len();
        let t = frame as f64 / NUM_FRAMES as f64;
        for k in 0..PHASE_DIM / 2 {
            let w = std::f64::consts::PI * (1 << k) as f64 * t;
            d[off + 2 * k] = w.sin();
            d[off + 2 * k + 1] = w.cos();
        }
        d
    }

    /// Frame features carry the projected descriptor plus Gaussian noise;
    /// object features are the mean prototype over objects visible in each
    /// frame (zero when none is).
    pub fn render(&self, scene: &LatentScene, noise_sigma: f64) -> Result<VideoFeatures> {
        if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
            return Err(GpnError::Config(format!("noise_sigma must be >= 0, got {noise_sigma}")));
        }
        scene.validate()?;
        let mut noise = ChaCha8Rng::seed_from_u64(derive_seed(self.corpus_seed, NOISE_STREAM, scene.scene_id));
        let mut frames = vec![0.0; NUM_FRAMES * FRAME_DIM];
        for f in 0..NUM_FRAMES {
            let desc = self.descriptor(scene, f);
            let row = &mut frames[f * FRAME_DIM..(f + 1) * FRAME_DIM];
            for (k, &v) in desc.iter().enumerate() {
                if v != 0.0 {
                    let p = &self.projection[k * FRAME_DIM..(k + 1) * FRAME_DIM];
                    for (r, &w) in row.iter_mut().zip(p) {
                        *r += v * w;
                    }
                }
            }
            if noise_sigma > 0.0 {
                for r in row.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut noise);
                    *r += noise_sigma * z;
                }
            }
        }
        let protos: Vec<Vec<f64>> = scene
            .objects
            .iter()
            .map(|o| self.prototype(o.category, o.color, o.action))
            .collect();
        let mut objects = vec![0.0; NUM_FRAMES * OBJECT_DIM];
        for f in 0..NUM_FRAMES {
            let visible: Vec<&Vec<f64>> = scene
                .objects
                .iter()
                .zip(&protos)
                .filter(|(o, _)| o.visible(f))
                .map(|(_, p)| p)
                .collect();
            if visible.is_empty() {
                continue;
            }
            let row = &mut objects[f * OBJECT_DIM..(f + 1) * OBJECT_DIM];
            if visible.len() == 1 {
                row.copy_from_slice(visible[0]);
                continue;
            }
            let inv = 1.0 / visible.len() as f64;
            for p in visible {
                for (r, &v) in row.iter_mut().zip(p) {
                    *r += v * inv;
                }
            }
        }
        VideoFeatures::new(
            Tensor::matrix(NUM_FRAMES, FRAME_DIM, frames)?,
            Tensor::matrix(NUM_FRAMES, OBJECT_DIM, objects)?,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::{gen_scene, SceneObject};
    use super::*;

    #[test]
    fn noiseless_rendering_is_deterministic() {
        let r = Renderer::new(11);
        let s = gen_scene(11, 4);
        assert_eq!(r.render(&s, 0.0).unwrap(), Renderer::new(11).render(&s, 0.0).unwrap());
        assert_eq!(r.render(&s, 0.1).unwrap(), r.render(&s, 0.1).unwrap());
    }

    #[test]
    fn single_object_rows_equal_prototype() {
        let r = Renderer::new(5);
        let s = LatentScene {
            scene_id: 1,
            objects: vec![SceneObject {
                category: 3,
                color: 2,
                action: 6,
                start: 0,
                end: NUM_FRAMES,
            }],
            tag: 1,
        };
        let f = r.render(&s, 0.1).unwrap();
        let p = r.prototype(3, 2, 6);
        for i in 0..NUM_FRAMES {
            assert_eq!(f.objects.row_slice(i), &p[..]);
        }
        assert_eq!(f.frames.shape(), &[NUM_FRAMES, FRAME_DIM]);
        assert_eq!(f.objects.shape(), &[NUM_FRAMES, OBJECT_DIM]);
    }

    #[test]
    fn tag_changes_frames_only() {
        let r = Renderer::new(2);
        let a = gen_scene(2, 9);
        let mut b = a.clone();
        b.tag = (a.tag + 1) % TAGS.len();
        let (fa, fb) = (r.render(&a, 0.0).unwrap(), r.render(&b, 0.0).unwrap());
        assert_ne!(fa.frames, fb.frames);
        assert_eq!(fa.objects, fb.objects);
    }

    #[test]
    fn negative_noise_rejected() {
        assert!(Renderer::new(0).render(&gen_scene(0, 0), -0.1).is_err());
    }
}
