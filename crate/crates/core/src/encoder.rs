//! Video encoder: frame/object fusion, question-type modulation, a stack of
//! multi-head self-attention layers and a pooled two-layer projection to the
//! clip embedding.
//!
//! Batches are laid out as `[batch·n, width]` with each clip's `n` frames in
//! consecutive rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{GpnError, Result};
use crate::layers::{sinusoidal_encoding, Linear, SelfAttention};
use crate::params::{xavier_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const FRAME_DIM: usize = 2048;
pub const OBJECT_DIM: usize = 256;
pub const DEFAULT_FRAMES: usize = 20;

/// Per-clip frame features `[n, frame_dim]` and per-frame mean object
/// features `[n, object_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures {
    pub frames: Tensor,
    pub objects: Tensor,
}

impl VideoFeatures {
    pub fn new(frames: Tensor, objects: Tensor) -> Result<Self> {
        if frames.shape().len() != 2 || objects.shape().len() != 2 {
            return Err(GpnError::shape(
                "video_features",
                format!("frames {:?}, objects {:?}", frames.shape(), objects.shape()),
            ));
        }
        if frames.rows() != objects.rows() {
            return Err(GpnError::shape(
                "video_features",
                format!("frame rows {} != object rows {}", frames.rows(), objects.rows()),
            ));
        }
        if frames.rows() == 0 {
            return Err(GpnError::shape("video_features", "zero frames"));
        }
        if !frames.all_finite() || !objects.all_finite() {
            return Err(GpnError::NonFinite {
                context: "video features".into(),
            });
        }
        Ok(VideoFeatures { frames, objects })
    }

    pub fn n(&self) -> usize {
        self.frames.rows()
    }
}

/// Which parts of the encoder are active. Disabled streams are replaced by
/// the identity of the Hadamard product.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSwitches {
    pub frame_features: bool,
    pub object_features: bool,
    pub controller: bool,
    pub positional_encoding: bool,
}

impl Default for EncoderSwitches {
    fn default() -> Self {
        EncoderSwitches {
            frame_features: true,
            object_features: true,
            controller: true,
            positional_encoding: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub frame_dim: usize,
    pub object_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub question_types: usize,
    pub bias: bool,
    pub residual: bool,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub frame_proj: Linear,
    /// Only present when `d_model != object_dim`.
    pub object_proj: Option<Linear>,
    /// Controller matrix stored transposed, `[types, d_model]`: row `t` is the
    /// embedding of question type `t`.
    pub controller: ParamId,
    pub attention: Vec<SelfAttention>,
    pub pool1: Linear,
    pub pool2: Linear,
}

/// Intermediate values of one encoder pass.
pub struct EncoderOutput {
    pub fused: Var,
    pub source: Var,
    pub layers: Vec<Var>,
    pub pooled: Var,
    pub v_final: Var,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, config: EncoderConfig) -> Result<Self> {
        let d = config.d_model;
        let frame_proj = Linear::new(store, rng, "enc.proj", config.frame_dim, d, config.bias)?;
        let object_proj = if config.object_dim != d {
            Some(Linear::new(
                store,
                rng,
                "enc.obj_proj",
                config.object_dim,
                d,
                config.bias,
            )?)
        } else {
            None
        };
        let controller = store.register("enc.controller", xavier_uniform(rng, config.question_types, d))?;
        let attention = (0..config.layers)
            .map(|i| SelfAttention::new(store, rng, &format!("enc.sa{i}"), d, config.heads, config.bias))
            .collect::<Result<Vec<_>>>()?;
        let pool1 = Linear::new(store, rng, "enc.p1", d, d, config.bias)?;
        let pool2 = Linear::new(store, rng, "enc.p2", d, d, config.bias)?;
        Ok(Encoder {
            config,
            frame_proj,
            object_proj,
            controller,
            attention,
            pool1,
            pool2,
        })
    }

    /// `V^S = proj(V^F) ⊙ V^O`, per frame.
    pub fn fuse(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        frames: Var,
        objects: Var,
        sw: EncoderSwitches,
    ) -> Result<Var> {
        let (fr, ob) = (g.value(frames), g.value(objects));
        if fr.rows() != ob.rows() {
            return Err(GpnError::shape(
                "fuse_features",
                format!("frame rows {} != object rows {}", fr.rows(), ob.rows()),
            ));
        }
        let frame_part = if sw.frame_features {
            Some(self.frame_proj.forward(g, store, frames)?)
        } else {
            None
        };
        let object_part = if sw.object_features {
            Some(match &self.object_proj {
                Some(p) => p.forward(g, store, objects)?,
                None => objects,
            })
        } else {
            None
        };
        match (frame_part, object_part) {
            (Some(f), Some(o)) => g.mul(f, o),
            (Some(f), None) => Ok(f),
            (None, Some(o)) => Ok(o),
            (None, None) => {
                let rows = g.value(frames).rows();
                Ok(g.constant(Tensor::ones(&[rows, self.config.d_model])))
            }
        }
    }

    /// `V^src = V^S ⊙ C_t`, the same type column for every frame of a clip.
    pub fn apply_controller(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        fused: Var,
        types: &[usize],
        n: usize,
    ) -> Result<Var> {
        let table = g.param(store, self.controller);
        let cols = g.gather(table, types)?;
        let per_frame = g.repeat_rows(cols, n)?;
        g.mul(fused, per_frame)
    }

    /// Self-attention stack over `V^0 = source (+ PE)`. Returns `V^1..V^L`.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        source: Var,
        n: usize,
        positional: bool,
    ) -> Result<Vec<Var>> {
        let mut x = source;
        if positional {
            let rows = g.value(source).rows();
            let pe = sinusoidal_encoding(n, self.config.d_model);
            let reps: Vec<&Tensor> = std::iter::repeat(&pe).take(rows / n).collect();
            let pe = g.constant(Tensor::vstack(&reps)?);
            x = g.add(x, pe)?;
        }
        let mut outputs = Vec::with_capacity(self.attention.len());
        for sa in &self.attention {
            let mut y = sa.forward(g, store, x, n)?;
            if self.config.residual {
                let sum = g.add(x, y)?;
                y = g.layer_norm(sum)?;
            }
            outputs.push(y);
            x = y;
        }
        Ok(outputs)
    }

    /// Mean-pool each clip's last-layer rows, then the two-layer projection.
    pub fn clip_embedding(&self, g: &mut Graph, store: &ParamStore, last: Var, n: usize) -> Result<(Var, Var)> {
        let pooled = g.mean_rows(last, n)?;
        let h = self.pool1.forward(g, store, pooled)?;
        let h = g.relu(h);
        let v_final = self.pool2.forward(g, store, h)?;
        Ok((pooled, v_final))
    }

    /// Full pass for a batch: `frames [b·n, frame_dim]`, `objects [b·n, object_dim]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        frames: Var,
        objects: Var,
        types: &[usize],
        n: usize,
        sw: EncoderSwitches,
    ) -> Result<EncoderOutput> {
        let rows = g.value(frames).rows();
        if n == 0 || rows != types.len() * n {
            return Err(GpnError::shape(
                "encoder",
                format!("{rows} rows for {} clips of {n} frames", types.len()),
            ));
        }
        if let Some(&bad) = types.iter().find(|&&t| t >= self.config.question_types) {
            return Err(GpnError::OutOfRange {
                what: "question type",
                index: bad,
                len: self.config.question_types,
            });
        }
        let fused = self.fuse(g, store, frames, objects, sw)?;
        let source = if sw.controller {
            self.apply_controller(g, store, fused, types, n)?
        } else {
            fused
        };
        let layers = self.encode(g, store, source, n, sw.positional_encoding)?;
        let last = *layers.last().unwrap_or(&source);
        let (pooled, v_final) = self.clip_embedding(g, store, last, n)?;
        Ok(EncoderOutput {
            fused,
            source,
            layers,
            pooled,
            v_final,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(residual: bool) -> (ParamStore, Encoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let enc = Encoder::new(
            &mut store,
            &mut rng,
            EncoderConfig {
                d_model: 8,
                frame_dim: 12,
                object_dim: 8,
                layers: 2,
                heads: 2,
                question_types: 3,
                bias: true,
                residual,
            },
        )
        .unwrap();
        (store, enc)
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn all_ones_objects_pass_projection_through() {
        let (store, enc) = small(false);
        let mut g = Graph::new();
        let f = g.constant(random(4, 12, 1));
        let o = g.constant(Tensor::ones(&[4, 8]));
        let vs = enc.fuse(&mut g, &store, f, o, EncoderSwitches::default()).unwrap();
        let proj = enc.frame_proj.forward(&mut g, &store, f).unwrap();
        assert_eq!(g.value(vs), g.value(proj));
    }

    #[test]
    fn zero_frames_without_bias_fuse_to_zero() {
        let (mut store, enc) = small(false);
        let b = enc.frame_proj.b.unwrap();
        assert!(store.value(b).data().iter().all(|&x| x == 0.0));
        store.value_mut(b).data_mut().fill(0.0);
        let mut g = Graph::new();
        let f = g.constant(Tensor::zeros(&[3, 12]));
        let o = g.constant(random(3, 8, 2));
        let vs = enc.fuse(&mut g, &store, f, o, EncoderSwitches::default()).unwrap();
        assert!(g.value(vs).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mismatched_rows_rejected() {
        let (store, enc) = small(false);
        let mut g = Graph::new();
        let f = g.constant(random(4, 12, 1));
        let o = g.constant(random(3, 8, 1));
        assert!(enc.fuse(&mut g, &store, f, o, EncoderSwitches::default()).is_err());
        assert!(VideoFeatures::new(random(4, 12, 1), random(3, 8, 1)).is_err());
    }

    #[test]
    fn controller_of_ones_is_identity_and_zeros_annihilate() {
        let (mut store, enc) = small(false);
        let vs_t = random(5, 8, 3);
        let mut ctrl = store.value(enc.controller).clone();
        for c in 0..8 {
            ctrl.data_mut()[8 + c] = 1.0;
            ctrl.data_mut()[16 + c] = 0.0;
        }
        *store.value_mut(enc.controller) = ctrl;
        let mut g = Graph::new();
        let vs = g.constant(vs_t.clone());
        let ones = enc.apply_controller(&mut g, &store, vs, &[1], 5).unwrap();
        assert_eq!(g.value(ones), &vs_t);
        let zeros = enc.apply_controller(&mut g, &store, vs, &[2], 5).unwrap();
        assert!(g.value(zeros).data().iter().all(|&x| x == 0.0));
        assert!(enc.apply_controller(&mut g, &store, vs, &[3], 5).is_err());
    }

    #[test]
    fn zero_pool_weights_give_zero_embedding() {
        let (mut store, enc) = small(false);
        store.value_mut(enc.pool1.w).data_mut().fill(0.0);
        let mut g = Graph::new();
        let f = g.constant(random(6, 12, 4));
        let o = g.constant(random(6, 8, 5));
        let out = enc
            .forward(&mut g, &store, f, o, &[0, 2], 3, EncoderSwitches::default())
            .unwrap();
        assert!(g.value(out.v_final).data().iter().all(|&x| x == 0.0));
        assert_eq!(g.value(out.v_final).shape(), &[2, 8]);
    }

    #[test]
    fn residual_variant_runs() {
        let (store, enc) = small(true);
        let mut g = Graph::new();
        let f = g.constant(random(6, 12, 4));
        let o = g.constant(random(6, 8, 5));
        let out = enc
            .forward(&mut g, &store, f, o, &[0, 1], 3, EncoderSwitches::default())
            .unwrap();
        assert!(g.value(out.v_final).all_finite());
    }
}
