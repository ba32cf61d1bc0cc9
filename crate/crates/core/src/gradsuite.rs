//! The gradient-check battery run by `gpn gradcheck`: every primitive on
//! random inputs, then the full training loss of a small model with respect
//! to every parameter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::VideoFeatures;
use crate::error::Result;
use crate::gradcheck::{check_inputs, check_params, Difference, GradCheckReport};
use crate::jqag::{cross_entropy_graph, TokenSequence, NUM_SPECIAL};
use crate::layers::{sinusoidal_encoding, LstmCell};
use crate::model::{Ablation, Batch, Gpn, ModelConfig};
use crate::params::ParamStore;
use crate::pretester::{kl_graph, LossWeights};
use crate::synthdata::derive_seed;
use crate::tensor::Tensor;

/// Central-difference step for the primitive checks.
pub const STEP: f64 = 1e-5;
/// Five-point step for the full-loss check. Its gradients span many orders
/// of magnitude, and a smaller step drowns the tiniest in loss roundoff.
pub const FULL_STEP: f64 = 2e-2;
/// Tolerance for ops with kinks or branches.
pub const TOLERANCE: f64 = 1e-4;
/// Tolerance for smooth ops.
pub const SMOOTH_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub name: String,
    pub smooth: bool,
    pub tolerance: f64,
    pub max_relative_error: f64,
    pub worst: Option<(String, usize)>,
    pub worst_values: Option<(f64, f64)>,
    pub coordinates: usize,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

/// Shape of the model used for the end-to-end check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub d_model: usize,
    pub answers: usize,
    pub vocab: usize,
    pub frame_dim: usize,
    pub object_dim: usize,
    pub frames: usize,
    pub batch: usize,
    /// Half-width of the uniform distribution of toy features.
    pub input_scale: f64,
    /// Finite-difference rule for the full-loss check.
    pub difference: Difference,
}

impl Default for ToyModel {
    fn default() -> Self {
        ToyModel {
            d_model: 16,
            answers: 8,
            vocab: 30,
            frame_dim: 24,
            object_dim: 12,
            frames: 4,
            batch: 2,
            input_scale: 1.0,
            difference: Difference::five_point(FULL_STEP),
        }
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Uniform values with magnitude at least 0.1, so a step of `h` never
/// crosses a kink at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn probs(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = random(rng, rows, cols).map(f64::exp);
    for r in 0..rows {
        let s: f64 = t.row_slice(r).iter().sum();
        t.data_mut()[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v /= s);
    }
    t
}

/// `Σ y ⊙ W` for a fixed random `W`, so every output coordinate matters.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, c) = g.value(y).dims2();
    let w = g.constant(random(&mut rng, r, c).reshape(g.value(y).shape())?);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type PrimitiveCheck = (
    &'static str,
    bool,
    Vec<Tensor>,
    Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>,
);

fn primitives(rng: &mut ChaCha8Rng) -> Vec<PrimitiveCheck> {
    let r = |rng: &mut ChaCha8Rng, a, b| random(rng, a, b);
    let mut checks: Vec<PrimitiveCheck> = Vec::new();
    checks.push((
        "matmul",
        true,
        vec![r(rng, 3, 4), r(rng, 4, 5)],
        Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 1)
        }),
    ));
    checks.push((
        "add",
        true,
        vec![r(rng, 3, 4), r(rng, 3, 4)],
        Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y, 2)
        }),
    ));
    checks.push((
        "sub",
        true,
        vec![r(rng, 3, 4), r(rng, 3, 4)],
        Box::new(|g, v| {
            let y = g.sub(v[0], v[1])?;
            project(g, y, 3)
        }),
    ));
    checks.push((
        "hadamard",
        true,
        vec![r(rng, 3, 4), r(rng, 3, 4)],
        Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, 4)
        }),
    ));
    checks.push((
        "add_row",
        true,
        vec![r(rng, 3, 4), r(rng, 1, 4)],
        Box::new(|g, v| {
            let y = g.add_row(v[0], v[1])?;
            project(g, y, 5)
        }),
    ));
    checks.push((
        "scale",
        true,
        vec![r(rng, 3, 4)],
        Box::new(|g, v| {
            let y = g.scale(v[0], -1.7);
            project(g, y, 6)
        }),
    ));
    checks.push((
        "relu",
        false,
        vec![away_from_zero(rng, 3, 4)],
        Box::new(|g, v| {
            let y = g.relu(v[0]);
            project(g, y, 7)
        }),
    ));
    checks.push((
        "sigmoid",
        true,
        vec![r(rng, 3, 4)],
        Box::new(|g, v| {
            let y = g.sigmoid(v[0]);
            project(g, y, 8)
        }),
    ));
    checks.push((
        "tanh",
        true,
        vec![r(rng, 3, 4)],
        Box::new(|g, v| {
            let y = g.tanh(v[0]);
            project(g, y, 9)
        }),
    ));
    checks.push((
        "softmax",
        true,
        vec![r(rng, 3, 5)],
        Box::new(|g, v| {
            let y = g.softmax(v[0])?;
            project(g, y, 10)
        }),
    ));
    checks.push((
        "log_softmax",
        true,
        vec![r(rng, 3, 5)],
        Box::new(|g, v| {
            let y = g.log_softmax(v[0])?;
            project(g, y, 11)
        }),
    ));
    checks.push((
        "log",
        true,
        vec![probs(rng, 3, 5)],
        Box::new(|g, v| {
            let y = g.log_clamped(v[0]);
            project(g, y, 12)
        }),
    ));
    checks.push((
        "mean_rows",
        true,
        vec![r(rng, 6, 3)],
        Box::new(|g, v| {
            let y = g.mean_rows(v[0], 3)?;
            project(g, y, 13)
        }),
    ));
    checks.push((
        "repeat_rows",
        true,
        vec![r(rng, 2, 3)],
        Box::new(|g, v| {
            let y = g.repeat_rows(v[0], 3)?;
            project(g, y, 14)
        }),
    ));
    checks.push((
        "concat_cols",
        true,
        vec![r(rng, 3, 2), r(rng, 3, 4)],
        Box::new(|g, v| {
            let y = g.concat_cols(&[v[0], v[1]])?;
            project(g, y, 15)
        }),
    ));
    checks.push((
        "slice_cols",
        true,
        vec![r(rng, 3, 6)],
        Box::new(|g, v| {
            let y = g.slice_cols(v[0], 1, 4)?;
            project(g, y, 16)
        }),
    ));
    checks.push((
        "transpose",
        true,
        vec![r(rng, 3, 4)],
        Box::new(|g, v| {
            let y = g.transpose(v[0]);
            project(g, y, 17)
        }),
    ));
    checks.push((
        "embedding",
        true,
        vec![r(rng, 6, 4)],
        Box::new(|g, v| {
            let y = g.gather(v[0], &[2, 0, 2, 5])?;
            project(g, y, 18)
        }),
    ));
    checks.push((
        "weighted_pick",
        true,
        vec![r(rng, 3, 4)],
        Box::new(|g, v| g.weighted_pick(v[0], vec![(0, 1, 0.5), (2, 3, -1.5), (0, 1, 2.0)])),
    ));
    checks.push((
        "positional_encoding",
        true,
        vec![r(rng, 5, 6)],
        Box::new(|g, v| {
            let pe = g.constant(sinusoidal_encoding(5, 6));
            let y = g.add(v[0], pe)?;
            let y = g.mul(y, y)?;
            project(g, y, 19)
        }),
    ));
    checks.push((
        "attention",
        true,
        vec![r(rng, 8, 4), r(rng, 8, 4), r(rng, 8, 4)],
        Box::new(|g, v| {
            let y = g.attention(v[0], v[1], v[2], 4, 2)?;
            project(g, y, 20)
        }),
    ));
    checks.push((
        "layer_norm",
        true,
        vec![r(rng, 3, 5)],
        Box::new(|g, v| {
            let y = g.layer_norm(v[0])?;
            project(g, y, 21)
        }),
    ));
    checks.push((
        "softmax_cross_entropy",
        true,
        vec![r(rng, 4, 6)],
        Box::new(|g, v| {
            let p = g.softmax(v[0])?;
            cross_entropy_graph(g, p, &[1, 0, 5, 3])
        }),
    ));
    checks.push((
        "kl_divergence",
        true,
        vec![r(rng, 3, 5), r(rng, 3, 5)],
        Box::new(|g, v| {
            let p = g.softmax(v[0])?;
            let q = g.softmax(v[1])?;
            kl_graph(g, p, q)
        }),
    ));
    checks
}

fn entry(name: &str, smooth: bool, r: GradCheckReport) -> SuiteEntry {
    SuiteEntry {
        name: name.to_string(),
        smooth,
        tolerance: if smooth { SMOOTH_TOLERANCE } else { TOLERANCE },
        max_relative_error: r.max_relative_error,
        worst: r.worst,
        worst_values: r.worst_values,
        coordinates: r.coordinates,
    }
}

/// A batch of random clips, types, answers and questions for `toy`.
pub fn toy_batch(toy: &ToyModel, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let mut feats = Vec::new();
    let mut questions = Vec::new();
    for _ in 0..toy.batch {
        let s = toy.input_scale;
        feats.push(VideoFeatures::new(
            random(rng, toy.frames, toy.frame_dim).map(|v| v * s),
            random(rng, toy.frames, toy.object_dim).map(|v| v * s),
        )?);
        let len = rng.random_range(2..=5);
        let words: Vec<usize> = (0..len).map(|_| rng.random_range(NUM_SPECIAL..toy.vocab)).collect();
        questions.push(TokenSequence::from_words(&words));
    }
    let types: Vec<usize> = (0..toy.batch).map(|_| rng.random_range(0..5)).collect();
    let answers: Vec<usize> = (0..toy.batch).map(|_| rng.random_range(0..toy.answers)).collect();
    Batch::from_examples(
        feats
            .iter()
            .zip(&types)
            .zip(&questions)
            .zip(&answers)
            .map(|(((f, &t), q), &a)| (f, t, q, a)),
    )
}

pub fn toy_config(toy: &ToyModel) -> ModelConfig {
    ModelConfig {
        d_model: toy.d_model,
        frame_dim: toy.frame_dim,
        object_dim: toy.object_dim,
        layers: 2,
        heads: 4,
        lstm_layers: 2,
        question_types: 5,
        answers: toy.answers,
        vocab: toy.vocab,
        ..ModelConfig::default()
    }
}

/// Run every check. `seed` fixes all random inputs and the toy model.
pub fn run_suite(seed: u64, toy: &ToyModel) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, smooth, inputs, f) in primitives(&mut rng) {
        out.push(entry(name, smooth, check_inputs(&inputs, STEP, f)?));
    }

    // LSTM step with respect to its parameters and its recurrent inputs.
    let mut store = ParamStore::new();
    let cell = LstmCell::new(&mut store, &mut rng, "lstm", 3, 4)?;
    // the zero bias would leave the bias gradient check trivial
    for p in store.iter_mut() {
        p.value = random(&mut rng, p.value.rows(), p.value.cols()).reshape(p.value.shape())?;
    }
    let (x, h, c) = (random(&mut rng, 2, 3), random(&mut rng, 2, 4), random(&mut rng, 2, 4));
    let step = |g: &mut Graph, s: &ParamStore, x: Var, h: Var, c: Var| -> Result<Var> {
        let (h1, c1) = cell.step(g, s, x, h, c)?;
        let both = g.concat_cols(&[h1, c1])?;
        project(g, both, 22)
    };
    let rp = check_params(&mut store, STEP, |g, s| {
        let (xv, hv, cv) = (g.constant(x.clone()), g.constant(h.clone()), g.constant(c.clone()));
        step(g, s, xv, hv, cv)
    })?;
    out.push(entry("lstm_cell_params", true, rp));
    let ri = check_inputs(&[x.clone(), h.clone(), c.clone()], STEP, |g, v| {
        step(g, &store, v[0], v[1], v[2])
    })?;
    out.push(entry("lstm_cell_inputs", true, ri));

    out.push(full_loss_check(seed, toy)?);
    Ok(out)
}

/// A toy model with random biases and a toy batch.
pub fn toy_problem(seed: u64, toy: &ToyModel) -> Result<(Gpn, Batch)> {
    let mut model = Gpn::new(toy_config(toy), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 29, 0));
    // zero biases would leave their checks trivial and park ReLU inputs on the kink
    for p in model.store.iter_mut().filter(|p| p.name.ends_with(".b")) {
        p.value = random(&mut rng, p.value.rows(), p.value.cols()).reshape(p.value.shape())?;
    }
    let batch = toy_batch(toy, &mut rng)?;
    Ok((model, batch))
}

/// The training loss of the toy model with respect to every parameter.
pub fn full_loss_check(seed: u64, toy: &ToyModel) -> Result<SuiteEntry> {
    let (mut model, batch) = toy_problem(seed, toy)?;
    let mut params = std::mem::take(&mut model.store);
    let full = check_params(&mut params, toy.difference, |g, s| {
        model
            .forward_with(g, s, &batch, LossWeights::default(), Ablation::default())
            .map(|f| f.l_total)
    })?;
    Ok(entry("l_total", false, full))
}

pub fn render_table(entries: &[SuiteEntry]) -> String {
    let mut s = format!(
        "{:<24} {:>12} {:>10} {:>8}  {}\n",
        "op", "max_rel_err", "tolerance", "coords", "status"
    );
    for e in entries {
        s += &format!(
            "{:<24} {:>12.3e} {:>10.0e} {:>8}  {}\n",
            e.name,
            e.max_relative_error,
            e.tolerance,
            e.coordinates,
            if e.passed() { "ok" } else { "FAIL" }
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (name, smooth, inputs, f) in primitives(&mut rng) {
            let e = entry(name, smooth, check_inputs(&inputs, STEP, f).unwrap());
            assert!(e.passed(), "{e:?}");
        }
    }

    #[test]
    fn full_loss_passes_on_toy_model() {
        let e = full_loss_check(3, &ToyModel::default()).unwrap();
        assert!(e.passed(), "{e:?}");
        assert!(e.coordinates > 5000);
    }

    #[test]
    fn table_marks_failures() {
        let e = SuiteEntry {
            name: "x".into(),
            smooth: true,
            tolerance: 1e-6,
            max_relative_error: 1e-3,
            worst: None,
            worst_values: None,
            coordinates: 1,
        };
        assert!(render_table(&[e]).contains("FAIL"));
    }
}
