//! The assembled generator-pretester network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::{Encoder, EncoderConfig, EncoderSwitches, VideoFeatures, FRAME_DIM, OBJECT_DIM};
use crate::error::{GpnError, Result};
use crate::jqag::{cross_entropy_graph, AnswerDistribution, DecodeMode, Jqag, JqagConfig, TokenSequence};
use crate::params::ParamStore;
use crate::pretester::{consistency_graph, tc_graph, KlDirection, LossReport, LossWeights, Pretester};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub frame_dim: usize,
    pub object_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub lstm_layers: usize,
    pub question_types: usize,
    pub answers: usize,
    pub vocab: usize,
    pub bias: bool,
    pub positional_encoding: bool,
    pub transformer_residual: bool,
    pub init_all_layers: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 256,
            frame_dim: FRAME_DIM,
            object_dim: OBJECT_DIM,
            layers: 2,
            heads: 4,
            lstm_layers: 2,
            question_types: 5,
            answers: 32,
            vocab: 200,
            bias: true,
            positional_encoding: true,
            transformer_residual: false,
            init_all_layers: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("frame_dim", self.frame_dim),
            ("object_dim", self.object_dim),
            ("heads", self.heads),
            ("lstm_layers", self.lstm_layers),
            ("question_types", self.question_types),
            ("answers", self.answers),
            ("vocab", self.vocab),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(GpnError::Config(format!("model.{name} must be positive")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(GpnError::Config(format!(
                "model.d_model ({}) must be divisible by model.heads ({})",
                self.d_model, self.heads
            )));
        }
        if self.vocab <= crate::jqag::NUM_SPECIAL {
            return Err(GpnError::Config("model.vocab must exceed the special tokens".into()));
        }
        Ok(())
    }
}

/// The ablation axes of the study plus the two loss-shape switches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub no_pretester: bool,
    pub no_controller: bool,
    pub no_frame_features: bool,
    pub no_object_features: bool,
    pub detach_proposal: bool,
    pub kl_direction: KlDirection,
}

impl Ablation {
    pub fn switches(&self, positional_encoding: bool) -> EncoderSwitches {
        EncoderSwitches {
            frame_features: !self.no_frame_features,
            object_features: !self.no_object_features,
            controller: !self.no_controller,
            positional_encoding,
        }
    }
}

/// A training batch: `b` clips of `n` frames each.
#[derive(Clone, Debug)]
pub struct Batch {
    pub frames: Tensor,
    pub objects: Tensor,
    pub n: usize,
    pub types: Vec<usize>,
    pub questions: Vec<TokenSequence>,
    pub answers: Vec<usize>,
}

impl Batch {
    pub fn from_examples<'a>(
        items: impl IntoIterator<Item = (&'a VideoFeatures, usize, &'a TokenSequence, usize)>,
    ) -> Result<Self> {
        let mut frames = Vec::new();
        let mut objects = Vec::new();
        let mut types = Vec::new();
        let mut questions = Vec::new();
        let mut answers = Vec::new();
        let mut n = None;
        for (feat, ty, q, a) in items {
            match n {
                None => n = Some(feat.n()),
                Some(k) if k != feat.n() => {
                    return Err(GpnError::shape(
                        "batch",
                        format!("clips with {k} and {} frames", feat.n()),
                    ))
                }
                _ => {}
            }
            frames.push(&feat.frames);
            objects.push(&feat.objects);
            types.push(ty);
            questions.push(q.clone());
            answers.push(a);
        }
        let n = n.ok_or_else(|| GpnError::Data("empty batch".into()))?;
        Ok(Batch {
            frames: Tensor::vstack(&frames)?,
            objects: Tensor::vstack(&objects)?,
            n,
            types,
            questions,
            answers,
        })
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }
}

/// Graph nodes of a training forward pass.
pub struct TrainForward {
    pub v_final: Var,
    pub ap: Var,
    pub aq: Option<Var>,
    pub q_emb: Var,
    pub step_log_probs: Vec<Var>,
    pub l_qg: Var,
    pub l_ap: Var,
    pub l_ans: Option<Var>,
    pub l_c: Option<Var>,
    pub l_tc: Option<Var>,
    pub l_total: Var,
}

/// One generated question-answer pair.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedQa {
    pub question: TokenSequence,
    pub answer: usize,
    pub proposal: AnswerDistribution,
}

#[derive(Clone, Debug)]
pub struct Gpn {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub jqag: Jqag,
    pub pretester: Pretester,
}

impl Gpn {
    /// Fresh model; all initialization draws from one generator seeded by `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(
            &mut store,
            &mut rng,
            EncoderConfig {
                d_model: config.d_model,
                frame_dim: config.frame_dim,
                object_dim: config.object_dim,
                layers: config.layers,
                heads: config.heads,
                question_types: config.question_types,
                bias: config.bias,
                residual: config.transformer_residual,
            },
        )?;
        let jqag = Jqag::new(
            &mut store,
            &mut rng,
            JqagConfig {
                d_model: config.d_model,
                answers: config.answers,
                vocab: config.vocab,
                lstm_layers: config.lstm_layers,
                bias: config.bias,
                init_all_layers: config.init_all_layers,
            },
        )?;
        let pretester = Pretester::new(&mut store, &mut rng, config.d_model, config.answers, config.bias)?;
        Ok(Gpn {
            config,
            store,
            encoder,
            jqag,
            pretester,
        })
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let (fr, ob) = (&batch.frames, &batch.objects);
        if fr.cols() != self.config.frame_dim || ob.cols() != self.config.object_dim {
            return Err(GpnError::shape(
                "gpn",
                format!(
                    "features {:?}/{:?}, model expects {} and {} columns",
                    fr.shape(),
                    ob.shape(),
                    self.config.frame_dim,
                    self.config.object_dim
                ),
            ));
        }
        if let Some(&bad) = batch.answers.iter().find(|&&a| a >= self.config.answers) {
            return Err(GpnError::OutOfRange {
                what: "answer",
                index: bad,
                len: self.config.answers,
            });
        }
        for q in &batch.questions {
            q.validate(self.config.vocab)?;
        }
        Ok(())
    }

    /// Teacher-forced forward with every loss term.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        batch: &Batch,
        weights: LossWeights,
        ablation: Ablation,
    ) -> Result<TrainForward> {
        self.forward_with(g, &self.store, batch, weights, ablation)
    }

    /// [`Gpn::forward_train`] reading parameters from `store`, which must
    /// have this model's layout.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
        weights: LossWeights,
        ablation: Ablation,
    ) -> Result<TrainForward> {
        weights.validate()?;
        self.check_batch(batch)?;
        let frames = g.constant(batch.frames.clone());
        let objects = g.constant(batch.objects.clone());
        let sw = ablation.switches(self.config.positional_encoding);
        let enc = self
            .encoder
            .forward(g, store, frames, objects, &batch.types, batch.n, sw)?;
        let (_, ap) = self.jqag.propose_answer(g, store, enc.v_final)?;
        let l_ap = cross_entropy_graph(g, ap, &batch.answers)?;
        let state = self.jqag.init_decoder(g, store, enc.v_final, ap)?;
        let decoded = self
            .jqag
            .generate_question(g, store, &state, DecodeMode::TeacherForced(&batch.questions))?;
        let l_qg = self.jqag.question_loss_graph(g, &decoded)?;

        let (aq, l_ans, l_c, l_tc) = if ablation.no_pretester {
            (None, None, None, None)
        } else {
            let (_, aq) = self.pretester.pretest(g, store, decoded.q_emb)?;
            let l_ans = cross_entropy_graph(g, aq, &batch.answers)?;
            let l_c = consistency_graph(g, aq, ap, ablation.kl_direction, ablation.detach_proposal)?;
            let l_tc = tc_graph(g, l_c, l_ans, weights)?;
            (Some(aq), Some(l_ans), Some(l_c), Some(l_tc))
        };
        let l_total = match l_tc {
            Some(tc) => {
                let s = g.add(tc, l_qg)?;
                g.add(s, l_ap)?
            }
            None => g.add(l_qg, l_ap)?,
        };
        Ok(TrainForward {
            v_final: enc.v_final,
            ap,
            aq,
            q_emb: decoded.q_emb,
            step_log_probs: decoded.step_log_probs,
            l_qg,
            l_ap,
            l_ans,
            l_c,
            l_tc,
            l_total,
        })
    }

    pub fn report(g: &Graph, f: &TrainForward, weights: LossWeights) -> LossReport {
        let get = |v: Var| g.value(v).item();
        LossReport {
            l_qg: get(f.l_qg),
            l_ap: get(f.l_ap),
            l_ans: f.l_ans.map(get),
            l_c: f.l_c.map(get),
            l_tc: f.l_tc.map(get),
            l_total: get(f.l_total),
            lambda_c: weights.lambda_c,
            lambda_a: weights.lambda_a,
        }
    }

    /// Forward, backward and gradient accumulation for one batch.
    pub fn loss_and_grad(&mut self, batch: &Batch, weights: LossWeights, ablation: Ablation) -> Result<LossReport> {
        let mut g = Graph::new();
        let f = self.forward_train(&mut g, batch, weights, ablation)?;
        let report = Self::report(&g, &f, weights);
        let grads = g.backward(f.l_total)?;
        self.store.accumulate(&grads);
        Ok(report)
    }

    /// Answer proposals for a batch without decoding, `[b, answers]`.
    pub fn propose(&self, batch: &Batch, ablation: Ablation) -> Result<Tensor> {
        let mut g = Graph::new();
        let frames = g.constant(batch.frames.clone());
        let objects = g.constant(batch.objects.clone());
        let sw = ablation.switches(self.config.positional_encoding);
        let enc = self
            .encoder
            .forward(&mut g, &self.store, frames, objects, &batch.types, batch.n, sw)?;
        let (_, ap) = self.jqag.propose_answer(&mut g, &self.store, enc.v_final)?;
        Ok(g.value(ap).clone())
    }

    /// Propose an answer, then greedily decode a question for each clip.
    pub fn generate(
        &self,
        features: &[&VideoFeatures],
        types: &[usize],
        max_len: usize,
        ablation: Ablation,
    ) -> Result<Vec<GeneratedQa>> {
        if features.len() != types.len() || features.is_empty() {
            return Err(GpnError::shape(
                "generate",
                format!("{} clips, {} types", features.len(), types.len()),
            ));
        }
        let n = features[0].n();
        if features.iter().any(|f| f.n() != n) {
            return Err(GpnError::shape("generate", "clips differ in frame count"));
        }
        let mut g = Graph::new();
        let frames = g.constant(Tensor::vstack(&features.iter().map(|f| &f.frames).collect::<Vec<_>>())?);
        let objects = g.constant(Tensor::vstack(
            &features.iter().map(|f| &f.objects).collect::<Vec<_>>(),
        )?);
        let sw = ablation.switches(self.config.positional_encoding);
        let enc = self
            .encoder
            .forward(&mut g, &self.store, frames, objects, types, n, sw)?;
        let (_, ap) = self.jqag.propose_answer(&mut g, &self.store, enc.v_final)?;
        let state = self.jqag.init_decoder(&mut g, &self.store, enc.v_final, ap)?;
        let decoded = self
            .jqag
            .generate_question(&mut g, &self.store, &state, DecodeMode::Greedy { max_len })?;
        let probs = g.value(ap);
        decoded
            .tokens
            .into_iter()
            .enumerate()
            .map(|(b, question)| {
                let row = probs.row_slice(b).to_vec();
                let answer = crate::jqag::argmax(&row);
                Ok(GeneratedQa {
                    question,
                    answer,
                    proposal: AnswerDistribution::new(row)?,
                })
            })
            .collect()
    }

    /// Parameter names whose subgraph the ablation removes.
    pub fn disabled_params(&self, ablation: Ablation) -> Vec<String> {
        self.store
            .iter()
            .map(|(_, p)| p.name.clone())
            .filter(|name| {
                (ablation.no_pretester && name.starts_with("pt."))
                    || (ablation.no_controller && name == "enc.controller")
                    || (ablation.no_frame_features && name.starts_with("enc.proj."))
                    || (ablation.no_object_features && name.starts_with("enc.obj_proj."))
            })
            .collect()
    }
}
