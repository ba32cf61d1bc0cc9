//! Training loop, evaluation and the ablation harness.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::error::{GpnError, Result};
use crate::jqag::{argmax, PAD};
use crate::metrics::{
    answerability_report, bleu, cider, qa_accuracy, rouge_l, AnswerabilityReport, EvalReport, GeneratedPair, Verdict,
};
use crate::model::{Ablation, Batch, Gpn, ModelConfig};
use crate::optim::{AdamConfig, AdamState};
use crate::pretester::{LossReport, LossWeights};
use crate::synthdata::{derive_seed, Corpus, SynthExample, Vocabulary, QUESTION_TYPES};

const BATCH_STREAM: u64 = 17;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub max_steps: usize,
    pub validate_every: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            batch_size: 32,
            max_steps: 200_000,
            validate_every: 5_000,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            ablation: Ablation::default(),
            seed: 1,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(GpnError::Config("train.batch_size must be positive".into()));
        }
        if self.validate_every == 0 || self.max_steps < self.validate_every {
            return Err(GpnError::Config(format!(
                "need max_steps ({}) >= validate_every ({}) >= 1",
                self.max_steps, self.validate_every
            )));
        }
        self.adam.validate()?;
        self.weights.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: usize,
    pub l_total: f64,
    pub improved: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub steps: Vec<StepRecord>,
    pub validations: Vec<ValidationRecord>,
    /// Step of the validation with the lowest `L^total`.
    pub best_step: Option<usize>,
    pub best_checkpoint: Option<PathBuf>,
}

impl RunRecord {
    /// One JSON object per line: steps, then validations, then a summary.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for s in &self.steps {
            serde_json::to_writer(
                &mut w,
                &serde_json::json!({"kind": "step", "step": s.step, "loss": s.loss}),
            )?;
            w.write_all(b"\n")?;
        }
        for v in &self.validations {
            let mut obj = serde_json::to_value(v)?;
            obj["kind"] = "validation".into();
            serde_json::to_writer(&mut w, &obj)?;
            w.write_all(b"\n")?;
        }
        serde_json::to_writer(
            &mut w,
            &serde_json::json!({"kind": "best", "step": self.best_step, "checkpoint": self.best_checkpoint}),
        )?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

pub struct TrainOutcome {
    /// Parameters after the last step.
    pub model: Gpn,
    /// Parameters at the best validation.
    pub best: Option<Checkpoint>,
    pub record: RunRecord,
}

pub fn batch_of(examples: &[&SynthExample]) -> Result<Batch> {
    Batch::from_examples(
        examples
            .iter()
            .map(|e| (e.features.as_ref(), e.question_type, &e.question, e.answer)),
    )
}

/// Checkpoint metadata that identifies the model shape and vocabulary.
pub fn checkpoint_for(model: &Gpn, vocab: &Vocabulary, step: usize) -> Result<Checkpoint> {
    let mut ck = Checkpoint::from_store(&model.store);
    ck.meta.insert("model".into(), serde_json::to_string(&model.config)?);
    ck.meta.insert("vocab.words".into(), vocab.words().join(" "));
    ck.meta.insert("vocab.answers".into(), vocab.answers().join(" "));
    ck.meta.insert("step".into(), step.to_string());
    Ok(ck)
}

/// Rebuild a model from a checkpoint, rejecting a vocabulary that differs
/// from the one it was trained with.
pub fn model_from_checkpoint(ck: &Checkpoint, vocab: &Vocabulary) -> Result<Gpn> {
    let words = ck.meta.get("vocab.words").map(String::as_str).unwrap_or("");
    let answers = ck.meta.get("vocab.answers").map(String::as_str).unwrap_or("");
    if words != vocab.words().join(" ") || answers != vocab.answers().join(" ") {
        return Err(GpnError::Data(
            "checkpoint vocabulary does not match the corpus vocabulary".into(),
        ));
    }
    let cfg: ModelConfig = serde_json::from_str(
        ck.meta
            .get("model")
            .ok_or_else(|| GpnError::Data("checkpoint has no model config".into()))?,
    )?;
    if cfg.vocab != vocab.len() || cfg.answers != vocab.num_answers() {
        return Err(GpnError::Data(format!(
            "checkpoint model has vocab/answers {}/{} but the vocabulary has {}/{}",
            cfg.vocab,
            cfg.answers,
            vocab.len(),
            vocab.num_answers()
        )));
    }
    let mut model = Gpn::new(cfg, 0)?;
    ck.load_into(&mut model.store)?;
    Ok(model)
}

/// Mean teacher-forced `L^total` and `L^qg` plus token accuracy.
pub fn teacher_forced_stats(
    model: &Gpn,
    examples: &[&SynthExample],
    batch_size: usize,
    weights: LossWeights,
    ablation: Ablation,
) -> Result<(f64, f64, f64)> {
    let (mut total, mut qg, mut hits, mut tokens) = (0.0, 0.0, 0usize, 0usize);
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch = batch_of(chunk)?;
        let mut g = Graph::new();
        let f = model.forward_train(&mut g, &batch, weights, ablation)?;
        let w = chunk.len() as f64;
        total += g.value(f.l_total).item() * w;
        qg += g.value(f.l_qg).item() * w;
        for (t, &lp) in f.step_log_probs.iter().enumerate() {
            let lp = g.value(lp);
            for (b, q) in batch.questions.iter().enumerate() {
                if let Some(&tok) = q.tokens().get(t).filter(|&&tok| tok != PAD) {
                    tokens += 1;
                    hits += usize::from(argmax(lp.row_slice(b)) == tok);
                }
            }
        }
    }
    let n = examples.len().max(1) as f64;
    Ok((total / n, qg / n, hits as f64 / tokens.max(1) as f64))
}

pub fn train(
    model_cfg: ModelConfig,
    settings: &TrainSettings,
    train_set: &Corpus,
    valid_set: Option<&Corpus>,
    vocab: &Vocabulary,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    settings.validate()?;
    if train_set.is_empty() {
        return Err(GpnError::Data("training corpus is empty".into()));
    }
    if model_cfg.vocab != vocab.len() || model_cfg.answers != vocab.num_answers() {
        return Err(GpnError::Config(format!(
            "model vocab/answers {}/{} do not match corpus vocabulary {}/{}",
            model_cfg.vocab,
            model_cfg.answers,
            vocab.len(),
            vocab.num_answers()
        )));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut model = Gpn::new(model_cfg, settings.seed)?;
    let mut adam = AdamState::for_store(settings.adam, &model.store)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(settings.seed, BATCH_STREAM, 0));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();
    let valid: Vec<&SynthExample> = valid_set.map(|c| c.examples.iter().collect()).unwrap_or_default();

    let mut record = RunRecord::default();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut last_finite: Option<LossReport> = None;
    for step in 1..=settings.max_steps {
        let mut picked = Vec::with_capacity(settings.batch_size);
        while picked.len() < settings.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            picked.push(&train_set.examples[order[cursor]]);
            cursor += 1;
        }
        let batch = batch_of(&picked)?;
        model.store.zero_grad();
        let report = model.loss_and_grad(&batch, settings.weights, settings.ablation)?;
        if !report.all_finite() {
            let last = last_finite
                .as_ref()
                .map(|r| serde_json::to_string(r).unwrap_or_default())
                .unwrap_or_else(|| "none".into());
            return Err(GpnError::Diverged {
                step,
                reason: format!("non-finite loss; last finite report: {last}"),
            });
        }
        if step == 1 {
            audit_gradients(&model, settings.ablation)?;
        }
        adam.step_store(&mut model.store)?;
        last_finite = Some(report.clone());
        record.steps.push(StepRecord { step, loss: report });

        if step % settings.validate_every == 0 || step == settings.max_steps {
            let l_total = if valid.is_empty() {
                record.steps.last().map(|s| s.loss.l_total).unwrap_or(f64::INFINITY)
            } else {
                teacher_forced_stats(&model, &valid, settings.batch_size, settings.weights, settings.ablation)?.0
            };
            let improved = best.as_ref().map_or(true, |(b, _)| l_total < *b);
            let mut checkpoint = None;
            if improved {
                let ck = checkpoint_for(&model, vocab, step)?;
                if let Some(dir) = out_dir {
                    let path = dir.join(format!("checkpoint-{step}.gpn"));
                    ck.save(&path)?;
                    checkpoint = Some(path);
                    record.best_checkpoint = checkpoint.clone();
                }
                record.best_step = Some(step);
                best = Some((l_total, ck));
            }
            record.validations.push(ValidationRecord {
                step,
                l_total,
                improved,
                checkpoint,
            });
        }
    }
    if let Some(dir) = out_dir {
        record.write_jsonl(dir.join("run_record.jsonl"))?;
    }
    Ok(TrainOutcome {
        model,
        best: best.map(|(_, ck)| ck),
        record,
    })
}

/// Every parameter must have received a gradient unless the ablation
/// removes its subgraph.
fn audit_gradients(model: &Gpn, ablation: Ablation) -> Result<()> {
    let disabled = model.disabled_params(ablation);
    let missing: Vec<&str> = model
        .store
        .untouched()
        .into_iter()
        .filter(|n| !disabled.iter().any(|d| d == n))
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(GpnError::Data(format!(
            "parameters without gradient at step 1: {}",
            missing.join(", ")
        )))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub batch_size: usize,
    pub max_question_len: usize,
    pub weights: LossWeights,
    pub ablation: Ablation,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            batch_size: 64,
            max_question_len: 12,
            weights: LossWeights::default(),
            ablation: Ablation::default(),
        }
    }
}

/// One greedily generated pair with its reference and oracle verdict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedRecord {
    pub scene_id: u64,
    pub question_type: usize,
    pub question: String,
    pub answer: String,
    pub reference_question: String,
    pub reference_answer: String,
    pub verdict: Verdict,
}

fn check_vocab(model: &Gpn, vocab: &Vocabulary, corpus: &Corpus) -> Result<()> {
    if corpus.is_empty() {
        return Err(GpnError::Data("evaluation corpus is empty".into()));
    }
    if model.config.vocab != vocab.len() || model.config.answers != vocab.num_answers() {
        return Err(GpnError::Data(
            "model vocabulary does not match the corpus vocabulary".into(),
        ));
    }
    Ok(())
}

fn generate_pairs(model: &Gpn, corpus: &Corpus, opts: &EvalOptions) -> Result<Vec<GeneratedPair>> {
    let mut pairs = Vec::with_capacity(corpus.len());
    for chunk in corpus.examples.chunks(opts.batch_size.max(1)) {
        let feats: Vec<_> = chunk.iter().map(|e| e.features.as_ref()).collect();
        let types: Vec<usize> = chunk.iter().map(|e| e.question_type).collect();
        let out = model.generate(&feats, &types, opts.max_question_len, opts.ablation)?;
        pairs.extend(chunk.iter().zip(out).map(|(e, qa)| GeneratedPair {
            scene_id: e.scene_id,
            question: qa.question,
            answer: qa.answer,
        }));
    }
    Ok(pairs)
}

fn records(
    vocab: &Vocabulary,
    corpus: &Corpus,
    pairs: &[GeneratedPair],
    verdicts: Vec<Verdict>,
) -> Vec<GeneratedRecord> {
    corpus
        .examples
        .iter()
        .zip(pairs)
        .zip(verdicts)
        .map(|((e, p), verdict)| GeneratedRecord {
            scene_id: e.scene_id,
            question_type: e.question_type,
            question: vocab.decode(&p.question),
            answer: vocab.answer(p.answer).unwrap_or("?").to_string(),
            reference_question: vocab.decode(&e.question),
            reference_answer: vocab.answer(e.answer).unwrap_or("?").to_string(),
            verdict,
        })
        .collect()
}

/// Greedily generate one QA pair per corpus example, each judged by the
/// scene oracle.
pub fn generate_records(
    model: &Gpn,
    vocab: &Vocabulary,
    corpus: &Corpus,
    opts: &EvalOptions,
) -> Result<(AnswerabilityReport, Vec<GeneratedRecord>)> {
    check_vocab(model, vocab, corpus)?;
    let pairs = generate_pairs(model, corpus, opts)?;
    let (report, verdicts) = answerability_report(vocab, &pairs, |id| corpus.scene(id).cloned())?;
    Ok((report, records(vocab, corpus, &pairs, verdicts)))
}

pub fn evaluate(
    model: &Gpn,
    vocab: &Vocabulary,
    corpus: &Corpus,
    opts: &EvalOptions,
) -> Result<(EvalReport, Vec<GeneratedRecord>)> {
    check_vocab(model, vocab, corpus)?;
    let examples: Vec<&SynthExample> = corpus.examples.iter().collect();
    let pairs = generate_pairs(model, corpus, opts)?;
    let words = |q: &crate::jqag::TokenSequence| -> Vec<String> {
        q.words()
            .iter()
            .map(|&t| vocab.word(t).unwrap_or("<unk>").to_string())
            .collect()
    };
    let cands: Vec<Vec<String>> = pairs.iter().map(|p| words(&p.question)).collect();
    let refs: Vec<Vec<String>> = examples.iter().map(|e| words(&e.question)).collect();
    let predicted: Vec<usize> = pairs.iter().map(|p| p.answer).collect();
    let gold: Vec<usize> = examples.iter().map(|e| e.answer).collect();
    let types: Vec<usize> = examples.iter().map(|e| e.question_type).collect();
    let (answerability, verdicts) = answerability_report(vocab, &pairs, |id| corpus.scene(id).cloned())?;
    let (l_total, l_qg, token_accuracy) =
        teacher_forced_stats(model, &examples, opts.batch_size, opts.weights, opts.ablation)?;
    let report = EvalReport {
        examples: examples.len(),
        bleu: bleu(&cands, &refs, 4, true)?,
        bleu4: bleu(&cands, &refs, 4, false)?,
        rouge_l: rouge_l(&cands, &refs)?,
        cider: cider(&cands, &refs)?,
        qa_accuracy: qa_accuracy(&predicted, &gold, &types, QUESTION_TYPES)?,
        token_accuracy,
        l_total,
        l_qg,
        answerability,
    };
    Ok((report, records(vocab, corpus, &pairs, verdicts)))
}

/// One row of the ablation study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub ablation: Ablation,
    pub weights: LossWeights,
}

impl Variant {
    pub fn base(settings: &TrainSettings) -> Self {
        Variant {
            name: "base".into(),
            ablation: settings.ablation,
            weights: settings.weights,
        }
    }

    /// Look up a named variant relative to `base`.
    pub fn named(name: &str, base: &TrainSettings) -> Result<Self> {
        let mut v = Variant::base(base);
        v.name = name.to_string();
        match name {
            "base" => {}
            "no_pretester" => v.ablation.no_pretester = true,
            "no_controller" => v.ablation.no_controller = true,
            "no_frame_features" => v.ablation.no_frame_features = true,
            "no_object_features" => v.ablation.no_object_features = true,
            _ => {
                let lam = name
                    .strip_prefix("lambda_")
                    .and_then(|s| s.split_once('_'))
                    .and_then(|(c, a)| Some((c.parse::<f64>().ok()?, a.parse::<f64>().ok()?)))
                    .ok_or_else(|| GpnError::Config(format!("unknown ablation variant `{name}`")))?;
                v.weights = LossWeights::new(lam.0, lam.1)?;
            }
        }
        Ok(v)
    }
}

/// The variants compared against the base configuration: the four component
/// removals and the other four points of the λ grid.
pub const STANDARD_VARIANTS: [&str; 8] = [
    "no_pretester",
    "no_controller",
    "no_frame_features",
    "no_object_features",
    "lambda_1_0",
    "lambda_0.75_0.25",
    "lambda_0.5_0.5",
    "lambda_0_1",
];

/// Headline numbers of one evaluation, the columns of the comparison table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub qa_accuracy: f64,
    pub token_accuracy: f64,
    pub answerability: f64,
}

impl Summary {
    pub const COLUMNS: [&'static str; 6] = ["bleu4", "rouge_l", "cider", "qa_acc", "token_acc", "answerable"];

    pub fn of(r: &EvalReport) -> Self {
        Summary {
            bleu4: r.bleu4,
            rouge_l: r.rouge_l,
            cider: r.cider,
            qa_accuracy: r.qa_accuracy.overall,
            token_accuracy: r.token_accuracy,
            answerability: r.answerability.answerable,
        }
    }

    pub fn values(&self) -> [f64; 6] {
        [
            self.bleu4,
            self.rouge_l,
            self.cider,
            self.qa_accuracy,
            self.token_accuracy,
            self.answerability,
        ]
    }

    fn from_values(v: [f64; 6]) -> Self {
        Summary {
            bleu4: v[0],
            rouge_l: v[1],
            cider: v[2],
            qa_accuracy: v[3],
            token_accuracy: v[4],
            answerability: v[5],
        }
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub summary: Option<Summary>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seeds: Vec<SeedResult>,
    /// Medians over the seeds that finished; `None` if none did.
    pub median: Option<Summary>,
    /// `median - base median`, per column.
    pub delta: Option<Summary>,
    pub failed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant.name == name)
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.variant.name.len()).max().unwrap_or(7).max(7);
        let mut s = format!("{:<width$}", "variant");
        for c in Summary::COLUMNS {
            s += &format!(" {c:>10}");
        }
        s += "   (medians x100; delta vs base in parentheses)\n";
        for r in &self.rows {
            s += &format!("{:<width$}", r.variant.name);
            match (&r.median, &r.delta) {
                (Some(m), d) => {
                    for (i, v) in m.values().iter().enumerate() {
                        s += &format!(" {:>10.2}", 100.0 * v);
                        if let Some(d) = d {
                            s += &format!(" ({:+.2})", 100.0 * d.values()[i]);
                        }
                    }
                }
                (None, _) => s += " failed",
            }
            if r.failed && r.median.is_some() {
                s += "  [some seeds failed]";
            }
            s += "\n";
        }
        s
    }
}

/// Everything a single ablation job needs besides its variant and seed.
pub struct AblationSetup<'a> {
    pub model: ModelConfig,
    pub settings: TrainSettings,
    pub train: &'a Corpus,
    pub valid: Option<&'a Corpus>,
    pub test: &'a Corpus,
    pub vocab: &'a Vocabulary,
    pub eval: EvalOptions,
}

/// Train and evaluate `base` plus every variant for seeds `1..=n_seeds`.
/// Jobs run in parallel; a failing job marks its row without stopping the
/// others.
pub fn ablate(setup: &AblationSetup<'_>, variants: &[Variant], n_seeds: u64) -> Result<AblationTable> {
    if n_seeds < 3 {
        return Err(GpnError::Config(format!(
            "ablation needs at least 3 seeds, got {n_seeds}"
        )));
    }
    let mut all = vec![Variant::base(&setup.settings)];
    all.extend(variants.iter().filter(|v| v.name != "base").cloned());
    let jobs: Vec<(usize, u64)> = (0..all.len())
        .flat_map(|v| (1..=n_seeds).map(move |s| (v, s)))
        .collect();
    let results: Vec<Result<Summary>> = jobs
        .par_iter()
        .map(|&(v, seed)| {
            let variant = &all[v];
            let settings = TrainSettings {
                seed,
                ablation: variant.ablation,
                weights: variant.weights,
                ..setup.settings.clone()
            };
            let out = train(
                setup.model.clone(),
                &settings,
                setup.train,
                setup.valid,
                setup.vocab,
                None,
            )?;
            let model = match &out.best {
                Some(ck) => model_from_checkpoint(ck, setup.vocab)?,
                None => out.model,
            };
            let opts = EvalOptions {
                ablation: variant.ablation,
                weights: variant.weights,
                ..setup.eval
            };
            let (report, _) = evaluate(&model, setup.vocab, setup.test, &opts)?;
            Ok(Summary::of(&report))
        })
        .collect();

    let mut rows: Vec<AblationRow> = all
        .into_iter()
        .map(|variant| AblationRow {
            variant,
            seeds: Vec::new(),
            median: None,
            delta: None,
            failed: false,
        })
        .collect();
    for (&(v, seed), r) in jobs.iter().zip(results) {
        let row = &mut rows[v];
        match r {
            Ok(s) => row.seeds.push(SeedResult {
                seed,
                summary: Some(s),
                error: None,
            }),
            Err(e) => {
                row.failed = true;
                row.seeds.push(SeedResult {
                    seed,
                    summary: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    for row in &mut rows {
        let done: Vec<[f64; 6]> = row.seeds.iter().filter_map(|s| s.summary.map(|x| x.values())).collect();
        if done.is_empty() {
            continue;
        }
        let mut m = [0.0; 6];
        for (i, slot) in m.iter_mut().enumerate() {
            *slot = median(&done.iter().map(|v| v[i]).collect::<Vec<_>>()).unwrap_or(f64::NAN);
        }
        row.median = Some(Summary::from_values(m));
    }
    let base = rows[0].median;
    for row in &mut rows {
        if let (Some(b), Some(m)) = (base, row.median) {
            let (b, m) = (b.values(), m.values());
            row.delta = Some(Summary::from_values(std::array::from_fn(|i| m[i] - b[i])));
        }
    }
    Ok(AblationTable { rows })
}
