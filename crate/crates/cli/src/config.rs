//! Flat `key = value` configuration with `[section]` headers.
//!
//! Every key has a default, so an empty file is a valid config. Dotted
//! overrides (`train.max_steps=500`) are applied after the file.

use std::fmt::Display;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gpn::encoder::{FRAME_DIM, OBJECT_DIM};
use gpn::gradsuite::ToyModel;
use gpn::model::{Ablation, ModelConfig};
use gpn::optim::AdamConfig;
use gpn::pretester::{KlDirection, LossWeights};
use gpn::synthdata::{Vocabulary, QUESTION_TYPES};
use gpn::trainer::{EvalOptions, TrainSettings, STANDARD_VARIANTS};
use gpn::{GpnError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub run_name: String,
    pub out_dir: PathBuf,
    pub seed: u64,

    /// Corpus directory; empty means the run directory.
    pub data_dir: PathBuf,
    pub train_scenes: Range<u64>,
    pub valid_scenes: Range<u64>,
    pub test_scenes: Range<u64>,
    pub noise_sigma: f64,

    pub model: ModelConfig,

    pub batch_size: usize,
    pub max_steps: usize,
    pub validate_every: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,

    pub ablation: Ablation,

    /// Checkpoint to evaluate; empty means `{run}/model.gpn`.
    pub checkpoint: PathBuf,
    pub eval_split: Split,
    pub eval_batch_size: usize,
    pub max_question_len: usize,

    pub variants: Vec<String>,
    pub seeds: u64,

    pub toy: ToyModel,
}

impl Default for Config {
    fn default() -> Self {
        let train = TrainSettings::default();
        let eval = EvalOptions::default();
        Config {
            run_name: "gpn".into(),
            out_dir: PathBuf::from("runs"),
            seed: 1,
            data_dir: PathBuf::new(),
            train_scenes: 0..2000,
            valid_scenes: 2000..2200,
            test_scenes: 100_000..100_500,
            noise_sigma: 0.1,
            model: ModelConfig::default(),
            batch_size: train.batch_size,
            max_steps: train.max_steps,
            validate_every: train.validate_every,
            adam: train.adam,
            weights: train.weights,
            ablation: train.ablation,
            checkpoint: PathBuf::new(),
            eval_split: Split::Test,
            eval_batch_size: eval.batch_size,
            max_question_len: eval.max_question_len,
            variants: STANDARD_VARIANTS.iter().map(|s| s.to_string()).collect(),
            seeds: 5,
            toy: ToyModel::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| GpnError::Config(format!("{key}: cannot parse `{value}`")))
}

fn parse_range(key: &str, value: &str) -> Result<Range<u64>> {
    let (a, b) = value
        .split_once("..")
        .ok_or_else(|| GpnError::Config(format!("{key}: expected `start..end`, got `{value}`")))?;
    let (a, b) = (parse::<u64>(key, a.trim())?, parse::<u64>(key, b.trim())?);
    if a > b {
        return Err(GpnError::Config(format!("{key}: empty-or-reversed range `{value}`")));
    }
    Ok(a..b)
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl Config {
    /// Read `path` (if any) and then apply `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Config::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| GpnError::Config(format!("cannot read config {}: {e}", p.display())))?;
            cfg.apply_text(&text)?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| GpnError::Config(format!("override `{o}` is not key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(name.trim().to_string());
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| GpnError::Config(format!("line {}: expected key = value", n + 1)))?;
            let sec = section
                .as_deref()
                .ok_or_else(|| GpnError::Config(format!("line {}: key outside a [section]", n + 1)))?;
            self.set(&format!("{sec}.{}", k.trim()), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "run.name" => {
                if v.is_empty() || v.contains(['/', '\\']) {
                    return Err(GpnError::Config(format!("run.name `{v}` must be a plain file name")));
                }
                self.run_name = v.to_string()
            }
            "run.out_dir" => self.out_dir = PathBuf::from(v),
            "run.seed" => self.seed = parse(key, v)?,

            "data.dir" => self.data_dir = PathBuf::from(v),
            "data.train_scenes" => self.train_scenes = parse_range(key, v)?,
            "data.valid_scenes" => self.valid_scenes = parse_range(key, v)?,
            "data.test_scenes" => self.test_scenes = parse_range(key, v)?,
            "data.noise_sigma" => self.noise_sigma = parse(key, v)?,

            "model.d_model" => m.d_model = parse(key, v)?,
            "model.layers" => m.layers = parse(key, v)?,
            "model.heads" => m.heads = parse(key, v)?,
            "model.lstm_layers" => m.lstm_layers = parse(key, v)?,
            "model.bias" => m.bias = parse(key, v)?,
            "model.positional_encoding" => m.positional_encoding = parse(key, v)?,
            "model.transformer_residual" => m.transformer_residual = parse(key, v)?,
            "model.init_all_layers" => m.init_all_layers = parse(key, v)?,

            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.max_steps" => self.max_steps = parse(key, v)?,
            "train.validate_every" => self.validate_every = parse(key, v)?,
            "train.learning_rate" => self.adam.learning_rate = parse(key, v)?,
            "train.beta1" => self.adam.beta1 = parse(key, v)?,
            "train.beta2" => self.adam.beta2 = parse(key, v)?,
            "train.epsilon" => self.adam.epsilon = parse(key, v)?,
            "train.lambda_c" => self.weights.lambda_c = parse(key, v)?,
            "train.lambda_a" => self.weights.lambda_a = parse(key, v)?,

            "ablation.no_pretester" => self.ablation.no_pretester = parse(key, v)?,
            "ablation.no_controller" => self.ablation.no_controller = parse(key, v)?,
            "ablation.no_frame_features" => self.ablation.no_frame_features = parse(key, v)?,
            "ablation.no_object_features" => self.ablation.no_object_features = parse(key, v)?,
            "ablation.detach_proposal" => self.ablation.detach_proposal = parse(key, v)?,
            "ablation.kl_direction" => {
                self.ablation.kl_direction =
                    KlDirection::parse(v).ok_or_else(|| GpnError::Config(format!("{key}: unknown direction `{v}`")))?
            }

            "eval.checkpoint" => self.checkpoint = PathBuf::from(v),
            "eval.split" => {
                self.eval_split = v
                    .parse()
                    .map_err(|_| GpnError::Config(format!("{key}: expected train, valid or test, got `{v}`")))?
            }
            "eval.batch_size" => self.eval_batch_size = parse(key, v)?,
            "eval.max_question_len" => self.max_question_len = parse(key, v)?,

            "ablate.variants" => {
                self.variants = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            "ablate.seeds" => self.seeds = parse(key, v)?,

            "gradcheck.d_model" => self.toy.d_model = parse(key, v)?,
            "gradcheck.answers" => self.toy.answers = parse(key, v)?,
            "gradcheck.vocab" => self.toy.vocab = parse(key, v)?,
            "gradcheck.step" => self.toy.difference.h = parse(key, v)?,
            _ => return Err(GpnError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(GpnError::Config(format!(
                "data.noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.train_scenes.is_empty() {
            return Err(GpnError::Config("data.train_scenes is empty".into()));
        }
        if self.eval_batch_size == 0 || self.max_question_len == 0 {
            return Err(GpnError::Config(
                "eval.batch_size and eval.max_question_len must be positive".into(),
            ));
        }
        self.model_config(&Vocabulary::standard()).validate()?;
        self.train_settings().validate()
    }

    /// The model shape for a corpus vocabulary; feature sizes come from the renderer.
    pub fn model_config(&self, vocab: &Vocabulary) -> ModelConfig {
        ModelConfig {
            frame_dim: FRAME_DIM,
            object_dim: OBJECT_DIM,
            question_types: QUESTION_TYPES,
            answers: vocab.num_answers(),
            vocab: vocab.len(),
            ..self.model.clone()
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            batch_size: self.batch_size,
            max_steps: self.max_steps,
            validate_every: self.validate_every,
            adam: self.adam,
            weights: self.weights,
            ablation: self.ablation,
            seed: self.seed,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            batch_size: self.eval_batch_size,
            max_question_len: self.max_question_len,
            weights: self.weights,
            ablation: self.ablation,
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_name)
    }

    pub fn data_dir(&self) -> PathBuf {
        if self.data_dir.as_os_str().is_empty() {
            self.run_dir()
        } else {
            self.data_dir.clone()
        }
    }

    pub fn corpus_path(&self, split: Split) -> PathBuf {
        self.data_dir().join(format!("{}.gpnc", split.as_str()))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        if self.checkpoint.as_os_str().is_empty() {
            self.run_dir().join("model.gpn")
        } else {
            self.checkpoint.clone()
        }
    }

    pub fn scenes(&self, split: Split) -> Range<u64> {
        match split {
            Split::Train => self.train_scenes.clone(),
            Split::Valid => self.valid_scenes.clone(),
            Split::Test => self.test_scenes.clone(),
        }
    }

    /// The fully resolved configuration in the same format it is read from.
    pub fn to_text(&self) -> String {
        let r = |x: &Range<u64>| format!("{}..{}", x.start, x.end);
        let m = &self.model;
        let a = &self.ablation;
        let sections: Vec<(&str, Vec<(&str, String)>)> = vec![
            (
                "run",
                vec![
                    ("name", self.run_name.clone()),
                    ("out_dir", self.out_dir.display().to_string()),
                    ("seed", self.seed.to_string()),
                ],
            ),
            (
                "data",
                vec![
                    ("dir", self.data_dir.display().to_string()),
                    ("train_scenes", r(&self.train_scenes)),
                    ("valid_scenes", r(&self.valid_scenes)),
                    ("test_scenes", r(&self.test_scenes)),
                    ("noise_sigma", self.noise_sigma.to_string()),
                ],
            ),
            (
                "model",
                vec![
                    ("d_model", m.d_model.to_string()),
                    ("layers", m.layers.to_string()),
                    ("heads", m.heads.to_string()),
                    ("lstm_layers", m.lstm_layers.to_string()),
                    ("bias", m.bias.to_string()),
                    ("positional_encoding", m.positional_encoding.to_string()),
                    ("transformer_residual", m.transformer_residual.to_string()),
                    ("init_all_layers", m.init_all_layers.to_string()),
                ],
            ),
            (
                "train",
                vec![
                    ("batch_size", self.batch_size.to_string()),
                    ("max_steps", self.max_steps.to_string()),
                    ("validate_every", self.validate_every.to_string()),
                    ("learning_rate", self.adam.learning_rate.to_string()),
                    ("beta1", self.adam.beta1.to_string()),
                    ("beta2", self.adam.beta2.to_string()),
                    ("epsilon", self.adam.epsilon.to_string()),
                    ("lambda_c", self.weights.lambda_c.to_string()),
                    ("lambda_a", self.weights.lambda_a.to_string()),
                ],
            ),
            (
                "ablation",
                vec![
                    ("no_pretester", a.no_pretester.to_string()),
                    ("no_controller", a.no_controller.to_string()),
                    ("no_frame_features", a.no_frame_features.to_string()),
                    ("no_object_features", a.no_object_features.to_string()),
                    ("detach_proposal", a.detach_proposal.to_string()),
                    ("kl_direction", a.kl_direction.as_str().to_string()),
                ],
            ),
            (
                "eval",
                vec![
                    ("checkpoint", self.checkpoint.display().to_string()),
                    ("split", self.eval_split.as_str().to_string()),
                    ("batch_size", self.eval_batch_size.to_string()),
                    ("max_question_len", self.max_question_len.to_string()),
                ],
            ),
            (
                "ablate",
                vec![("variants", join(&self.variants)), ("seeds", self.seeds.to_string())],
            ),
            (
                "gradcheck",
                vec![
                    ("d_model", self.toy.d_model.to_string()),
                    ("answers", self.toy.answers.to_string()),
                    ("vocab", self.toy.vocab.to_string()),
                    ("step", self.toy.difference.h.to_string()),
                ],
            ),
        ];
        let mut out = String::from(
            "# Resolved configuration. Batch size and the validation-loss\n\
             # selection rule for the kept checkpoint are local choices.\n",
        );
        for (name, keys) in sections {
            out += &format!("\n[{name}]\n");
            for (k, v) in keys {
                out += &format!("{k} = {v}\n");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        let mut cfg = Config::default();
        cfg.set("train.learning_rate", "0.0003").unwrap();
        cfg.set("data.valid_scenes", "5..5").unwrap();
        cfg.set("ablate.variants", "no_pretester, lambda_0_1").unwrap();
        cfg.set("ablation.kl_direction", "p_q").unwrap();
        let mut back = Config::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = Config::default().apply_text("[train]\nmax_stepz = 3\n").unwrap_err();
        assert!(
            matches!(&err, GpnError::UnknownKey(k) if k == "train.max_stepz"),
            "{err}"
        );
    }

    #[test]
    fn overrides_win() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        std::fs::write(&p, "[train]\nmax_steps = 100\nvalidate_every = 10\n").unwrap();
        let cfg = Config::load(Some(&p), &["train.max_steps=50".into()]).unwrap();
        assert_eq!((cfg.max_steps, cfg.validate_every), (50, 10));
    }

    #[test]
    fn rejects_bad_values() {
        let mut cfg = Config::default();
        assert!(cfg.set("model.bias", "maybe").is_err());
        assert!(cfg.set("data.train_scenes", "9..3").is_err());
        assert!(cfg.set("run.name", "a/b").is_err());
        assert!(Config::default().apply_text("max_steps = 3").is_err());
    }
}
