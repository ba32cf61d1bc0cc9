//! Joint question-answer generator: propose an answer distribution from the
//! clip embedding, then decode a question whose LSTM state is seeded by the
//! clip embedding modulated by the (soft) answer embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var, PROB_FLOOR};
use crate::error::{GpnError, Result};
use crate::layers::{Linear, LstmCell};
use crate::params::{xavier_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_SPECIAL: usize = 4;

/// A question as vocabulary indices: words, then `EOS`, then optional `PAD`.
/// `BOS` is never stored; the decoder feeds it as the first input.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(pub Vec<usize>);

impl TokenSequence {
    /// Words followed by `EOS`.
    pub fn from_words(words: &[usize]) -> Self {
        let mut t = words.to_vec();
        t.push(EOS);
        TokenSequence(t)
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of non-PAD positions.
    pub fn content_len(&self) -> usize {
        self.0.iter().filter(|&&t| t != PAD).count()
    }

    /// The words before the first `EOS` (or all non-PAD tokens if none).
    pub fn words(&self) -> &[usize] {
        let end = self
            .0
            .iter()
            .position(|&t| t == EOS || t == PAD)
            .unwrap_or(self.0.len());
        &self.0[..end]
    }

    pub fn padded(&self, len: usize) -> Self {
        let mut t = self.0.clone();
        t.resize(len.max(t.len()), PAD);
        TokenSequence(t)
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let mut seen_eos = false;
        for (i, &t) in self.0.iter().enumerate() {
            if t >= vocab_size {
                return Err(GpnError::OutOfRange {
                    what: "token",
                    index: t,
                    len: vocab_size,
                });
            }
            match t {
                BOS => return Err(GpnError::Data(format!("BOS stored at position {i}"))),
                PAD if !seen_eos => return Err(GpnError::Data(format!("PAD before EOS at position {i}"))),
                EOS if seen_eos => return Err(GpnError::Data(format!("second EOS at position {i}"))),
                EOS => seen_eos = true,
                t if seen_eos && t != PAD => return Err(GpnError::Data(format!("token after EOS at position {i}"))),
                _ => {}
            }
        }
        Ok(())
    }
}

/// A point on the probability simplex over the closed answer set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerDistribution(Vec<f64>);

impl AnswerDistribution {
    pub const TOLERANCE: f64 = 1e-9;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(GpnError::Data("empty answer distribution".into()));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(GpnError::Data("answer probabilities must be finite and >= 0".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > Self::TOLERANCE {
            return Err(GpnError::Data(format!("answer probabilities sum to {sum}")));
        }
        Ok(AnswerDistribution(probs))
    }

    pub fn uniform(n: usize) -> Self {
        AnswerDistribution(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, k: usize) -> Self {
        let mut p = vec![0.0; n];
        p[k] = 1.0;
        AnswerDistribution(p)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn entropy(&self) -> f64 {
        -self.0.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
    }
}

/// `argmax`, lowest index on ties.
pub fn select_answer(ap: &AnswerDistribution) -> usize {
    argmax(ap.probs())
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy of a distribution against a target index, with the
/// probability clamped at [`PROB_FLOOR`].
pub fn cross_entropy(dist: &AnswerDistribution, target: usize) -> Result<f64> {
    let p = dist.probs().get(target).ok_or(GpnError::OutOfRange {
        what: "answer target",
        index: target,
        len: dist.len(),
    })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Loss of the answer proposal against the gold answer.
pub fn answer_loss(ap: &AnswerDistribution, target: usize) -> Result<f64> {
    cross_entropy(ap, target)
}

/// Mean over non-PAD steps of `−ln p(target)`; `steps[i]` is the
/// distribution emitted at step `i`.
pub fn question_loss(steps: &[Vec<f64>], target: &TokenSequence) -> Result<f64> {
    if steps.len() != target.len() {
        return Err(GpnError::shape(
            "question_loss",
            format!("{} distributions for {} target tokens", steps.len(), target.len()),
        ));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (dist, &tok) in steps.iter().zip(target.tokens()) {
        if tok == PAD {
            continue;
        }
        let p = dist.get(tok).ok_or(GpnError::OutOfRange {
            what: "token",
            index: tok,
            len: dist.len(),
        })?;
        total -= p.max(PROB_FLOOR).ln();
        count += 1;
    }
    if count == 0 {
        return Err(GpnError::Data("question target has no tokens".into()));
    }
    Ok(total / count as f64)
}

/// Graph version of [`cross_entropy`] averaged over a batch of rows.
pub fn cross_entropy_graph(g: &mut Graph, probs: Var, targets: &[usize]) -> Result<Var> {
    let (rows, cols) = g.value(probs).dims2();
    if targets.len() != rows {
        return Err(GpnError::shape(
            "cross_entropy",
            format!("{} targets for {rows} rows", targets.len()),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
        return Err(GpnError::OutOfRange {
            what: "answer target",
            index: bad,
            len: cols,
        });
    }
    let logp = g.log_clamped(probs);
    let w = -1.0 / rows as f64;
    g.weighted_pick(logp, targets.iter().enumerate().map(|(r, &t)| (r, t, w)).collect())
}

#[derive(Clone, Debug)]
pub struct JqagConfig {
    pub d_model: usize,
    pub answers: usize,
    pub vocab: usize,
    pub lstm_layers: usize,
    pub bias: bool,
    /// Seed every LSTM layer's hidden state with `H_0`, not just the first.
    pub init_all_layers: bool,
}

#[derive(Clone, Debug)]
pub struct Jqag {
    pub config: JqagConfig,
    pub selector1: Linear,
    pub selector2: Linear,
    /// `W^AE`, `[answers, d_model]`, applied to the full distribution.
    pub answer_embed: ParamId,
    pub word_embed: ParamId,
    pub lstm: Vec<LstmCell>,
    pub output: Linear,
}

/// Recurrent state for each LSTM layer. An explicit value: decoding has no
/// hidden mutable state.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub hidden: Vec<Var>,
    pub cell: Vec<Var>,
    pub step: usize,
}

pub enum DecodeMode<'a> {
    TeacherForced(&'a [TokenSequence]),
    Greedy { max_len: usize },
}

pub struct Decoded {
    /// Realized tokens per batch item (targets when teacher-forced).
    pub tokens: Vec<TokenSequence>,
    /// Log-probabilities `[batch, vocab]` per step.
    pub step_log_probs: Vec<Var>,
    /// Top-layer hidden state after each item's final consumed token.
    pub q_emb: Var,
    /// Steps consumed per batch item (content length).
    pub lengths: Vec<usize>,
}

impl Jqag {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, config: JqagConfig) -> Result<Self> {
        let d = config.d_model;
        if config.lstm_layers == 0 {
            return Err(GpnError::Config("decoder needs at least one LSTM layer".into()));
        }
        let selector1 = Linear::new(store, rng, "jqag.ag1", d, d, config.bias)?;
        let selector2 = Linear::new(store, rng, "jqag.ag2", d, config.answers, config.bias)?;
        let answer_embed = store.register("jqag.ae", xavier_uniform(rng, config.answers, d))?;
        let word_embed = store.register("jqag.embed", xavier_uniform(rng, config.vocab, d))?;
        let lstm = (0..config.lstm_layers)
            .map(|i| LstmCell::new(store, rng, &format!("jqag.lstm{i}"), d, d))
            .collect::<Result<Vec<_>>>()?;
        let output = Linear::new(store, rng, "jqag.out", d, config.vocab, config.bias)?;
        Ok(Jqag {
            config,
            selector1,
            selector2,
            answer_embed,
            word_embed,
            lstm,
            output,
        })
    }

    /// `A^P = softmax(W2 · ReLU(W1 · V^final))`; returns `(logits, probs)`.
    pub fn propose_answer(&self, g: &mut Graph, store: &ParamStore, v_final: Var) -> Result<(Var, Var)> {
        let h = self.selector1.forward(g, store, v_final)?;
        let h = g.relu(h);
        let logits = self.selector2.forward(g, store, h)?;
        let probs = g.softmax(logits)?;
        Ok((logits, probs))
    }

    /// `H_0 = V^final ⊙ W^AE(A^P)`; cell states start at zero.
    pub fn init_decoder(&self, g: &mut Graph, store: &ParamStore, v_final: Var, ap: Var) -> Result<DecoderState> {
        let ae = g.param(store, self.answer_embed);
        let embedded = g.matmul(ap, ae)?;
        let h0 = g.mul(v_final, embedded)?;
        let rows = g.value(h0).rows();
        let zeros = g.constant(Tensor::zeros(&[rows, self.config.d_model]));
        let hidden = (0..self.lstm.len())
            .map(|i| {
                if i == 0 || self.config.init_all_layers {
                    h0
                } else {
                    zeros
                }
            })
            .collect();
        Ok(DecoderState {
            hidden,
            cell: vec![zeros; self.lstm.len()],
            step: 0,
        })
    }

    /// Embed the previous tokens, advance every LSTM layer, project to
    /// vocabulary log-probabilities.
    pub fn decode_step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        prev: &[usize],
        state: &DecoderState,
    ) -> Result<(Var, DecoderState)> {
        let table = g.param(store, self.word_embed);
        let mut x = g.gather(table, prev)?;
        let mut hidden = Vec::with_capacity(self.lstm.len());
        let mut cell = Vec::with_capacity(self.lstm.len());
        for (l, layer) in self.lstm.iter().enumerate() {
            let (h, c) = layer.step(g, store, x, state.hidden[l], state.cell[l])?;
            hidden.push(h);
            cell.push(c);
            x = h;
        }
        let logits = self.output.forward(g, store, x)?;
        let logp = g.log_softmax(logits)?;
        Ok((
            logp,
            DecoderState {
                hidden,
                cell,
                step: state.step + 1,
            },
        ))
    }

    /// Run the decoder either on given targets or greedily.
    pub fn generate_question(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        state0: &DecoderState,
        mode: DecodeMode<'_>,
    ) -> Result<Decoded> {
        let batch = g.value(state0.hidden[0]).rows();
        match mode {
            DecodeMode::TeacherForced(targets) => {
                if targets.len() != batch {
                    return Err(GpnError::shape(
                        "generate_question",
                        format!("{} targets for batch of {batch}", targets.len()),
                    ));
                }
                let lengths: Vec<usize> = targets.iter().map(|t| t.content_len()).collect();
                if lengths.contains(&0) {
                    return Err(GpnError::Data("empty target question in teacher-forced mode".into()));
                }
                let steps = targets.iter().map(|t| t.len()).max().unwrap_or(0);
                let mut state = state0.clone();
                let mut step_log_probs = Vec::with_capacity(steps);
                let mut tops = Vec::with_capacity(steps);
                for t in 0..steps {
                    let prev: Vec<usize> = targets
                        .iter()
                        .map(|q| {
                            if t == 0 {
                                BOS
                            } else {
                                q.tokens().get(t - 1).copied().unwrap_or(PAD)
                            }
                        })
                        .collect();
                    let (logp, next) = self.decode_step(g, store, &prev, &state)?;
                    step_log_probs.push(logp);
                    tops.push(*next.hidden.last().unwrap());
                    state = next;
                }
                let q_emb = self.select_final(g, &tops, &lengths)?;
                Ok(Decoded {
                    tokens: targets.to_vec(),
                    step_log_probs,
                    q_emb,
                    lengths,
                })
            }
            DecodeMode::Greedy { max_len } => {
                if max_len == 0 {
                    return Err(GpnError::Config("greedy decoding needs max_len >= 1".into()));
                }
                let mut state = state0.clone();
                let mut prev = vec![BOS; batch];
                let mut tokens: Vec<Vec<usize>> = vec![Vec::new(); batch];
                let mut done = vec![false; batch];
                let mut step_log_probs = Vec::new();
                let mut tops = Vec::new();
                for _ in 0..max_len {
                    let (logp, next) = self.decode_step(g, store, &prev, &state)?;
                    let lp = g.value(logp);
                    for b in 0..batch {
                        if done[b] {
                            prev[b] = PAD;
                            continue;
                        }
                        let tok = argmax(lp.row_slice(b));
                        tokens[b].push(tok);
                        prev[b] = tok;
                        if tok == EOS {
                            done[b] = true;
                        }
                    }
                    step_log_probs.push(logp);
                    tops.push(*next.hidden.last().unwrap());
                    state = next;
                    if done.iter().all(|&d| d) {
                        break;
                    }
                }
                let lengths: Vec<usize> = tokens.iter().map(Vec::len).collect();
                let q_emb = self.select_final(g, &tops, &lengths)?;
                Ok(Decoded {
                    tokens: tokens.into_iter().map(TokenSequence).collect(),
                    step_log_probs,
                    q_emb,
                    lengths,
                })
            }
        }
    }

    /// Row `b` of the result is `tops[lengths[b] - 1]` row `b`.
    fn select_final(&self, g: &mut Graph, tops: &[Var], lengths: &[usize]) -> Result<Var> {
        let batch = lengths.len();
        let d = self.config.d_model;
        let mut acc: Option<Var> = None;
        for (t, &top) in tops.iter().enumerate() {
            let rows: Vec<bool> = lengths.iter().map(|&l| l == t + 1).collect();
            if !rows.iter().any(|&r| r) {
                continue;
            }
            let mut mask = Tensor::zeros(&[batch, d]);
            for (b, _) in rows.iter().enumerate().filter(|(_, &r)| r) {
                mask.data_mut()[b * d..(b + 1) * d].fill(1.0);
            }
            let m = g.constant(mask);
            let picked = g.mul(top, m)?;
            acc = Some(match acc {
                Some(a) => g.add(a, picked)?,
                None => picked,
            });
        }
        acc.ok_or_else(|| GpnError::Data("decoder produced no steps".into()))
    }

    /// Mean token NLL per item, then mean over the batch.
    pub fn question_loss_graph(&self, g: &mut Graph, decoded: &Decoded) -> Result<Var> {
        let batch = decoded.tokens.len() as f64;
        let mut total: Option<Var> = None;
        for (t, &logp) in decoded.step_log_probs.iter().enumerate() {
            let entries: Vec<(usize, usize, f64)> = decoded
                .tokens
                .iter()
                .enumerate()
                .filter_map(|(b, q)| {
                    q.tokens()
                        .get(t)
                        .filter(|&&tok| tok != PAD)
                        .map(|&tok| (b, tok, -1.0 / (decoded.lengths[b] as f64 * batch)))
                })
                .collect();
            if entries.is_empty() {
                continue;
            }
            let s = g.weighted_pick(logp, entries)?;
            total = Some(match total {
                Some(acc) => g.add(acc, s)?,
                None => s,
            });
        }
        total.ok_or_else(|| GpnError::Data("no target tokens".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn select_answer_cases() {
        let d = AnswerDistribution::new(vec![0.1, 0.7, 0.2]).unwrap();
        assert_eq!(select_answer(&d), 1);
        assert_eq!(select_answer(&AnswerDistribution::uniform(4)), 0);
        assert_eq!(select_answer(&AnswerDistribution::one_hot(6, 4)), 4);
    }

    #[test]
    fn answer_loss_closed_forms() {
        assert_eq!(answer_loss(&AnswerDistribution::one_hot(3, 2), 2).unwrap(), 0.0);
        let d = AnswerDistribution::new(vec![0.25, 0.75]).unwrap();
        assert!((answer_loss(&d, 1).unwrap() - 0.287_682_072_451_780_9).abs() < 1e-12);
        let u = AnswerDistribution::uniform(32);
        assert!((answer_loss(&u, 5).unwrap() - 32f64.ln()).abs() < 1e-12);
        assert!(answer_loss(&u, 32).is_err());
    }

    #[test]
    fn distribution_validation() {
        assert!(AnswerDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(AnswerDistribution::new(vec![-0.1, 1.1]).is_err());
        assert!(AnswerDistribution::new(vec![0.5, 0.5]).is_ok());
    }

    #[test]
    fn question_loss_closed_forms() {
        let q = TokenSequence::from_words(&[5, 7]);
        let perfect: Vec<Vec<f64>> = q
            .tokens()
            .iter()
            .map(|&t| {
                let mut d = vec![0.0; 10];
                d[t] = 1.0;
                d
            })
            .collect();
        assert_eq!(question_loss(&perfect, &q).unwrap(), 0.0);

        let uniform = vec![vec![1.0 / 200.0; 200]; 3];
        let l = question_loss(&uniform, &q).unwrap();
        assert!((l - 200f64.ln()).abs() < 1e-12);
        assert!((l.exp() - 200.0).abs() < 1e-9);

        // PAD positions do not count
        let padded = q.padded(6);
        let uniform6 = vec![vec![1.0 / 200.0; 200]; 6];
        assert_eq!(question_loss(&uniform6, &padded).unwrap(), l);
        assert!(question_loss(&uniform, &padded).is_err());
    }

    #[test]
    fn token_sequence_validation() {
        assert!(TokenSequence(vec![5, EOS, PAD, PAD]).validate(10).is_ok());
        assert!(TokenSequence(vec![5, PAD, EOS]).validate(10).is_err());
        assert!(TokenSequence(vec![5, EOS, 6]).validate(10).is_err());
        assert!(TokenSequence(vec![12, EOS]).validate(10).is_err());
        assert_eq!(TokenSequence(vec![5, 6, EOS, PAD]).words(), &[5, 6]);
    }
}
