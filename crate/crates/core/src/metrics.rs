//! Question-generation metrics (BLEU, ROUGE-L, CIDEr), answer accuracy and
//! the oracle-based error taxonomy of generated pairs.
//!
//! All text metrics take one reference per candidate and operate on
//! pre-tokenized sequences; [`tokenize`] is whitespace splitting with
//! lowercasing.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{GpnError, Result};
use crate::jqag::TokenSequence;
use crate::synthdata::{answer_grounded, oracle_answer, LatentScene, OracleVerdict, Vocabulary};

/// ROUGE-L recall weight.
pub const ROUGE_BETA2: f64 = 1.2;
pub const CIDER_MAX_N: usize = 4;
pub const CIDER_SCALE: f64 = 10.0;

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn check_corpus<T>(candidates: &[T], references: &[T], what: &str) -> Result<()> {
    if candidates.is_empty() {
        return Err(GpnError::Data(format!("{what}: empty corpus")));
    }
    if candidates.len() != references.len() {
        return Err(GpnError::Data(format!(
            "{what}: {} candidates, {} references",
            candidates.len(),
            references.len()
        )));
    }
    Ok(())
}

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level clipped n-gram matches and total candidate n-grams.
pub fn modified_precision<T: Hash + Eq>(candidates: &[Vec<T>], references: &[Vec<T>], n: usize) -> (usize, usize) {
    let mut matches = 0;
    let mut total = 0;
    for (c, r) in candidates.iter().zip(references) {
        let rc = ngram_counts(r, n);
        for (g, k) in ngram_counts(c, n) {
            matches += k.min(rc.get(g).copied().unwrap_or(0));
            total += k;
        }
    }
    (matches, total)
}

/// Corpus BLEU over orders `1..=max_n` with uniform weights and brevity
/// penalty. With `smooth`, orders without any match count as
/// `(0 + 1) / (total + 1)`; without it they make the score 0.
pub fn bleu<T: Hash + Eq>(candidates: &[Vec<T>], references: &[Vec<T>], max_n: usize, smooth: bool) -> Result<f64> {
    check_corpus(candidates, references, "bleu")?;
    if max_n == 0 {
        return Err(GpnError::Config("bleu: max_n must be positive".into()));
    }
    let c_len: usize = candidates.iter().map(Vec::len).sum();
    let r_len: usize = references.iter().map(Vec::len).sum();
    if c_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (m, t) = modified_precision(candidates, references, n);
        let p = if m > 0 {
            m as f64 / t as f64
        } else if smooth {
            1.0 / (t as f64 + 1.0)
        } else {
            return Ok(0.0);
        };
        log_sum += p.ln();
    }
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    Ok(bp * (log_sum / max_n as f64).exp())
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure of one pair.
pub fn rouge_l_pair<T: Eq>(candidate: &[T], reference: &[T]) -> f64 {
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    (1.0 + ROUGE_BETA2) * p * r / (r + ROUGE_BETA2 * p)
}

/// Mean per-pair ROUGE-L.
pub fn rouge_l<T: Eq>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    check_corpus(candidates, references, "rouge_l")?;
    let s: f64 = candidates.iter().zip(references).map(|(c, r)| rouge_l_pair(c, r)).sum();
    Ok(s / candidates.len() as f64)
}

/// CIDEr with n = 1..4, scaled by 10.
///
/// Each sentence becomes a vector of n-gram term frequencies (count over the
/// number of n-grams of that order) times `idf(g) = ln((1 + N) / (1 + df(g))) + 1`,
/// with `N` the number of references and `df` the number of references
/// containing `g`. The smoothed idf keeps n-grams that occur in every
/// reference from vanishing. A pair's score averages the cosine similarity
/// over the orders its reference is long enough to have.
pub fn cider<T: Hash + Ord>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    check_corpus(candidates, references, "cider")?;
    let n_docs = references.len() as f64;
    let mut df: Vec<HashMap<&[T], usize>> = vec![HashMap::new(); CIDER_MAX_N + 1];
    for r in references {
        for (n, table) in df.iter_mut().enumerate().skip(1) {
            for g in ngram_counts(r, n).into_keys() {
                *table.entry(g).or_insert(0) += 1;
            }
        }
    }
    let mut total = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        let mut sum = 0.0;
        let mut orders = 0;
        for (n, table) in df.iter().enumerate().skip(1) {
            let rv = tfidf(r, n, table, n_docs);
            if rv.is_empty() {
                continue;
            }
            orders += 1;
            let cv = tfidf(c, n, table, n_docs);
            sum += cosine(&cv, &rv);
        }
        if orders > 0 {
            total += sum / orders as f64;
        }
    }
    Ok(CIDER_SCALE * total / candidates.len() as f64)
}

fn tfidf<'a, T: Hash + Ord>(
    tokens: &'a [T],
    n: usize,
    df: &HashMap<&[T], usize>,
    n_docs: f64,
) -> BTreeMap<&'a [T], f64> {
    let counts = ngram_counts(tokens, n);
    let total: usize = counts.values().sum();
    counts
        .into_iter()
        .map(|(g, k)| {
            let d = df.get(g).copied().unwrap_or(0) as f64;
            let idf = ((1.0 + n_docs) / (1.0 + d)).ln() + 1.0;
            (g, k as f64 / total as f64 * idf)
        })
        .collect()
}

fn cosine<T: Ord>(a: &BTreeMap<&[T], f64>, b: &BTreeMap<&[T], f64>) -> f64 {
    let na: f64 = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().filter_map(|(g, va)| b.get(g).map(|vb| va * vb)).sum();
    let cos = dot / (na * nb);
    cos.min(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaAccuracy {
    pub overall: f64,
    /// Indexed by question type; `None` for types with no examples.
    pub per_type: Vec<Option<f64>>,
}

pub fn qa_accuracy(predicted: &[usize], gold: &[usize], types: &[usize], num_types: usize) -> Result<QaAccuracy> {
    if predicted.len() != gold.len() || predicted.len() != types.len() {
        return Err(GpnError::Data(format!(
            "qa_accuracy: {} predictions, {} gold answers, {} types",
            predicted.len(),
            gold.len(),
            types.len()
        )));
    }
    if predicted.is_empty() {
        return Err(GpnError::Data("qa_accuracy: empty input".into()));
    }
    let mut hit = vec![0usize; num_types];
    let mut seen = vec![0usize; num_types];
    for ((&p, &g), &t) in predicted.iter().zip(gold).zip(types) {
        if t >= num_types {
            return Err(GpnError::OutOfRange {
                what: "question type",
                index: t,
                len: num_types,
            });
        }
        seen[t] += 1;
        hit[t] += usize::from(p == g);
    }
    Ok(QaAccuracy {
        overall: hit.iter().sum::<usize>() as f64 / predicted.len() as f64,
        per_type: hit
            .iter()
            .zip(&seen)
            .map(|(&h, &s)| (s > 0).then(|| h as f64 / s as f64))
            .collect(),
    })
}

/// Error class of one generated question-answer pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// The oracle answers the question with the generated answer.
    Match,
    /// Answerable question, and the answer occurs in the scene, but the two
    /// do not belong together.
    QaMismatch,
    /// Well-formed question about something absent from the scene.
    QuestionError,
    /// Answerable question with an answer that does not occur in the scene.
    AnswerError,
    /// The question parses under no template.
    Malformed,
}

pub fn classify(vocab: &Vocabulary, scene: &LatentScene, question: &TokenSequence, answer: usize) -> Verdict {
    match oracle_answer(vocab, scene, question) {
        OracleVerdict::Malformed => Verdict::Malformed,
        OracleVerdict::Unanswerable => Verdict::QuestionError,
        OracleVerdict::Answer(a) if a == answer => Verdict::Match,
        OracleVerdict::Answer(_) if answer_grounded(vocab, scene, answer) => Verdict::QaMismatch,
        OracleVerdict::Answer(_) => Verdict::AnswerError,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedPair {
    pub scene_id: u64,
    pub question: TokenSequence,
    pub answer: usize,
}

/// Verdict fractions; they sum to 1.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnswerabilityReport {
    pub total: usize,
    pub answerable: f64,
    pub qa_mismatch: f64,
    pub question_error: f64,
    pub answer_error: f64,
    pub malformed: f64,
}

pub fn answerability_report(
    vocab: &Vocabulary,
    pairs: &[GeneratedPair],
    scene: impl Fn(u64) -> Option<LatentScene>,
) -> Result<(AnswerabilityReport, Vec<Verdict>)> {
    if pairs.is_empty() {
        return Err(GpnError::Data("answerability_report: no pairs".into()));
    }
    let mut verdicts = Vec::with_capacity(pairs.len());
    for p in pairs {
        let s = scene(p.scene_id)
            .ok_or_else(|| GpnError::Data(format!("answerability_report: scene {} missing", p.scene_id)))?;
        verdicts.push(classify(vocab, &s, &p.question, p.answer));
    }
    let frac = |v: Verdict| verdicts.iter().filter(|&&x| x == v).count() as f64 / pairs.len() as f64;
    Ok((
        AnswerabilityReport {
            total: pairs.len(),
            answerable: frac(Verdict::Match),
            qa_mismatch: frac(Verdict::QaMismatch),
            question_error: frac(Verdict::QuestionError),
            answer_error: frac(Verdict::AnswerError),
            malformed: frac(Verdict::Malformed),
        },
        verdicts,
    ))
}

/// Everything `eval` reports for one split. Text metrics are fractions
/// (CIDEr is unbounded); multiply by 100 for display.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: usize,
    pub bleu: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    /// Answer proposals against gold answers.
    pub qa_accuracy: QaAccuracy,
    /// Teacher-forced next-token accuracy over non-PAD target positions.
    pub token_accuracy: f64,
    /// Mean teacher-forced losses.
    pub l_total: f64,
    pub l_qg: f64,
    pub answerability: AnswerabilityReport,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let a = &self.answerability;
        let mut s = format!(
            "examples      {}\nBLEU          {:.2}\nBLEU-4        {:.2}\nROUGE-L       {:.2}\nCIDEr         {:.2}\n\
             QA accuracy   {:.2}\ntoken acc     {:.2}\nL^total       {:.4}\nL^qg          {:.4}\n",
            self.examples,
            100.0 * self.bleu,
            100.0 * self.bleu4,
            100.0 * self.rouge_l,
            100.0 * self.cider,
            100.0 * self.qa_accuracy.overall,
            100.0 * self.token_accuracy,
            self.l_total,
            self.l_qg,
        );
        for (t, acc) in self.qa_accuracy.per_type.iter().enumerate() {
            if let Some(acc) = acc {
                s += &format!("  type {t}      {:.2}\n", 100.0 * acc);
            }
        }
        s += &format!(
            "answerable    {:.2}\nqa mismatch   {:.2}\nquestion err  {:.2}\nanswer err    {:.2}\nmalformed     {:.2}\n",
            100.0 * a.answerable,
            100.0 * a.qa_mismatch,
            100.0 * a.question_error,
            100.0 * a.answer_error,
            100.0 * a.malformed
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &[&str]) -> Vec<Vec<String>> {
        s.iter().map(|x| tokenize(x)).collect()
    }

    #[test]
    fn clipped_unigram_precision() {
        let (m, t) = modified_precision(&toks(&["the the the"]), &toks(&["the cat sat"]), 1);
        assert_eq!((m, t), (1, 3));
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let c = toks(&["what color is the dog ?", "how many cat are there ?"]);
        assert_eq!(bleu(&c, &c, 4, false).unwrap(), 1.0);
        let d = toks(&["a b c d e f", "g h i j k l"]);
        assert_eq!(bleu(&d, &c, 4, false).unwrap(), 0.0);
        assert!(bleu(&d, &c, 4, true).unwrap() > 0.0);
        assert!(bleu::<String>(&[], &[], 4, false).is_err());
    }

    #[test]
    fn bleu_hand_value() {
        // p1 = 3/4, p2 = 1/3, brevity penalty 1 (4 tokens vs 4)
        let c = toks(&["a b x d"]);
        let r = toks(&["a b c d"]);
        let expect = (0.75f64 * (1.0 / 3.0)).sqrt();
        assert!((bleu(&c, &r, 2, false).unwrap() - expect).abs() < 1e-12);
        // shorter candidate: bp = exp(1 - 4/3)
        let c = toks(&["a b c"]);
        let expect = (1.0f64 - 4.0 / 3.0).exp();
        assert!((bleu(&c, &r, 2, false).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn rouge_hand_value() {
        let c = toks(&["a b c d"]);
        let r = toks(&["a c d"]);
        let (p, rc) = (0.75, 1.0);
        let f = (1.0 + 1.2) * p * rc / (rc + 1.2 * p);
        assert!((rouge_l(&c, &r).unwrap() - f).abs() < 1e-12);
        assert_eq!(rouge_l(&r, &r).unwrap(), 1.0);
        assert_eq!(rouge_l(&toks(&["x y"]), &r).unwrap(), 0.0);
    }

    #[test]
    fn cider_identity_and_disjoint() {
        let r = toks(&["what color is the dog ?"]);
        assert!((cider(&r, &r).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(cider(&toks(&["a b c d e"]), &r).unwrap(), 0.0);
    }

    #[test]
    fn qa_accuracy_counts() {
        let a = qa_accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0], &[0, 0, 1, 1], 3).unwrap();
        assert_eq!(a.overall, 0.75);
        assert_eq!(a.per_type, vec![Some(1.0), Some(0.5), None]);
        assert!(qa_accuracy(&[1], &[1, 2], &[0], 1).is_err());
    }
}
