//! The answering head that pretests a generated question, and the loss
//! algebra around it.
//!
//! `L^tc = λ_c·L^c + λ_a·L^ans` and `L^total = L^tc + L^qg + L^ap`, where
//! `L^c` is a KL divergence between the answer sheet `A^Q` (from the question
//! embedding) and the answer proposal `A^P` (from the video).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var, PROB_FLOOR};
use crate::error::{GpnError, Result};
use crate::jqag::{cross_entropy, AnswerDistribution};
use crate::layers::Linear;
use crate::params::ParamStore;

/// Argument order of the consistency KL.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(A^Q ‖ A^P)`.
    #[default]
    SheetToProposal,
    /// `KL(A^P ‖ A^Q)`.
    ProposalToSheet,
}

impl KlDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            KlDirection::SheetToProposal => "sheet_to_proposal",
            KlDirection::ProposalToSheet => "proposal_to_sheet",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sheet_to_proposal" | "q_p" => Some(KlDirection::SheetToProposal),
            "proposal_to_sheet" | "p_q" => Some(KlDirection::ProposalToSheet),
            _ => None,
        }
    }
}

/// `(λ_c, λ_a)` on the 1-simplex.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_a: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_c: 0.25,
            lambda_a: 0.75,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_c: f64, lambda_a: f64) -> Result<Self> {
        let w = LossWeights { lambda_c, lambda_a };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.lambda_c) || !unit(self.lambda_a) || (self.lambda_c + self.lambda_a - 1.0).abs() > 1e-12 {
            return Err(GpnError::Config(format!(
                "lambda_c ({}) and lambda_a ({}) must lie in [0, 1] and sum to 1",
                self.lambda_c, self.lambda_a
            )));
        }
        Ok(())
    }
}

/// `Σ p_i ln(p_i / q_i)` with `0·ln(0/·) = 0` and `q` clamped at [`PROB_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.max(PROB_FLOOR).ln() - qi.max(PROB_FLOOR).ln()))
        .sum()
}

/// `L^c` in the configured direction.
pub fn consistency_loss(aq: &AnswerDistribution, ap: &AnswerDistribution, dir: KlDirection) -> f64 {
    match dir {
        KlDirection::SheetToProposal => kl_divergence(aq.probs(), ap.probs()),
        KlDirection::ProposalToSheet => kl_divergence(ap.probs(), aq.probs()),
    }
}

/// `L^ans`: the answer sheet against the gold answer.
pub fn pretest_answer_loss(aq: &AnswerDistribution, target: usize) -> Result<f64> {
    cross_entropy(aq, target)
}

pub fn target_consistency_loss(l_c: f64, l_ans: f64, weights: LossWeights) -> Result<f64> {
    weights.validate()?;
    Ok(compose_tc(l_c, l_ans, weights))
}

fn compose_tc(l_c: f64, l_ans: f64, w: LossWeights) -> f64 {
    l_c * w.lambda_c + l_ans * w.lambda_a
}

/// `L^total`; `l_tc` is absent when the pretester is ablated.
pub fn total_loss(l_tc: Option<f64>, l_qg: f64, l_ap: f64) -> f64 {
    match l_tc {
        Some(tc) => tc + l_qg + l_ap,
        None => l_qg + l_ap,
    }
}

/// Loss components of one step. Pretester terms are `None` when it is
/// ablated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_qg: f64,
    pub l_ap: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_ans: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_tc: Option<f64>,
    pub l_total: f64,
    pub lambda_c: f64,
    pub lambda_a: f64,
}

impl LossReport {
    pub fn perplexity(&self) -> f64 {
        self.l_qg.exp()
    }

    /// Check the composition identities bit-for-bit.
    pub fn identities_hold(&self) -> bool {
        let w = LossWeights {
            lambda_c: self.lambda_c,
            lambda_a: self.lambda_a,
        };
        let tc_ok = match (self.l_c, self.l_ans, self.l_tc) {
            (Some(c), Some(a), Some(tc)) => compose_tc(c, a, w).to_bits() == tc.to_bits(),
            (None, None, None) => true,
            _ => false,
        };
        tc_ok && total_loss(self.l_tc, self.l_qg, self.l_ap).to_bits() == self.l_total.to_bits()
    }

    pub fn all_finite(&self) -> bool {
        [
            Some(self.l_qg),
            Some(self.l_ap),
            self.l_ans,
            self.l_c,
            self.l_tc,
            Some(self.l_total),
        ]
        .iter()
        .flatten()
        .all(|v| v.is_finite())
    }
}

/// Answering layer: `A^Q = softmax(W2 · ReLU(W1 · Q^emb))`.
#[derive(Clone, Debug)]
pub struct Pretester {
    pub layer1: Linear,
    pub layer2: Linear,
}

impl Pretester {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        d_model: usize,
        answers: usize,
        bias: bool,
    ) -> Result<Self> {
        Ok(Pretester {
            layer1: Linear::new(store, rng, "pt.al1", d_model, d_model, bias)?,
            layer2: Linear::new(store, rng, "pt.al2", d_model, answers, bias)?,
        })
    }

    pub fn pretest(&self, g: &mut Graph, store: &ParamStore, q_emb: Var) -> Result<(Var, Var)> {
        let h = self.layer1.forward(g, store, q_emb)?;
        let h = g.relu(h);
        let logits = self.layer2.forward(g, store, h)?;
        let probs = g.softmax(logits)?;
        Ok((logits, probs))
    }
}

/// Batch-mean `KL(p ‖ q)` on the graph.
pub fn kl_graph(g: &mut Graph, p: Var, q: Var) -> Result<Var> {
    let rows = g.value(p).rows();
    let lp = g.log_clamped(p);
    let lq = g.log_clamped(q);
    let diff = g.sub(lp, lq)?;
    let terms = g.mul(p, diff)?;
    let s = g.sum(terms);
    Ok(g.scale(s, 1.0 / rows as f64))
}

/// Consistency term on the graph. `detach_proposal` stops gradients into
/// the proposal path.
pub fn consistency_graph(g: &mut Graph, aq: Var, ap: Var, dir: KlDirection, detach_proposal: bool) -> Result<Var> {
    let ap = if detach_proposal { g.detach(ap) } else { ap };
    match dir {
        KlDirection::SheetToProposal => kl_graph(g, aq, ap),
        KlDirection::ProposalToSheet => kl_graph(g, ap, aq),
    }
}

/// `λ_c·L^c + λ_a·L^ans` on the graph, evaluated in the same order as
/// [`target_consistency_loss`].
pub fn tc_graph(g: &mut Graph, l_c: Var, l_ans: Var, w: LossWeights) -> Result<Var> {
    let a = g.scale(l_c, w.lambda_c);
    let b = g.scale(l_ans, w.lambda_a);
    g.add(a, b)
}
