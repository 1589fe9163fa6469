//! Differentiable surrogate losses with analytic gradients.
//!
//! Four families, all weighted per document by the inverse-propensity click
//! weights omega:
//!
//! * rank upper bounds (linear hinge and logistic), minimized for ARP;
//! * monotonic top-k bounds for DCG@k, which add a constant positive penalty
//!   to documents currently ranked beyond k so the bound stays above the
//!   truncated metric everywhere;
//! * a pairwise LambdaLoss built from gain/discount tables, where the
//!   discounts are fixed by the ranking at the start of each epoch
//!   (the expectation step) and may be zero beyond a cutoff;
//! * a truncated LambdaLoss that keeps full-ranking discounts but drops
//!   pairs entirely outside the current top k.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::ranking::RankedList;
use crate::{Error, Result};

const LN_2: f64 = std::f64::consts::LN_2;

/// log2(1 + e^x) without overflow for large |x|.
pub fn log2_1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        (x + (-x).exp().ln_1p()) / LN_2
    } else {
        x.exp().ln_1p() / LN_2
    }
}

/// Numerically stable logistic sigmoid.
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A surrogate loss family plus its cutoff where applicable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LossSpec {
    /// Hinge rank bound weighted by omega; minimizes ARP.
    ArpLinearBound,
    /// Logistic rank bound weighted by omega; minimizes ARP.
    ArpLogBound,
    /// Monotonic DCG@k bound with the hinge rank bound inside.
    MonotonicDcgLinear { k: u32 },
    /// Monotonic DCG@k bound with the logistic rank bound inside.
    MonotonicDcgLog { k: u32 },
    /// Pairwise LambdaLoss with full-ranking DCG discounts.
    LambdaDcg,
    /// Pairwise LambdaLoss with DCG discounts zeroed beyond rank k.
    LambdaDcgAt { k: u32 },
    /// LambdaLoss with full DCG discounts, skipping pairs wholly outside
    /// the current top k.
    TruncatedLambda { k: u32 },
}

impl LossSpec {
    /// True for the pairwise kinds whose discounts are refreshed from the
    /// current ranking once per epoch.
    pub fn needs_expectation_step(&self) -> bool {
        matches!(
            self,
            LossSpec::LambdaDcg | LossSpec::LambdaDcgAt { .. } | LossSpec::TruncatedLambda { .. }
        )
    }

    pub fn cutoff(&self) -> Option<u32> {
        match *self {
            LossSpec::ArpLinearBound | LossSpec::ArpLogBound | LossSpec::LambdaDcg => None,
            LossSpec::MonotonicDcgLinear { k }
            | LossSpec::MonotonicDcgLog { k }
            | LossSpec::LambdaDcgAt { k }
            | LossSpec::TruncatedLambda { k } => Some(k),
        }
    }
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LossSpec::ArpLinearBound => write!(f, "arp_linear_bound"),
            LossSpec::ArpLogBound => write!(f, "arp_log_bound"),
            LossSpec::MonotonicDcgLinear { k } => write!(f, "monotonic_dcg_linear@{k}"),
            LossSpec::MonotonicDcgLog { k } => write!(f, "monotonic_dcg_log@{k}"),
            LossSpec::LambdaDcg => write!(f, "lambdaloss_dcg"),
            LossSpec::LambdaDcgAt { k } => write!(f, "lambdaloss_dcg@{k}"),
            LossSpec::TruncatedLambda { k } => write!(f, "truncated_lambdaloss@{k}"),
        }
    }
}

impl FromStr for LossSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown loss '{s}'"));
        match s.split_once('@') {
            None => match s {
                "arp_linear_bound" => Ok(LossSpec::ArpLinearBound),
                "arp_log_bound" => Ok(LossSpec::ArpLogBound),
                "lambdaloss_dcg" => Ok(LossSpec::LambdaDcg),
                _ => Err(bad()),
            },
            Some((name, v)) => {
                let k: u32 = v.parse().map_err(|_| bad())?;
                if k == 0 {
                    return Err(Error::Config(format!("loss cutoff must be >= 1 in '{s}'")));
                }
                match name {
                    "monotonic_dcg_linear" => Ok(LossSpec::MonotonicDcgLinear { k }),
                    "monotonic_dcg_log" => Ok(LossSpec::MonotonicDcgLog { k }),
                    "lambdaloss_dcg" => Ok(LossSpec::LambdaDcgAt { k }),
                    "truncated_lambdaloss" => Ok(LossSpec::TruncatedLambda { k }),
                    _ => Err(bad()),
                }
            }
        }
    }
}

impl TryFrom<String> for LossSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LossSpec> for String {
    fn from(l: LossSpec) -> String {
        l.to_string()
    }
}

/// Hinge upper bound on the rank of `doc`: sum over all documents of
/// max(1 - (s_d - s_d'), 0), self-term included so the bound is at least 1.
pub fn rank_bound_linear(scores: &[f64], doc: usize) -> f64 {
    let s = scores[doc];
    scores.iter().map(|&o| (1.0 - (s - o)).max(0.0)).sum()
}

/// Logistic upper bound on the rank of `doc`: sum over all documents of
/// log2(1 + e^{s_d' - s_d}); the self-term contributes exactly 1.
pub fn rank_bound_log(scores: &[f64], doc: usize) -> f64 {
    let s = scores[doc];
    scores.iter().map(|&o| log2_1p_exp(o - s)).sum()
}

/// DCG-style alpha(r) = 1 / log2(1 + r), defined for real-valued rank bounds.
fn alpha_dcg(r: f64) -> f64 {
    1.0 / (1.0 + r).log2()
}

/// d/dr of -alpha_dcg(r): positive, so a looser rank bound costs more.
fn neg_alpha_dcg_prime(r: f64) -> f64 {
    let l = (1.0 + r).ln();
    LN_2 / ((1.0 + r) * l * l)
}

/// Gains per document and discounts per rank for the pairwise losses.
///
/// `discounts[r - 1]` is D_r; the table extends through r = n_docs so the
/// delta across any pair of occupied ranks is defined. Cutoff profiles hold
/// D_r = 0 for r > k, which is what lets pairs spanning the cutoff keep a
/// positive delta while pairs fully beyond it vanish.
#[derive(Debug, Clone)]
pub struct GainDiscountProfile {
    pub gains: Vec<f64>,
    discounts: Vec<f64>,
}

impl GainDiscountProfile {
    /// Full-ranking DCG discounts: D_r = 1 / log2(1 + r), so D_1 = 1.
    pub fn dcg(gains: Vec<f64>) -> Self {
        let n = gains.len();
        let discounts = (1..=n).map(|r| 1.0 / (1.0 + r as f64).log2()).collect();
        Self { gains, discounts }
    }

    /// DCG discounts truncated at k: D_r = 0 for r > k.
    pub fn dcg_at_k(gains: Vec<f64>, k: u32) -> Self {
        let n = gains.len();
        let discounts = (1..=n)
            .map(|r| if r as u32 <= k { 1.0 / (1.0 + r as f64).log2() } else { 0.0 })
            .collect();
        Self { gains, discounts }
    }

    /// D_r, zero beyond the table.
    pub fn discount(&self, rank: usize) -> f64 {
        debug_assert!(rank >= 1);
        self.discounts.get(rank - 1).copied().unwrap_or(0.0)
    }

    /// delta over a rank distance: D_dist - D_{dist+1}. Nonnegative for any
    /// monotone discount table.
    pub fn delta(&self, dist: usize) -> f64 {
        self.discount(dist) - self.discount(dist + 1)
    }
}

/// Pairwise LambdaLoss over all ordered pairs with G_n > G_m:
/// sum of delta_nm * |G_n - G_m| * log2(1 + e^{s(d_m) - s(d_n)}), where n and
/// m are ranks in `current`, fixed since the last expectation step. Documents
/// without clicks carry zero gain, so only clicked-versus-lesser pairs
/// contribute and a log with no clicks costs 0.
pub fn lambdaloss(scores: &[f64], profile: &GainDiscountProfile, current: &RankedList) -> f64 {
    pair_loss(scores, profile, current, None)
}

/// LambdaLoss restricted to pairs with at least one member currently ranked
/// within the top k; the discounts should be a full-ranking profile.
pub fn truncated_lambdaloss(
    scores: &[f64],
    profile: &GainDiscountProfile,
    current: &RankedList,
    k: u32,
) -> f64 {
    pair_loss(scores, profile, current, Some(k))
}

fn pair_loss(
    scores: &[f64],
    profile: &GainDiscountProfile,
    current: &RankedList,
    truncate_at: Option<u32>,
) -> f64 {
    let gains = &profile.gains;
    let mut total = 0.0;
    for (n_doc, &g_n) in gains.iter().enumerate() {
        if g_n <= 0.0 {
            continue;
        }
        let n = current.rank_of(n_doc);
        for (m_doc, &g_m) in gains.iter().enumerate() {
            if g_m >= g_n {
                continue;
            }
            let m = current.rank_of(m_doc);
            if let Some(k) = truncate_at {
                if n > k && m > k {
                    continue;
                }
            }
            let dist = n.abs_diff(m) as usize;
            let coeff = profile.delta(dist) * (g_n - g_m);
            if coeff != 0.0 {
                total += coeff * log2_1p_exp(scores[m_doc] - scores[n_doc]);
            }
        }
    }
    total
}

fn pair_gradient(
    scores: &[f64],
    profile: &GainDiscountProfile,
    current: &RankedList,
    truncate_at: Option<u32>,
    grad: &mut [f64],
) {
    let gains = &profile.gains;
    for (n_doc, &g_n) in gains.iter().enumerate() {
        if g_n <= 0.0 {
            continue;
        }
        let n = current.rank_of(n_doc);
        for (m_doc, &g_m) in gains.iter().enumerate() {
            if g_m >= g_n {
                continue;
            }
            let m = current.rank_of(m_doc);
            if let Some(k) = truncate_at {
                if n > k && m > k {
                    continue;
                }
            }
            let dist = n.abs_diff(m) as usize;
            let coeff = profile.delta(dist) * (g_n - g_m);
            if coeff != 0.0 {
                let p = coeff * sigmoid(scores[m_doc] - scores[n_doc]) / LN_2;
                grad[m_doc] += p;
                grad[n_doc] -= p;
            }
        }
    }
}

/// Per-query value of a monotonic @k bound (pre: spec is a monotonic kind).
/// The positive penalty term for documents currently ranked beyond k uses
/// the live scores but is constant with respect to them by construction.
pub fn monotonic_topk_loss(spec: LossSpec, scores: &[f64], weights: &[f64]) -> f64 {
    loss_value(spec, scores, weights, None)
}

fn bound_at(linear: bool, scores: &[f64], doc: usize) -> f64 {
    if linear {
        rank_bound_linear(scores, doc)
    } else {
        rank_bound_log(scores, doc)
    }
}

/// Per-query loss value. `weights` are the accumulated click weights omega;
/// `current` supplies the epoch-start ranking and is required only by the
/// pairwise kinds.
pub fn loss_value(
    spec: LossSpec,
    scores: &[f64],
    weights: &[f64],
    current: Option<&RankedList>,
) -> f64 {
    match spec {
        LossSpec::ArpLinearBound | LossSpec::ArpLogBound => {
            let linear = spec == LossSpec::ArpLinearBound;
            weights
                .iter()
                .enumerate()
                .filter(|(_, &w)| w != 0.0)
                .map(|(d, &w)| w * bound_at(linear, scores, d))
                .sum()
        }
        LossSpec::MonotonicDcgLinear { k } | LossSpec::MonotonicDcgLog { k } => {
            let linear = matches!(spec, LossSpec::MonotonicDcgLinear { .. });
            let live = crate::ranking::rank_scores(0, scores);
            let alpha_k = alpha_dcg(k as f64);
            weights
                .iter()
                .enumerate()
                .filter(|(_, &w)| w != 0.0)
                .map(|(d, &w)| {
                    let bound = bound_at(linear, scores, d);
                    let penalty = if live.rank_of(d) > k { alpha_k } else { 0.0 };
                    w * (-alpha_dcg(bound) + penalty)
                })
                .sum()
        }
        LossSpec::LambdaDcg => {
            let current = current.expect("lambda loss needs the epoch-start ranking");
            let profile = GainDiscountProfile::dcg(weights.to_vec());
            lambdaloss(scores, &profile, current)
        }
        LossSpec::LambdaDcgAt { k } => {
            let current = current.expect("lambda loss needs the epoch-start ranking");
            let profile = GainDiscountProfile::dcg_at_k(weights.to_vec(), k);
            lambdaloss(scores, &profile, current)
        }
        LossSpec::TruncatedLambda { k } => {
            let current = current.expect("lambda loss needs the epoch-start ranking");
            let profile = GainDiscountProfile::dcg(weights.to_vec());
            truncated_lambdaloss(scores, &profile, current, k)
        }
    }
}

/// Analytic gradient of [`loss_value`] with respect to the scores, written
/// into `grad` (overwritten, same length as `scores`). The indicator penalty
/// of the monotonic kinds is defined to carry zero gradient, so monotonic @k
/// gradients are independent of k.
pub fn loss_gradient(
    spec: LossSpec,
    scores: &[f64],
    weights: &[f64],
    current: Option<&RankedList>,
    grad: &mut [f64],
) {
    grad.fill(0.0);
    match spec {
        LossSpec::ArpLinearBound
        | LossSpec::ArpLogBound
        | LossSpec::MonotonicDcgLinear { .. }
        | LossSpec::MonotonicDcgLog { .. } => {
            let linear = matches!(
                spec,
                LossSpec::ArpLinearBound | LossSpec::MonotonicDcgLinear { .. }
            );
            let monotonic = matches!(
                spec,
                LossSpec::MonotonicDcgLinear { .. } | LossSpec::MonotonicDcgLog { .. }
            );
            for (d, &w) in weights.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                // chain rule through the rank bound; for the plain ARP kinds
                // the outer derivative is 1
                let outer = if monotonic {
                    w * neg_alpha_dcg_prime(bound_at(linear, scores, d))
                } else {
                    w
                };
                let s = scores[d];
                for (o, &other) in scores.iter().enumerate() {
                    if o == d {
                        continue;
                    }
                    let inner = if linear {
                        if 1.0 - (s - other) > 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    } else {
                        sigmoid(other - s) / LN_2
                    };
                    if inner != 0.0 {
                        grad[o] += outer * inner;
                        grad[d] -= outer * inner;
                    }
                }
            }
        }
        LossSpec::LambdaDcg => {
            let current = current.expect("lambda loss needs the epoch-start ranking");
            let profile = GainDiscountProfile::dcg(weights.to_vec());
            pair_gradient(scores, &profile, current, None, grad);
        }
        LossSpec::LambdaDcgAt { k } => {
            let current = current.expect("lambda loss needs the epoch-start ranking");
            let profile = GainDiscountProfile::dcg_at_k(weights.to_vec(), k);
            pair_gradient(scores, &profile, current, None, grad);
        }
        LossSpec::TruncatedLambda { k } => {
            let current = current.expect("lambda loss needs the epoch-start ranking");
            let profile = GainDiscountProfile::dcg(weights.to_vec());
            pair_gradient(scores, &profile, current, Some(k), grad);
        }
    }
}
