//! Constrained per-layer bit allocation.
//!
//! The objective `Σ w_l · b_l` subject to `Σ b_l = ω · L` is separable with a
//! single equality constraint, so dynamic programming over
//! (layer, running bit sum) solves it exactly.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::BitWidthSet;
use crate::sensitivity::SensitivityProfile;

const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sense {
    /// Higher bits on layers with larger weight.
    Maximize,
    /// Literal minimization of the weighted bit sum.
    Minimize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchProblem {
    pub bit_set: BitWidthSet,
    /// Per-layer weights `w_l = t_l / n_l`.
    pub weights: Vec<f64>,
    /// Target average bit-width.
    pub omega: f64,
    pub sense: Sense,
}

impl SearchProblem {
    pub fn new(bit_set: BitWidthSet, weights: Vec<f64>, omega: f64, sense: Sense) -> Result<Self> {
        let p = Self {
            bit_set,
            weights,
            omega,
            sense,
        };
        if p.weights.is_empty() {
            return Err(Error::InvalidArgument("search needs at least one layer".into()));
        }
        if p.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidArgument("layer weights must be finite".into()));
        }
        if !p.omega.is_finite() {
            return Err(Error::InvalidArgument("omega must be finite".into()));
        }
        Ok(p)
    }

    pub fn from_profile(bit_set: BitWidthSet, profile: &SensitivityProfile, omega: f64, sense: Sense) -> Result<Self> {
        Self::new(bit_set, profile.weights(), omega, sense)
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    /// The integer bit sum `ω · L`, or an infeasibility error.
    pub fn target_sum(&self) -> Result<u32> {
        let l = self.layers();
        let exact = self.omega * l as f64;
        let rounded = exact.round();
        let reachable = reachable_sums(self.bit_set.bits(), l);
        if (exact - rounded).abs() > 1e-9 || rounded < 0.0 || !reachable.contains(&(rounded as u32)) {
            return Err(Error::Infeasible {
                omega: self.omega,
                layers: l,
                achievable: achievable_omegas(&self.bit_set, l),
            });
        }
        Ok(rounded as u32)
    }

    pub fn objective(&self, bits: &[u8]) -> f64 {
        self.weights.iter().zip(bits).map(|(w, &b)| w * f64::from(b)).sum()
    }

    fn assignment(&self, bits: Vec<u8>) -> SubNetAssignment {
        let sum: u32 = bits.iter().map(|&b| u32::from(b)).sum();
        SubNetAssignment {
            objective: self.objective(&bits),
            avg_bits: f64::from(sum) / bits.len() as f64,
            bits,
            accuracy: None,
        }
    }
}

/// Every sum reachable with `layers` picks from `bits`.
fn reachable_sums(bits: &[u8], layers: usize) -> BTreeSet<u32> {
    let mut sums = BTreeSet::from([0u32]);
    for _ in 0..layers {
        sums = sums
            .iter()
            .flat_map(|&s| bits.iter().map(move |&b| s + u32::from(b)))
            .collect();
    }
    sums
}

/// Average bit-widths achievable over `layers` layers, ascending.
pub fn achievable_omegas(set: &BitWidthSet, layers: usize) -> Vec<f64> {
    reachable_sums(set.bits(), layers)
        .into_iter()
        .map(|s| f64::from(s) / layers as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubNetAssignment {
    pub bits: Vec<u8>,
    pub objective: f64,
    pub avg_bits: f64,
    pub accuracy: Option<f32>,
}

impl SubNetAssignment {
    pub fn bit_sum(&self) -> u32 {
        self.bits.iter().map(|&b| u32::from(b)).sum()
    }

    pub fn bits_label(&self) -> String {
        self.bits.iter().map(u8::to_string).collect::<Vec<_>>().join(" ")
    }
}

/// Exact optimum over per-layer candidate lists. Candidates are tried in
/// descending order so near-ties resolve to the higher bit at the earliest
/// layer. Returns `None` when the target sum is unreachable.
fn solve_restricted(weights: &[f64], allowed: &[Vec<u8>], target: u32, sign: f64) -> Option<Vec<u8>> {
    let l = weights.len();
    let t = target as usize;
    // best[i][s]: optimum of layers i.. with remaining sum s.
    let mut best = vec![vec![f64::NEG_INFINITY; t + 1]; l + 1];
    best[l][0] = 0.0;
    for i in (0..l).rev() {
        for s in 0..=t {
            let mut v = f64::NEG_INFINITY;
            for &b in &allowed[i] {
                let b = usize::from(b);
                if b <= s && best[i + 1][s - b].is_finite() {
                    v = v.max(sign * weights[i] * b as f64 + best[i + 1][s - b]);
                }
            }
            best[i][s] = v;
        }
    }
    if !best[0][t].is_finite() {
        return None;
    }
    let mut bits = Vec::with_capacity(l);
    let mut s = t;
    for i in 0..l {
        let mut cands = allowed[i].clone();
        cands.sort_unstable_by(|a, b| b.cmp(a));
        let goal = best[i][s];
        let pick = cands
            .into_iter()
            .find(|&b| {
                let bu = usize::from(b);
                bu <= s && {
                    let v = sign * weights[i] * f64::from(b) + best[i + 1][s - bu];
                    v.is_finite() && v >= goal - TIE_TOL * goal.abs().max(1.0)
                }
            })
            .expect("an optimal continuation exists by construction");
        bits.push(pick);
        s -= usize::from(pick);
    }
    Some(bits)
}

fn sign(sense: Sense) -> f64 {
    match sense {
        Sense::Maximize => 1.0,
        Sense::Minimize => -1.0,
    }
}

/// Optimal assignment for `problem`.
pub fn solve(problem: &SearchProblem) -> Result<SubNetAssignment> {
    let target = problem.target_sum()?;
    let allowed = vec![problem.bit_set.bits().to_vec(); problem.layers()];
    let bits = solve_restricted(&problem.weights, &allowed, target, sign(problem.sense))
        .expect("target sum checked reachable");
    Ok(problem.assignment(bits))
}

/// The optimum followed by the re-solves obtained by pinning each layer to
/// every other candidate below the optimum's largest bit; infeasible pins
/// are skipped and duplicates dropped.
pub fn enumerate_solutions(problem: &SearchProblem) -> Result<Vec<SubNetAssignment>> {
    let first = solve(problem)?;
    let target = problem.target_sum()?;
    let max_bit = *first.bits.iter().max().expect("at least one layer");
    let lower: Vec<u8> = problem.bit_set.iter().filter(|&b| b < max_bit).collect();
    let mut seen: BTreeSet<Vec<u8>> = BTreeSet::from([first.bits.clone()]);
    let mut out = vec![first.clone()];
    for (i, &c) in first.bits.iter().enumerate() {
        for &b in &lower {
            if b == c {
                continue;
            }
            let mut allowed = vec![problem.bit_set.bits().to_vec(); problem.layers()];
            allowed[i] = vec![b];
            if let Some(bits) = solve_restricted(&problem.weights, &allowed, target, sign(problem.sense)) {
                if seen.insert(bits.clone()) {
                    out.push(problem.assignment(bits));
                }
            }
        }
    }
    Ok(out)
}

/// Non-dominated points under (maximize accuracy, minimize average bits),
/// sorted by average bits. Identical points collapse to the first.
pub fn pareto_front(points: &[SubNetAssignment]) -> Result<Vec<SubNetAssignment>> {
    let mut scored = Vec::with_capacity(points.len());
    for p in points {
        let acc = p
            .accuracy
            .ok_or_else(|| Error::InvalidArgument(format!("assignment {:?} has no accuracy", p.bits)))?;
        scored.push((p, acc));
    }
    let mut front: Vec<SubNetAssignment> = Vec::new();
    for (i, &(p, acc)) in scored.iter().enumerate() {
        let dominated = scored.iter().enumerate().any(|(j, &(q, qa))| {
            let weakly = qa >= acc && q.avg_bits <= p.avg_bits;
            let strictly = qa > acc || q.avg_bits < p.avg_bits;
            let earlier_duplicate = j < i && qa == acc && q.avg_bits == p.avg_bits;
            (weakly && strictly) || earlier_duplicate
        });
        if !dominated {
            front.push(p.clone());
        }
    }
    front.sort_by(|a, b| a.avg_bits.total_cmp(&b.avg_bits));
    Ok(front)
}
