//! Efficient-Symmetric-Linear values over small cooperative games.
//!
//! Every ESL value is a linear map from the characteristic function to the
//! payoff vector, parameterized by a coefficient sequence `b_0 .. b_a` with
//! `b_0 = 0` and `b_a = 1`. For player `k` the weight on `v(T)` is
//! `P(t-1) * b_t` when `k` is in `T` and `-P(t) * b_t` otherwise, where
//! `P(s) = (a-s-1)! s! / a!`. Coalitions whose size has `b_t = 0` never need
//! to be evaluated, which is what makes Equal Surplus linear in `a`.

mod multi_stage;
mod two_stage;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::RwLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coalition::{binomial, subsets_of_size, Coalition, MAX_PLAYERS};
use crate::error::{Error, Result};

pub use multi_stage::{cell_form, multi_stage, multi_stage_contributions, IntersectionCell, MultiStageResult};
pub use two_stage::{
    gap_attribution, group_linear_weights, group_values, two_stage, FeatureContributionMatrix,
    GapAttribution,
};

/// Tolerance used for efficiency checks throughout the crate.
pub const EFFICIENCY_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EslFamily {
    Shapley,
    Solidarity,
    Consensus,
    EqualSurplus,
    Lsp,
}

impl EslFamily {
    pub const ALL: [EslFamily; 5] = [
        EslFamily::EqualSurplus,
        EslFamily::Shapley,
        EslFamily::Solidarity,
        EslFamily::Consensus,
        EslFamily::Lsp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EslFamily::Shapley => "shapley",
            EslFamily::Solidarity => "solidarity",
            EslFamily::Consensus => "consensus",
            EslFamily::EqualSurplus => "equal_surplus",
            EslFamily::Lsp => "lsp",
        }
    }

    /// `b_s` for a game with `a` players.
    pub fn coefficient(self, s: usize, a: usize) -> f64 {
        if s == 0 {
            return 0.0;
        }
        if s >= a {
            return 1.0;
        }
        match self {
            EslFamily::Shapley => 1.0,
            EslFamily::Solidarity => 1.0 / (s as f64 + 1.0),
            EslFamily::EqualSurplus => {
                if s == 1 {
                    a as f64 - 1.0
                } else {
                    0.0
                }
            }
            EslFamily::Consensus => {
                if s == 1 {
                    a as f64 / 2.0
                } else {
                    0.5
                }
            }
            EslFamily::Lsp => binomial(a - 1, s) * s as f64 / 2f64.powi(a as i32 - 2),
        }
    }
}

impl fmt::Display for EslFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EslFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "shapley" => Ok(EslFamily::Shapley),
            "solidarity" => Ok(EslFamily::Solidarity),
            "consensus" => Ok(EslFamily::Consensus),
            "equal_surplus" | "es" => Ok(EslFamily::EqualSurplus),
            "lsp" => Ok(EslFamily::Lsp),
            other => Err(Error::Domain(format!("unknown ESL family `{other}`"))),
        }
    }
}

/// The full sequence `b_0 ..= b_a`.
pub fn esl_coefficients(family: EslFamily, a: usize) -> Result<Vec<f64>> {
    if a == 0 {
        return Err(Error::Domain("an ESL game needs at least one player".into()));
    }
    Ok((0..=a).map(|s| family.coefficient(s, a)).collect())
}

/// Shapley probability `P(s) = (a-s-1)! s! / a!` of a coalition of size `s`
/// not containing the focal player.
pub fn shapley_weight(a: usize, s: usize) -> f64 {
    debug_assert!(s < a);
    1.0 / (a as f64 * binomial(a - 1, s))
}

/// Weight of `v(T)` in the payoff of a member (`.0`) and of a non-member
/// (`.1`) of `T`.
#[inline]
fn term_weights(b: &[f64], a: usize, t: usize) -> (f64, f64) {
    let member = shapley_weight(a, t - 1) * b[t];
    let outsider = if t < a { -shapley_weight(a, t) * b[t] } else { 0.0 };
    (member, outsider)
}

/// Non-empty coalitions that carry non-zero weight for `family` with `a`
/// players, in size-then-bitmask order.
pub fn support(family: EslFamily, a: usize) -> Vec<Coalition> {
    (1..=a)
        .filter(|&t| family.coefficient(t, a) != 0.0)
        .flat_map(|t| subsets_of_size(a, t))
        .collect()
}

/// Explicit linear weights `(T, w)` such that `phi_k = sum w * v(T)`.
pub fn player_weights(family: EslFamily, a: usize, k: usize) -> Vec<(Coalition, f64)> {
    let b: Vec<f64> = (0..=a).map(|s| family.coefficient(s, a)).collect();
    support(family, a)
        .into_iter()
        .filter_map(|c| {
            let (m, o) = term_weights(&b, a, c.len());
            let w = if c.contains(k) { m } else { o };
            (w != 0.0).then_some((c, w))
        })
        .collect()
}

/// A transferable-utility game with a memoized characteristic function.
/// The empty coalition is worth zero and is never passed to the evaluator.
pub struct Game<F> {
    players: usize,
    evaluator: F,
    memo: RwLock<HashMap<Coalition, f64>>,
    evaluations: AtomicUsize,
}

impl<F> Game<F>
where
    F: Fn(Coalition) -> Result<f64> + Sync,
{
    pub fn new(players: usize, evaluator: F) -> Result<Self> {
        if players == 0 || players > MAX_PLAYERS {
            return Err(Error::Domain(format!(
                "player count {players} outside 1..={MAX_PLAYERS}"
            )));
        }
        Ok(Game {
            players,
            evaluator,
            memo: RwLock::new(HashMap::new()),
            evaluations: AtomicUsize::new(0),
        })
    }

    pub fn players(&self) -> usize {
        self.players
    }

    pub fn value(&self, c: Coalition) -> Result<f64> {
        if c.is_empty() {
            return Ok(0.0);
        }
        if let Some(&v) = self.memo.read().expect("memo poisoned").get(&c) {
            return Ok(v);
        }
        let v = (self.evaluator)(c)?;
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        self.memo.write().expect("memo poisoned").entry(c).or_insert(v);
        Ok(v)
    }

    /// Number of distinct coalitions passed to the evaluator so far.
    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::Relaxed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub family: EslFamily,
    pub values: Vec<f64>,
    /// `v` of the grand coalition.
    pub total: f64,
}

impl Allocation {
    pub fn efficiency_gap(&self) -> f64 {
        (self.values.iter().sum::<f64>() - self.total).abs()
    }

    /// `phi_g / v(grand)`, the share convention of the reports.
    pub fn shares(&self) -> Vec<f64> {
        self.values.iter().map(|v| v / self.total).collect()
    }
}

const PARALLEL_SUPPORT: usize = 256;

/// Exact ESL allocation. Only coalitions in [`support`] are evaluated.
pub fn esl_value<F>(game: &Game<F>, family: EslFamily) -> Result<Allocation>
where
    F: Fn(Coalition) -> Result<f64> + Sync,
{
    let a = game.players();
    let b = esl_coefficients(family, a)?;
    let coalitions = support(family, a);
    let worth: Vec<f64> = if coalitions.len() >= PARALLEL_SUPPORT {
        coalitions.par_iter().map(|&c| game.value(c)).collect::<Result<_>>()?
    } else {
        coalitions.iter().map(|&c| game.value(c)).collect::<Result<_>>()?
    };

    let mut values = vec![0.0; a];
    for (&c, &v) in coalitions.iter().zip(&worth) {
        let (member, outsider) = term_weights(&b, a, c.len());
        for (k, slot) in values.iter_mut().enumerate() {
            *slot += if c.contains(k) { member * v } else { outsider * v };
        }
    }
    let total = game.value(Coalition::full(a))?;
    Ok(Allocation { family, values, total })
}

/// Convenience wrapper for a characteristic given as a dense table indexed by
/// bitmask (entry 0 is ignored).
pub fn esl_value_dense(worth: &[f64], family: EslFamily) -> Result<Allocation> {
    let n = worth.len().trailing_zeros() as usize;
    if worth.len() != 1usize << n {
        return Err(Error::Shape(format!(
            "dense game table of length {} is not a power of two",
            worth.len()
        )));
    }
    let game = Game::new(n, |c: Coalition| Ok(worth[c.0 as usize]))?;
    esl_value(&game, family)
}
