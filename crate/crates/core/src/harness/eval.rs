//! Sample-based evaluation with paired seeds.

use serde::Serialize;

use crate::curriculum::ConditionalGenerator;
use crate::error::{Error, Result};
use crate::rewards::score_batch;

use super::models::Model;
use super::train::Context;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WinStats {
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
    /// `wins / n`: a win needs a strictly larger reward.
    pub win_rate: f64,
    /// `(wins + ties / 2) / n`.
    pub tie_split_win_rate: f64,
    pub reference_mean_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub n_samples: usize,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub versus_reference: Option<WinStats>,
}

impl EvalSummary {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("summary serializes")
    }
}

/// Compares paired rewards; row `i` of both lists shares a seed.
pub fn win_stats(ours: &[f64], theirs: &[f64]) -> Result<WinStats> {
    if ours.len() != theirs.len() || ours.is_empty() {
        return Err(Error::Contract("win rate needs equal, non-empty reward lists".into()));
    }
    let (mut wins, mut ties, mut losses) = (0, 0, 0);
    for (a, b) in ours.iter().zip(theirs) {
        if a > b {
            wins += 1;
        } else if a == b {
            ties += 1;
        } else {
            losses += 1;
        }
    }
    let n = ours.len() as f64;
    Ok(WinStats {
        wins,
        ties,
        losses,
        win_rate: wins as f64 / n,
        tie_split_win_rate: (wins as f64 + 0.5 * ties as f64) / n,
        reference_mean_reward: theirs.iter().sum::<f64>() / n,
    })
}

/// Draws `n` samples from `model` (and `reference`, with the same noise),
/// scores them and aggregates.
pub fn evaluate(ctx: &Context, model: &Model, reference: Option<&Model>, n: usize, seed: u64) -> Result<EvalSummary> {
    if n == 0 {
        return Err(Error::Contract("evaluation needs at least one sample".into()));
    }
    let (ids, c) = ctx.cycled_conditions(n)?;
    let score = |m: &Model| -> Result<Vec<f64>> {
        let x = ctx.sampler(m).generate(&c, seed)?;
        score_batch(&ctx.reward, &x, &ids)
    };
    let r = score(model)?;
    let mean = r.iter().sum::<f64>() / n as f64;
    let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let versus_reference = match reference {
        Some(m) => Some(win_stats(&r, &score(m)?)?),
        None => None,
    };
    Ok(EvalSummary {
        n_samples: n,
        mean_reward: mean,
        std_reward: var.sqrt(),
        versus_reference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn win_counting() {
        let w = win_stats(&[1.0, 2.0, 3.0, 0.0], &[0.0, 2.0, 4.0, -1.0]).unwrap();
        assert_eq!((w.wins, w.ties, w.losses), (2, 1, 1));
        assert_eq!(w.win_rate, 0.5);
        assert_eq!(w.tie_split_win_rate, 0.625);
        let s = win_stats(&[0.3, 0.1], &[0.3, 0.1]).unwrap();
        assert_eq!((s.win_rate, s.tie_split_win_rate), (0.0, 0.5));
        assert!(win_stats(&[], &[]).is_err());
    }
}
