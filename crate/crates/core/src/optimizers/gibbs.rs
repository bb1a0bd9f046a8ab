use serde::{Deserialize, Serialize};

/// How per-sample norm scores are rescaled before the exponential.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreNormalization {
    /// Subtract the batch mean, divide by the population standard deviation.
    #[default]
    Standardize,
    None,
}

/// Importance weights over the batch, `p_i ∝ exp(λ s_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GibbsWeights {
    pub weights: Vec<f64>,
    pub lambda_used: f64,
    pub normalized_scores: Vec<f64>,
}

impl GibbsWeights {
    pub fn is_uniform(&self) -> bool {
        self.weights.windows(2).all(|w| w[0] == w[1])
    }

    /// Shannon entropy `−Σ p ln p` in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .weights
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }
}

fn uniform(k: usize, lambda: f64, normalized_scores: Vec<f64>) -> GibbsWeights {
    GibbsWeights {
        weights: vec![1.0 / k as f64; k],
        lambda_used: lambda,
        normalized_scores,
    }
}

/// Softmax of `λ ·` (normalized scores). `λ = 0`, equal scores and a
/// standardized spread below `1e-12` all give exactly uniform weights.
///
/// Panics on an empty score list.
pub fn gibbs_weights(scores: &[f64], lambda: f64, normalization: ScoreNormalization) -> GibbsWeights {
    let k = scores.len();
    assert!(k >= 1, "gibbs_weights needs at least one score");
    let normalized: Vec<f64> = match normalization {
        ScoreNormalization::None => scores.to_vec(),
        ScoreNormalization::Standardize => {
            let mean = scores.iter().sum::<f64>() / k as f64;
            let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / k as f64;
            let sd = var.sqrt();
            if sd < 1e-12 {
                return uniform(k, lambda, vec![0.0; k]);
            }
            scores.iter().map(|s| (s - mean) / sd).collect()
        }
    };
    if lambda == 0.0 {
        return uniform(k, lambda, normalized);
    }
    let logits: Vec<f64> = normalized.iter().map(|s| lambda * s).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    GibbsWeights {
        weights: exps.iter().map(|e| e / total).collect(),
        lambda_used: lambda,
        normalized_scores: normalized,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_zero_is_uniform() {
        let w = gibbs_weights(&[0.1, 5.0, 2.0], 0.0, ScoreNormalization::None);
        assert!(w.is_uniform());
        assert_eq!(w.weights[0], 1.0 / 3.0);
    }

    #[test]
    fn two_score_softmax_by_hand() {
        let w = gibbs_weights(&[1.0, 2.0], 1.0, ScoreNormalization::None);
        let e1 = 1f64.exp();
        let e2 = 2f64.exp();
        assert!((w.weights[0] - e1 / (e1 + e2)).abs() < 1e-15);
        assert!((w.weights[0] - 0.2689).abs() < 1e-4);
        assert!((w.weights[1] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn equal_scores_are_uniform_for_any_lambda() {
        for lambda in [0.5, 3.0, 1e6] {
            for norm in [ScoreNormalization::None, ScoreNormalization::Standardize] {
                assert!(gibbs_weights(&[2.5; 4], lambda, norm).is_uniform());
            }
        }
    }

    #[test]
    fn huge_lambda_concentrates_on_the_largest_score() {
        let w = gibbs_weights(&[0.3, 0.9, 0.1], 1e6, ScoreNormalization::Standardize);
        assert!(w.weights[1] > 1.0 - 1e-12);
    }
}
