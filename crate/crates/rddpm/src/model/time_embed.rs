/// Fixed sinusoidal features of the normalized timestep t/T.
///
/// Feature pairs are (sin, cos) at geometrically spaced frequencies from π
/// up to πT, so the lowest pair alone is injective over t ∈ {1,…,T} (its
/// cosine is strictly decreasing on (0, π]) and the highest frequency still
/// resolves unit steps of t. The embedding is deterministic and has no
/// trainable parameters.
#[derive(Clone, Debug)]
pub struct TimeEmbedding {
    dim: usize,
}

impl TimeEmbedding {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 1, "embedding dimension must be positive");
        TimeEmbedding { dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Embeds timestep `t` of a `t_steps`-step chain.
    pub fn embed(&self, t: usize, t_steps: usize) -> Vec<f64> {
        let ratio = t as f64 / t_steps as f64;
        let pairs = self.dim.div_ceil(2);
        let mut out = Vec::with_capacity(self.dim);
        for k in 0..pairs {
            let growth = if pairs > 1 { k as f64 / (pairs - 1) as f64 } else { 0.0 };
            let omega = std::f64::consts::PI * (t_steps as f64).powf(growth);
            let phase = omega * ratio;
            out.push(phase.sin());
            if out.len() < self.dim {
                out.push(phase.cos());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_matches_dimension() {
        for dim in [1, 2, 3, 8, 17] {
            assert_eq!(TimeEmbedding::new(dim).embed(5, 100).len(), dim);
        }
    }

    #[test]
    fn deterministic() {
        let e = TimeEmbedding::new(8);
        assert_eq!(e.embed(42, 200), e.embed(42, 200));
    }

    #[test]
    fn injective_over_all_timesteps() {
        let e = TimeEmbedding::new(2);
        for t_steps in [1usize, 2, 200, 1000] {
            let mut seen: Vec<Vec<u64>> = Vec::new();
            for t in 1..=t_steps {
                let bits: Vec<u64> = e.embed(t, t_steps).iter().map(|v| v.to_bits()).collect();
                assert!(!seen.contains(&bits), "duplicate embedding at t={t}, T={t_steps}");
                seen.push(bits);
            }
        }
    }

    #[test]
    fn values_bounded_by_one() {
        let e = TimeEmbedding::new(16);
        for t in 1..=1000 {
            assert!(e.embed(t, 1000).iter().all(|v| v.abs() <= 1.0));
        }
    }
}
