//! One-way link latencies between regions.

use rand::Rng;

use crate::time::SimDuration;

/// Average one-way latency between any two nodes in the single-datacenter
/// deployment, in milliseconds.
pub const LOCAL_LINK_MS: f64 = 0.13;
pub const DEFAULT_JITTER: f64 = 0.10;

pub const GCP_REGIONS: [&str; 4] = ["us-west1", "us-west2", "us-east1", "us-east4"];
/// Measured inter-region latencies (ms), in [`GCP_REGIONS`] order.
pub const GCP_LATENCY_MS: [[f64; 4]; 4] = [
    [0.0, 24.7, 66.7, 59.0],
    [24.7, 0.0, 62.9, 60.5],
    [66.7, 62.9, 0.0, 12.7],
    [59.0, 60.5, 12.7, 0.0],
];

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyMatrix {
    pub regions: Vec<String>,
    /// Symmetric; the diagonal is zero.
    pub delay_ms: Vec<Vec<f64>>,
    /// Delay between two distinct endpoints in the same region.
    pub intra_region_ms: f64,
    pub jitter_fraction: f64,
}

impl LatencyMatrix {
    pub fn local() -> Self {
        Self {
            regions: vec!["local".into()],
            delay_ms: vec![vec![0.0]],
            intra_region_ms: LOCAL_LINK_MS,
            jitter_fraction: DEFAULT_JITTER,
        }
    }

    pub fn gcp() -> Self {
        Self {
            regions: GCP_REGIONS.iter().map(|s| s.to_string()).collect(),
            delay_ms: GCP_LATENCY_MS.iter().map(|r| r.to_vec()).collect(),
            intra_region_ms: LOCAL_LINK_MS,
            jitter_fraction: DEFAULT_JITTER,
        }
    }

    pub fn region_count(&self) -> usize {
        self.regions.len()
    }

    pub fn validate(&self) -> Result<(), String> {
        let k = self.regions.len();
        if k == 0 || self.delay_ms.len() != k || self.delay_ms.iter().any(|r| r.len() != k) {
            return Err("latency matrix must be square and non-empty".into());
        }
        for i in 0..k {
            if self.delay_ms[i][i] != 0.0 {
                return Err(format!("diagonal entry {i} is not zero"));
            }
            for j in 0..k {
                let d = self.delay_ms[i][j];
                if !(d.is_finite() && d >= 0.0) || d != self.delay_ms[j][i] {
                    return Err(format!("entry ({i},{j}) is negative or asymmetric"));
                }
            }
        }
        if !(0.0..1.0).contains(&self.jitter_fraction) || self.intra_region_ms < 0.0 {
            return Err("jitter must be in [0,1) and intra-region delay non-negative".into());
        }
        Ok(())
    }

    /// Mean one-way delay between two endpoints placed in the given regions.
    pub fn base_delay_ms(&self, a: usize, b: usize) -> f64 {
        if a == b {
            self.intra_region_ms
        } else {
            self.delay_ms[a][b]
        }
    }

    /// Largest delay any delivery may take, jitter included.
    pub fn max_delay(&self) -> SimDuration {
        let max = self
            .delay_ms
            .iter()
            .flatten()
            .copied()
            .fold(self.intra_region_ms, f64::max);
        SimDuration::from_millis_f64(max * (1.0 + self.jitter_fraction))
    }

    /// Delay drawn uniformly within ±jitter of the base delay.
    pub fn sample<R: Rng + ?Sized>(&self, a: usize, b: usize, rng: &mut R) -> SimDuration {
        let base = self.base_delay_ms(a, b);
        let j = self.jitter_fraction;
        let factor = if j > 0.0 {
            rng.gen_range(1.0 - j..=1.0 + j)
        } else {
            1.0
        };
        SimDuration::from_millis_f64(base * factor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn profiles_are_well_formed() {
        LatencyMatrix::local().validate().unwrap();
        let g = LatencyMatrix::gcp();
        g.validate().unwrap();
        assert_eq!(g.base_delay_ms(0, 1), 24.7);
        assert_eq!(g.base_delay_ms(2, 3), 12.7);
        assert_eq!(g.base_delay_ms(3, 3), LOCAL_LINK_MS);
        assert_eq!(g.max_delay(), SimDuration::from_millis_f64(66.7 * 1.1));
    }

    #[test]
    fn samples_stay_within_jitter() {
        let g = LatencyMatrix::gcp();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let d = g.sample(0, 2, &mut rng).as_millis_f64();
            assert!(
                (66.7 * 0.9 - 0.001..=66.7 * 1.1 + 0.001).contains(&d),
                "{d}"
            );
        }
    }

    #[test]
    fn bad_matrices_rejected() {
        let mut m = LatencyMatrix::gcp();
        m.delay_ms[0][1] = 1.0;
        assert!(m.validate().is_err());
        let mut m = LatencyMatrix::local();
        m.delay_ms[0][0] = 1.0;
        assert!(m.validate().is_err());
    }
}
