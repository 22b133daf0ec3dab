//! Masking-group sampling for grouped input masking.

pub use crate::model::MaskingGroup;

use crate::rng::RngStream;

/// Categorical draw over (spatial, topological, none) with the given ratio.
/// Zero-ratio groups are never drawn.
pub fn sample_masking_group(ratios: (f64, f64, f64), rng: &mut RngStream) -> MaskingGroup {
    let total = ratios.0 + ratios.1 + ratios.2;
    debug_assert!(total > 0.0);
    let u = rng.next_f64() * total;
    if u < ratios.0 {
        MaskingGroup::Spatial
    } else if u < ratios.0 + ratios.1 {
        MaskingGroup::Topological
    } else {
        MaskingGroup::NoMask
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequencies_match_the_one_three_one_ratio() {
        let mut rng = RngStream::new(5, 0);
        let n = 1_000_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            match sample_masking_group((1.0, 3.0, 1.0), &mut rng) {
                MaskingGroup::Spatial => counts[0] += 1,
                MaskingGroup::Topological => counts[1] += 1,
                MaskingGroup::NoMask => counts[2] += 1,
            }
        }
        let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        for (f, expect) in freqs.iter().zip([0.2, 0.6, 0.2]) {
            assert!((f - expect).abs() <= 0.005, "{freqs:?}");
        }
    }

    #[test]
    fn degenerate_ratio_is_deterministic() {
        let mut rng = RngStream::new(6, 0);
        for _ in 0..1000 {
            assert_eq!(
                sample_masking_group((1.0, 0.0, 0.0), &mut rng),
                MaskingGroup::Spatial
            );
        }
    }
}
