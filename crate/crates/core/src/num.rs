//! Scalar math shared by the tape and the pure forward path. Keeping one
//! implementation ensures decode-time scoring and training-time scoring
//! agree on every input.

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|a| (a - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// Log-softmax with an optional allow-mask. Blocked entries receive
/// negative infinity before normalization, so the result renormalizes over
/// the allowed set; blocked outputs stay at negative infinity.
pub(crate) fn masked_log_softmax(xs: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let allowed = |i: usize| mask.map_or(true, |m| m[i]);
    let max = xs
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    debug_assert!(max.is_finite(), "log-softmax over an empty allowed set");
    let lse = max
        + xs.iter()
            .enumerate()
            .filter(|(i, _)| allowed(*i))
            .map(|(_, v)| (v - max).exp())
            .sum::<f64>()
            .ln();
    xs.iter()
        .enumerate()
        .map(|(i, a)| if allowed(i) { a - lse } else { f64::NEG_INFINITY })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_normalizes() {
        let p = softmax(&[1.0, 2.0, 3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[2] > p[1] && p[1] > p[0]);
    }

    #[test]
    fn masked_equals_renormalized_unmasked() {
        let xs = [0.3, -1.2, 2.0, 0.7];
        let mask = [true, false, true, true];
        let masked = masked_log_softmax(&xs, Some(&mask));
        let unmasked = masked_log_softmax(&xs, None);
        let renorm: f64 = unmasked
            .iter()
            .enumerate()
            .filter(|(i, _)| mask[*i])
            .map(|(_, l)| l.exp())
            .sum();
        for i in 0..4 {
            if mask[i] {
                let expect = unmasked[i] - renorm.ln();
                assert!((masked[i] - expect).abs() < 1e-12);
            } else {
                assert_eq!(masked[i], f64::NEG_INFINITY);
            }
        }
    }
}
