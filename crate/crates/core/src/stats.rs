//! Small statistical helpers used by the analysis harnesses and tests.

use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

/// Chi-square goodness-of-fit p-value of `counts` against a uniform
/// distribution over all bins.
pub fn chi_square_uniform_p(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 || counts.len() < 2 {
        return 1.0;
    }
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum();
    upper_tail(stat, (counts.len() - 1) as f64)
}

/// Byte histogram of a slice.
pub fn byte_histogram(bytes: &[u8]) -> [u64; 256] {
    let mut h = [0u64; 256];
    for &b in bytes {
        h[b as usize] += 1;
    }
    h
}

/// Chi-square test of homogeneity between two samples of byte values.
/// Categories absent from both samples are dropped; a constant, identical
/// sample pair yields p = 1.
pub fn chi_square_two_sample_p(a: &[u8], b: &[u8]) -> f64 {
    let ha = byte_histogram(a);
    let hb = byte_histogram(b);
    let na = a.len() as f64;
    let nb = b.len() as f64;
    let n = na + nb;
    let mut stat = 0.0;
    let mut cats = 0usize;
    for k in 0..256 {
        let col = (ha[k] + hb[k]) as f64;
        if col == 0.0 {
            continue;
        }
        cats += 1;
        let ea = col * na / n;
        let eb = col * nb / n;
        stat += (ha[k] as f64 - ea).powi(2) / ea + (hb[k] as f64 - eb).powi(2) / eb;
    }
    if cats < 2 {
        return 1.0;
    }
    upper_tail(stat, (cats - 1) as f64)
}

fn upper_tail(stat: f64, df: f64) -> f64 {
    let dist = ChiSquared::new(df).expect("positive degrees of freedom");
    1.0 - dist.cdf(stat)
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard error of the mean (sample standard deviation / √n).
pub fn std_err(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y = slope·x + intercept`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> LinearFit {
    assert_eq!(xs.len(), ys.len());
    let mx = mean(xs);
    let my = mean(ys);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    LinearFit {
        slope,
        intercept,
        r_squared,
    }
}

/// One-sided paired t-test p-value for `H1: mean(after − before) > 0`.
pub fn paired_t_greater_p(before: &[f64], after: &[f64]) -> f64 {
    assert_eq!(before.len(), after.len());
    let diffs: Vec<f64> = after.iter().zip(before).map(|(a, b)| a - b).collect();
    let se = std_err(&diffs);
    let m = mean(&diffs);
    if se == 0.0 {
        return if m > 0.0 { 0.0 } else { 1.0 };
    }
    let t = m / se;
    let dist = StudentsT::new(0.0, 1.0, (diffs.len() - 1) as f64).expect("df > 0");
    1.0 - dist.cdf(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_counts_have_high_p() {
        assert!(chi_square_uniform_p(&[100, 100, 100, 100]) > 0.99);
        assert!(chi_square_uniform_p(&[400, 0, 0, 0]) < 1e-6);
    }

    #[test]
    fn two_sample_detects_shift() {
        let a: Vec<u8> = (0..1000).map(|i| (i % 4) as u8).collect();
        let b: Vec<u8> = (0..1000).map(|i| (i % 4 + 4) as u8).collect();
        assert!(chi_square_two_sample_p(&a, &b) < 1e-6);
        assert!(chi_square_two_sample_p(&a, &a) > 0.99);
        assert_eq!(chi_square_two_sample_p(&[7; 10], &[7; 10]), 1.0);
    }

    #[test]
    fn exact_line() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [3.0, 5.0, 7.0, 9.0];
        let f = linear_fit(&xs, &ys);
        assert!((f.slope - 2.0).abs() < 1e-12);
        assert!((f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn paired_t() {
        let before = [1.0, 2.0, 3.0, 4.0, 5.0];
        let after = [2.1, 3.0, 4.2, 4.9, 6.1];
        assert!(paired_t_greater_p(&before, &after) < 0.01);
        assert!(paired_t_greater_p(&after, &before) > 0.9);
    }
}
