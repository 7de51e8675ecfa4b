//! Small descriptive statistics used by the evaluation metrics.

/// Kolmogorov-Smirnov statistic of `samples` against U(lo, hi).
pub fn ks_uniform(samples: &[f64], lo: f64, hi: f64) -> f64 {
    if samples.is_empty() {
        return 1.0;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let cdf = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
            let above = (i + 1) as f64 / n - cdf;
            let below = cdf - i as f64 / n;
            above.max(below)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic one-sample KS critical value at the 1% level.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len().max(1) as f64
}

/// Pearson correlation; 0 when either side has no variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "pearson needs paired samples");
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Average ranks (1-based), ties share their mean rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = r;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

/// Fraction of the `bins x bins` grid over [lo, hi]^2 holding at least one
/// point. Points outside the square are ignored.
pub fn occupancy_2d(xs: &[f64], ys: &[f64], bins: usize, lo: f64, hi: f64) -> f64 {
    let mut hit = vec![false; bins * bins];
    let bin = |v: f64| -> Option<usize> {
        if !(lo..=hi).contains(&v) {
            return None;
        }
        Some((((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1))
    };
    for (x, y) in xs.iter().zip(ys) {
        if let (Some(i), Some(j)) = (bin(*x), bin(*y)) {
            hit[i * bins + j] = true;
        }
    }
    hit.iter().filter(|h| **h).count() as f64 / (bins * bins) as f64
}

/// One-dimensional counterpart of [`occupancy_2d`].
pub fn occupancy_1d(xs: &[f64], bins: usize, lo: f64, hi: f64) -> f64 {
    let mut hit = vec![false; bins];
    for x in xs.iter().filter(|x| (lo..=hi).contains(*x)) {
        hit[(((x - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)] = true;
    }
    hit.iter().filter(|h| **h).count() as f64 / bins as f64
}

/// Pearson chi-square statistic of `samples` binned uniformly over [lo, hi].
pub fn chi_square_uniform(samples: &[f64], bins: usize, lo: f64, hi: f64) -> f64 {
    let mut counts = vec![0usize; bins];
    for v in samples {
        let b = (((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let expected = samples.len() as f64 / bins as f64;
    counts
        .iter()
        .map(|c| (*c as f64 - expected).powi(2) / expected)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ks_of_perfect_grid_is_small() {
        let n = 1000;
        let xs: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * (i as f64 + 0.5) / n as f64).collect();
        assert!(ks_uniform(&xs, -1.0, 1.0) <= 0.5 / n as f64 + 1e-12);
        let squeezed: Vec<f64> = xs.iter().map(|x| x * 0.5).collect();
        assert!((ks_uniform(&squeezed, -1.0, 1.0) - 0.25).abs() < 1e-2);
    }

    #[test]
    fn correlations() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&a, &[2.0, 4.0, 6.0, 8.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &[1.0, 10.0, 100.0, 1000.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&a, &[1.0; 4]), 0.0);
        assert_eq!(ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn occupancy_counts_cells() {
        assert_eq!(occupancy_2d(&[0.0], &[0.0], 10, -1.0, 1.0), 0.01);
        assert_eq!(occupancy_2d(&[-1.0, 1.0], &[-1.0, 1.0], 10, -1.0, 1.0), 0.02);
        assert_eq!(occupancy_2d(&[5.0], &[0.0], 10, -1.0, 1.0), 0.0);
        assert_eq!(occupancy_1d(&[-1.0, 0.05, 0.06], 10, -1.0, 1.0), 0.2);
    }
}
