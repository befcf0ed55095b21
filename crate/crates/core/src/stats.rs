//! Small statistics toolbox: R^2, Kolmogorov-Smirnov, normal CDF, and
//! weighted summaries used by the density machinery.

/// Coefficient of determination of predictions `x` against reference `y`:
/// R^2 = 1 - sum (y - x)^2 / sum (y - mean(y))^2.
pub fn r_squared(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let ss_res: f64 = x.iter().zip(y.iter()).map(|(a, b)| (b - a) * (b - a)).sum();
    let ss_tot: f64 = y.iter().map(|b| (b - mean) * (b - mean)).sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { f64::NEG_INFINITY };
    }
    1.0 - ss_res / ss_tot
}

/// Error function via the Abramowitz-Stegun 7.1.26 rational approximation
/// (|error| < 1.5e-7, plenty for KS p-values).
pub fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64, mean: f64, sd: f64) -> f64 {
    0.5 * (1.0 + erf((x - mean) / (sd * std::f64::consts::SQRT_2)))
}

/// One-sample KS statistic of `samples` against a reference CDF.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    let mut d = 0.0_f64;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        d = d.max((f - lo).abs()).max((hi - f).abs());
    }
    d
}

/// KS statistic between two empirical CDFs, the second given as weighted
/// samples (weights normalized to 1).
pub fn ks_statistic_weighted(samples: &[f64], points: &[f64], weights: &[f64]) -> f64 {
    assert_eq!(points.len(), weights.len());
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| points[i].partial_cmp(&points[j]).unwrap());
    let total: f64 = weights.iter().sum();
    let sorted_pts: Vec<f64> = order.iter().map(|&i| points[i]).collect();
    let mut cum = Vec::with_capacity(points.len());
    let mut acc = 0.0;
    for &i in &order {
        acc += weights[i] / total;
        cum.push(acc);
    }
    let cdf = |x: f64| -> f64 {
        match sorted_pts.binary_search_by(|p| p.partial_cmp(&x).unwrap()) {
            Ok(mut i) => {
                while i + 1 < sorted_pts.len() && sorted_pts[i + 1] <= x {
                    i += 1;
                }
                cum[i]
            }
            Err(0) => 0.0,
            Err(i) => cum[i - 1],
        }
    };
    ks_statistic(samples, cdf)
}

/// Asymptotic p-value of the one-sample KS test (Kolmogorov distribution
/// with the Stephens small-sample correction).
pub fn ks_pvalue(n: usize, d: f64) -> f64 {
    let n = n as f64;
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Weighted mean and variance (weights need not be normalized).
pub fn weighted_mean_var(points: &[f64], weights: &[f64]) -> (f64, f64) {
    let total: f64 = weights.iter().sum();
    let mean = points
        .iter()
        .zip(weights.iter())
        .map(|(x, w)| x * w)
        .sum::<f64>()
        / total;
    let var = points
        .iter()
        .zip(weights.iter())
        .map(|(x, w)| w * (x - mean) * (x - mean))
        .sum::<f64>()
        / total;
    (mean, var)
}

/// Weighted quantile by cumulative weight.
pub fn weighted_quantile(points: &[f64], weights: &[f64], q: f64) -> f64 {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| points[i].partial_cmp(&points[j]).unwrap());
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    for &i in &order {
        acc += weights[i] / total;
        if acc >= q {
            return points[i];
        }
    }
    points[*order.last().unwrap()]
}

/// Weighted Gaussian kernel density estimate on a grid. Bandwidth follows
/// the Silverman rule with the effective sample size standing in for n.
pub fn weighted_kde(points: &[f64], weights: &[f64], grid: &[f64]) -> Vec<f64> {
    let (_, var) = weighted_mean_var(points, weights);
    let sd = var.sqrt();
    let iqr = weighted_quantile(points, weights, 0.75) - weighted_quantile(points, weights, 0.25);
    let spread = if iqr > 0.0 {
        sd.min(iqr / 1.34)
    } else {
        sd
    };
    let total: f64 = weights.iter().sum();
    let ess = total * total / weights.iter().map(|w| w * w).sum::<f64>();
    let bw = (0.9 * spread * ess.powf(-0.2)).max(1e-8);
    let norm = 1.0 / (bw * (2.0 * std::f64::consts::PI).sqrt());
    grid.iter()
        .map(|&x| {
            let mut acc = 0.0;
            for (p, w) in points.iter().zip(weights.iter()) {
                let z = (x - p) / bw;
                acc += w * (-0.5 * z * z).exp();
            }
            norm * acc / total
        })
        .collect()
}

/// Simple equal-width histogram, normalized to unit mass (a density).
pub fn histogram(samples: &[f64], bins: usize, lo: f64, hi: f64) -> (Vec<f64>, Vec<f64>) {
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0.0_f64; bins];
    for &x in samples {
        if x < lo || x >= hi {
            continue;
        }
        let b = (((x - lo) / width) as usize).min(bins - 1);
        counts[b] += 1.0;
    }
    let mass: f64 = counts.iter().sum::<f64>() * width;
    if mass > 0.0 {
        for c in counts.iter_mut() {
            *c /= mass;
        }
    }
    let centers = (0..bins)
        .map(|b| lo + (b as f64 + 0.5) * width)
        .collect();
    (centers, counts)
}
