//! Numerical validation helpers: central finite differences and sample
//! moments. Used by the test suites as the independent side of every
//! gradient and Monte Carlo check.

/// Central finite difference of a scalar function at `x` with step `h`.
pub fn central_difference(f: &mut dyn FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Relative error with an absolute floor, the standard gradient-check
/// agreement measure.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Mean, unbiased variance, skewness and excess kurtosis of a sample.
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
}

pub fn sample_moments(data: &[f64]) -> Moments {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let mut c2 = 0.0;
    let mut c3 = 0.0;
    let mut c4 = 0.0;
    for &v in data {
        let d = v - mean;
        c2 += d * d;
        c3 += d * d * d;
        c4 += d * d * d * d;
    }
    let var_biased = c2 / n;
    Moments {
        mean,
        variance: c2 / (n - 1.0),
        skewness: (c3 / n) / var_biased.powf(1.5),
        excess_kurtosis: (c4 / n) / (var_biased * var_biased) - 3.0,
    }
}

/// OLS slope and intercept; panics on fewer than two points (test helper).
pub fn ols_line(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    assert!(xs.len() >= 2 && xs.len() == ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}
