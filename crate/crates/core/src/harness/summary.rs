use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::Result;

/// Final numbers of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub curriculum: String,
    pub seed: u64,
    pub mean_return: f64,
    pub success_rate: f64,
    pub final_kl_to_target: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub curriculum: String,
    pub seeds: usize,
    pub mean_return: f64,
    pub mean_return_se: f64,
    pub success_rate: f64,
    pub success_rate_se: f64,
    pub median_success_rate: f64,
    pub final_kl_to_target: f64,
    /// Welch test against the `spgl` rows; NaN for `spgl` itself or when absent.
    pub p_return_vs_spgl: f64,
    pub p_success_vs_spgl: f64,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Two-sided Welch's t-test p-value for unequal variances.
pub fn welch_p_value(a: &[f64], b: &[f64]) -> f64 {
    if a.len() < 2 || b.len() < 2 {
        return f64::NAN;
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 == 0.0 {
        return if ma == mb { 1.0 } else { 0.0 };
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    match StudentsT::new(0.0, 1.0, df) {
        Ok(dist) => 2.0 * (1.0 - dist.cdf(t.abs())),
        Err(_) => f64::NAN,
    }
}

/// One row per curriculum, in order of first appearance.
pub fn summarize(results: &[SeedResult]) -> Vec<SummaryRow> {
    let mut names: Vec<&str> = Vec::new();
    for r in results {
        if !names.contains(&r.curriculum.as_str()) {
            names.push(&r.curriculum);
        }
    }
    let column = |name: &str, f: fn(&SeedResult) -> f64| -> Vec<f64> {
        results.iter().filter(|r| r.curriculum == name).map(f).collect()
    };
    let spgl_ret = column("spgl", |r| r.mean_return);
    let spgl_succ = column("spgl", |r| r.success_rate);
    names
        .into_iter()
        .map(|name| {
            let ret = column(name, |r| r.mean_return);
            let succ = column(name, |r| r.success_rate);
            let kl = column(name, |r| r.final_kl_to_target);
            let n = ret.len() as f64;
            let (mr, vr) = mean_var(&ret);
            let (ms, vs) = mean_var(&succ);
            let vs_spgl = |x: &[f64], y: &[f64]| {
                if name == "spgl" || y.is_empty() {
                    f64::NAN
                } else {
                    welch_p_value(x, y)
                }
            };
            SummaryRow {
                curriculum: name.to_string(),
                seeds: ret.len(),
                mean_return: mr,
                mean_return_se: (vr / n).sqrt(),
                success_rate: ms,
                success_rate_se: (vs / n).sqrt(),
                median_success_rate: median(&succ),
                final_kl_to_target: mean_var(&kl).0,
                p_return_vs_spgl: vs_spgl(&ret, &spgl_ret),
                p_success_vs_spgl: vs_spgl(&succ, &spgl_succ),
            }
        })
        .collect()
}

pub fn write_summary_csv<W: Write>(out: W, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "curriculum",
        "seeds",
        "mean_return",
        "mean_return_se",
        "success_rate",
        "success_rate_se",
        "median_success_rate",
        "final_kl_to_target",
        "p_return_vs_spgl",
        "p_success_vs_spgl",
    ])
    .map_err(std::io::Error::from)?;
    for r in rows {
        let f = |x: f64| format!("{x:.8e}");
        w.write_record([
            r.curriculum.clone(),
            r.seeds.to_string(),
            f(r.mean_return),
            f(r.mean_return_se),
            f(r.success_rate),
            f(r.success_rate_se),
            f(r.median_success_rate),
            f(r.final_kl_to_target),
            f(r.p_return_vs_spgl),
            f(r.p_success_vs_spgl),
        ])
        .map_err(std::io::Error::from)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welch_reference_value() {
        // equal variances and sizes: t = -5 / sqrt(2.5/5 * 2) = -5, df = 8
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [6.0, 7.0, 8.0, 9.0, 10.0];
        let p = welch_p_value(&a, &b);
        let t = StudentsT::new(0.0, 1.0, 8.0).unwrap();
        assert!((p - 2.0 * t.cdf(-5.0)).abs() < 1e-12);
        assert!((p - 0.001052825).abs() < 1e-6);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn summary_rows() {
        let mk = |c: &str, s: u64, succ: f64| SeedResult {
            curriculum: c.into(),
            seed: s,
            mean_return: succ / 10.0,
            success_rate: succ,
            final_kl_to_target: 0.0,
        };
        let rows = summarize(&[mk("spgl", 0, 100.0), mk("spgl", 1, 90.0), mk("default", 0, 10.0), mk("default", 1, 30.0)]);
        assert_eq!(rows[0].curriculum, "spgl");
        assert!(rows[0].p_success_vs_spgl.is_nan());
        assert_eq!(rows[1].median_success_rate, 20.0);
        assert!(rows[1].p_success_vs_spgl < 0.1);
    }
}
