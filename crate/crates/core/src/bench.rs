//! Timing harness contrasting the pruned local-attention kernel with the
//! quadratic full-attention reference across sequence lengths.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{
    attend_forward_into, full_attention_forward, AttendScratch, AttentionConfig,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize)]
pub struct BenchPoint {
    pub length: usize,
    pub sparse_ms: f64,
    pub dense_ms: f64,
    /// Median per-token kernel time in microseconds.
    pub sparse_us_per_token: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub window: usize,
    pub heads: usize,
    pub d_model: usize,
    pub keep_ratio: f64,
    pub runs: usize,
    pub points: Vec<BenchPoint>,
    /// Fitted growth exponents of time vs length (log-log slope).
    pub sparse_exponent: f64,
    pub dense_exponent: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Least-squares slope of ln(y) against ln(x).
pub fn growth_exponent(lengths: &[usize], times_ms: &[f64]) -> f64 {
    let n = lengths.len() as f64;
    let xs: Vec<f64> = lengths.iter().map(|&l| (l as f64).ln()).collect();
    let ys: Vec<f64> = times_ms.iter().map(|&t| t.max(1e-9).ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

/// Times both kernels at each length (warmup + median of `runs`), in f32.
/// Buffers are preallocated so the measurement sees the kernels, not the
/// allocator.
pub fn bench_attention(
    cfg: &AttentionConfig,
    lengths: &[usize],
    runs: usize,
) -> Result<BenchReport> {
    cfg.validate()?;
    if lengths.is_empty() || lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument {
            op: "bench_attention",
            msg: "lengths must be ascending and non-empty".into(),
        });
    }
    if runs < 3 {
        return Err(Error::InvalidArgument {
            op: "bench_attention",
            msg: "need at least 3 runs for a stable median".into(),
        });
    }

    let mut points = Vec::with_capacity(lengths.len());
    for &t in lengths {
        let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
        let q = Tensor::<f32>::randn(&[t, cfg.d_model], 1.0, &mut rng);
        let k = Tensor::<f32>::randn(&[t, cfg.d_model], 1.0, &mut rng);
        let v = Tensor::<f32>::randn(&[t, cfg.d_model], 1.0, &mut rng);
        let mask = vec![true; t];
        let mut out = Tensor::<f32>::zeros(&[t, cfg.d_model]);
        let mut scratch = AttendScratch::default();
        let mut row_scratch: Vec<f32> = Vec::with_capacity(t);

        let mut sparse_times = Vec::with_capacity(runs);
        for i in 0..runs + 2 {
            let start = Instant::now();
            attend_forward_into(&q, &k, &v, &mask, cfg, &mut out, None, None, &mut scratch)?;
            let elapsed = start.elapsed().as_secs_f64() * 1e3;
            if i >= 2 {
                sparse_times.push(elapsed);
            }
        }
        let mut dense_times = Vec::with_capacity(runs);
        for i in 0..runs + 2 {
            let start = Instant::now();
            full_attention_forward(&q, &k, &v, cfg.heads, &mut out, &mut row_scratch);
            let elapsed = start.elapsed().as_secs_f64() * 1e3;
            if i >= 2 {
                dense_times.push(elapsed);
            }
        }
        let sparse_ms = median(sparse_times);
        let dense_ms = median(dense_times);
        points.push(BenchPoint {
            length: t,
            sparse_ms,
            dense_ms,
            sparse_us_per_token: sparse_ms * 1e3 / t as f64,
        });
    }

    let sparse_exponent = growth_exponent(
        lengths,
        &points.iter().map(|p| p.sparse_ms).collect::<Vec<_>>(),
    );
    let dense_exponent = growth_exponent(
        lengths,
        &points.iter().map(|p| p.dense_ms).collect::<Vec<_>>(),
    );
    Ok(BenchReport {
        window: cfg.window,
        heads: cfg.heads,
        d_model: cfg.d_model,
        keep_ratio: cfg.keep_ratio,
        runs,
        points,
        sparse_exponent,
        dense_exponent,
    })
}

pub fn render_bench_table(report: &BenchReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:>8}  {:>12}  {:>12}  {:>14}\n",
        "T", "sparse (ms)", "dense (ms)", "us/token sparse"
    ));
    for p in &report.points {
        out.push_str(&format!(
            "{:>8}  {:>12.3}  {:>12.3}  {:>14.3}\n",
            p.length, p.sparse_ms, p.dense_ms, p.sparse_us_per_token
        ));
    }
    out.push_str(&format!(
        "growth exponents: sparse {:.3}, dense {:.3}\n",
        report.sparse_exponent, report.dense_exponent
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Variant;

    #[test]
    fn exponent_fit_recovers_known_slopes() {
        let lengths = [256usize, 512, 1024, 2048];
        let linear: Vec<f64> = lengths.iter().map(|&l| 0.002 * l as f64).collect();
        let quad: Vec<f64> = lengths.iter().map(|&l| 1e-6 * (l * l) as f64).collect();
        assert!((growth_exponent(&lengths, &linear) - 1.0).abs() < 1e-9);
        assert!((growth_exponent(&lengths, &quad) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_unordered_lengths() {
        let cfg = AttentionConfig {
            d_model: 16,
            heads: 2,
            window: 5,
            keep_ratio: 0.5,
            variant: Variant::PerHeadTopK,
            qkv_conv_width: 3,
        };
        assert!(bench_attention(&cfg, &[128, 64], 5).is_err());
        assert!(bench_attention(&cfg, &[], 5).is_err());
    }

    #[test]
    fn small_smoke_bench_produces_json() {
        let cfg = AttentionConfig {
            d_model: 16,
            heads: 2,
            window: 5,
            keep_ratio: 0.5,
            variant: Variant::PerHeadTopK,
            qkv_conv_width: 3,
        };
        let report = bench_attention(&cfg, &[32, 64], 3).unwrap();
        assert_eq!(report.points.len(), 2);
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("sparse_exponent"));
        let table = render_bench_table(&report);
        assert!(table.contains("growth exponents"));
    }
}
