//! Scaling micro-benchmark: per-step cost of the cross-attention
//! architecture versus a concatenation baseline that re-runs full
//! self-attention over all visual and text rows. FLOP counts come from the
//! instrumented gemm counter and are the primary signal; wall time is
//! informative.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::model::{CachedFrameStages, CrossMode, Frame, IncrementalState, Model, ModelError, TimedToken};
use crate::numkit::{flops, reset_flops, Real};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub frames: usize,
    pub cross_flops: f64,
    pub concat_flops: f64,
    pub cross_wall_s: f64,
    pub concat_wall_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuadraticFit {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub cross_fit: LinearFit,
    pub concat_fit: QuadraticFit,
    /// Wall and FLOP ratios between the largest and smallest frame counts.
    pub cross_wall_ratio: f64,
    pub cross_flop_ratio: f64,
    pub concat_wall_ratio: f64,
    pub concat_flop_ratio: f64,
}

impl BenchReport {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        s.push_str("frames  cross_flops  concat_flops  cross_ms  concat_ms\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{:>6}  {:>11.3e}  {:>12.3e}  {:>8.3}  {:>9.3}\n",
                r.frames,
                r.cross_flops,
                r.concat_flops,
                r.cross_wall_s * 1e3,
                r.concat_wall_s * 1e3
            ));
        }
        s.push_str(&format!(
            "cross per-step: linear in frames, slope {:.3e} flops/frame, r2 {:.6}\n",
            self.cross_fit.slope, self.cross_fit.r2
        ));
        s.push_str(&format!(
            "concat per-step: quadratic coefficient {:.3e} (r2 {:.6})\n",
            self.concat_fit.c2, self.concat_fit.r2
        ));
        s.push_str(&format!(
            "wall ratio large/small: cross {:.2} (flops predict {:.2}), concat {:.2} (flops predict {:.2})\n",
            self.cross_wall_ratio, self.cross_flop_ratio, self.concat_wall_ratio, self.concat_flop_ratio
        ));
        s
    }
}

/// Ordinary least squares y = a + b x.
pub fn fit_linear(xs: &[f64], ys: &[f64]) -> LinearFit {
    let n = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let intercept = (sy - slope * sx) / n;
    let mean = sy / n;
    let ss_tot: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    LinearFit { intercept, slope, r2 }
}

/// Least squares y = c0 + c1 x + c2 x^2 via the 3x3 normal equations.
pub fn fit_quadratic(xs: &[f64], ys: &[f64]) -> QuadraticFit {
    let n = xs.len();
    let mut a = [[0.0f64; 3]; 3];
    let mut b = [0.0f64; 3];
    for i in 0..n {
        let p = [1.0, xs[i], xs[i] * xs[i]];
        for r in 0..3 {
            for c in 0..3 {
                a[r][c] += p[r] * p[c];
            }
            b[r] += p[r] * ys[i];
        }
    }
    // Gaussian elimination with partial pivoting
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..3 {
            let f = a[r][col] / a[col][col];
            for c in col..3 {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut c = [0.0f64; 3];
    for r in (0..3).rev() {
        let mut v = b[r];
        for k in r + 1..3 {
            v -= a[r][k] * c[k];
        }
        c[r] = v / a[r][r];
    }
    let mean = ys.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - (c[0] + c[1] * x + c[2] * x * x)).powi(2))
        .sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    QuadraticFit { c0: c[0], c1: c[1], c2: c[2], r2 }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

fn bench_frames<T: Real>(model: &Model<T>, n: usize) -> Result<Vec<CachedFrameStages<T>>, ModelError> {
    (0..n)
        .map(|i| model.cache_frame(&Frame::Symbolic((i % 8) as u32), i as f64, i as u64))
        .collect()
}

/// Measure one architecture step at each frame count. The cross
/// architecture cost is a single incremental text-token step against F
/// cached frames (steady state: visual keys/values already built); the
/// baseline cost is a full self-attention forward over all F visual rows
/// plus the text prefix.
pub fn run_bench<T: Real>(
    model: &Model<T>,
    frame_counts: &[usize],
    text_len: usize,
    repeats: usize,
) -> Result<BenchReport, ModelError> {
    assert!(text_len >= 2 && repeats >= 1 && frame_counts.len() >= 2);
    let vocab = model.cfg.vocab as u32;
    let mut rows = Vec::new();
    for &f in frame_counts {
        let frames = bench_frames(model, f)?;
        let refs: Vec<&CachedFrameStages<T>> = frames.iter().collect();
        let text: Vec<TimedToken> = (0..text_len)
            .map(|i| TimedToken {
                id: (i as u32 * 7) % vocab,
                time: f as f64 + i as f64,
            })
            .collect();

        let mut cross_flops = 0.0;
        let mut cross_walls = Vec::with_capacity(repeats);
        for rep in 0..repeats {
            let mut st = IncrementalState::new(&model.cfg);
            for tok in &text[..text_len - 1] {
                model.incr_step(&mut st, *tok, &refs, CrossMode::Normal)?;
            }
            reset_flops();
            let t0 = Instant::now();
            model.incr_step(&mut st, text[text_len - 1], &refs, CrossMode::Normal)?;
            cross_walls.push(t0.elapsed().as_secs_f64());
            if rep == 0 {
                cross_flops = flops() as f64;
            }
        }

        let encoded: Vec<crate::model::FrameTokens<T>> = (0..f)
            .map(|i| model.encode_frame(&Frame::Symbolic((i % 8) as u32), i as f64))
            .collect::<Result<_, _>>()?;
        let mut concat_flops = 0.0;
        let mut concat_walls = Vec::with_capacity(repeats);
        for rep in 0..repeats {
            reset_flops();
            let t0 = Instant::now();
            model.concat_baseline_forward(&text, &encoded)?;
            concat_walls.push(t0.elapsed().as_secs_f64());
            if rep == 0 {
                concat_flops = flops() as f64;
            }
        }

        rows.push(BenchRow {
            frames: f,
            cross_flops,
            concat_flops,
            cross_wall_s: median(cross_walls),
            concat_wall_s: median(concat_walls),
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.frames as f64).collect();
    let cross_ys: Vec<f64> = rows.iter().map(|r| r.cross_flops).collect();
    let concat_ys: Vec<f64> = rows.iter().map(|r| r.concat_flops).collect();
    let first = &rows[0];
    let last = rows.last().unwrap();
    Ok(BenchReport {
        cross_fit: fit_linear(&xs, &cross_ys),
        concat_fit: fit_quadratic(&xs, &concat_ys),
        cross_wall_ratio: last.cross_wall_s / first.cross_wall_s,
        cross_flop_ratio: last.cross_flops / first.cross_flops,
        concat_wall_ratio: last.concat_wall_s / first.concat_wall_s,
        concat_flop_ratio: last.concat_flops / first.concat_flops,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn linear_fit_recovers_exact_line() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 + 2.0 * x).collect();
        let f = fit_linear(&xs, &ys);
        assert!((f.slope - 2.0).abs() < 1e-9);
        assert!((f.intercept - 3.0).abs() < 1e-9);
        assert!((f.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quadratic_fit_recovers_exact_parabola() {
        let xs = [1.0, 2.0, 4.0, 8.0, 16.0];
        let ys: Vec<f64> = xs.iter().map(|x| 5.0 - x + 0.5 * x * x).collect();
        let f = fit_quadratic(&xs, &ys);
        assert!((f.c0 - 5.0).abs() < 1e-6);
        assert!((f.c1 + 1.0).abs() < 1e-6);
        assert!((f.c2 - 0.5).abs() < 1e-8);
        assert!((f.r2 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cross_cost_linear_concat_cost_quadratic() {
        let model: Model<f32> = Model::init(ModelConfig::tiny(24), 2).unwrap();
        let report = run_bench(&model, &[2, 4, 8, 16], 8, 1).unwrap();
        assert!(report.cross_fit.r2 >= 0.99, "r2 {}", report.cross_fit.r2);
        assert!(report.concat_fit.c2 > 0.0);
        // per-step flops strictly increase with frames for both arms
        for w in report.rows.windows(2) {
            assert!(w[1].cross_flops > w[0].cross_flops);
            assert!(w[1].concat_flops > w[0].concat_flops);
        }
    }

    #[test]
    fn zero_frames_reduces_both_to_text_only_cost() {
        let model: Model<f32> = Model::init(ModelConfig::tiny(24), 2).unwrap();
        let text: Vec<TimedToken> = (0..6)
            .map(|i| TimedToken { id: i as u32, time: i as f64 })
            .collect();
        let mut st = IncrementalState::new(&model.cfg);
        for tok in &text[..5] {
            model.incr_step(&mut st, *tok, &[], CrossMode::Normal).unwrap();
        }
        reset_flops();
        model.incr_step(&mut st, text[5], &[], CrossMode::Normal).unwrap();
        let with_empty_cross = flops();
        let mut st2 = IncrementalState::new(&model.cfg);
        for tok in &text[..5] {
            model.incr_step(&mut st2, *tok, &[], CrossMode::Skip).unwrap();
        }
        reset_flops();
        model.incr_step(&mut st2, text[5], &[], CrossMode::Skip).unwrap();
        assert_eq!(with_empty_cross, flops());
    }
}
