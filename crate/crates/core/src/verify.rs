//! Randomized finite-difference battery over the differentiable ops.
//!
//! Every case reduces the op output to a scalar through a fixed random
//! projection `sum(r ⊙ y)` (or a cross-entropy loss) and compares the tape
//! gradient with central differences. Ops that are linear in the checked
//! argument use a wide step, since their differences carry no truncation
//! error and a wide step keeps f32 rounding out of the quotient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dcn::{build_dcn, DcnConfig};
use crate::error::Result;
use crate::tensor::{grad_check_coords, Graph, RunningStats, Tensor, Var};

/// Tolerance for smooth ops checked in isolation.
pub const SMOOTH_TOLERANCE: f64 = 1e-4;
/// Tolerance for chains through batch-norm, ReLU or max-pooling.
pub const CHAIN_TOLERANCE: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseKind {
    LinearInput,
    LinearWeight,
    ConvInput,
    ConvWeight,
    Softmax,
    CrossEntropy,
    AvgPool,
    GlobalAvgPool,
    Product,
    Concat,
    BatchNormInput,
    BatchNormAffine,
    MaxPool,
    ConvBnReluChain,
    DenseBlock,
}

impl CaseKind {
    pub const ALL: [CaseKind; 15] = [
        CaseKind::LinearInput,
        CaseKind::LinearWeight,
        CaseKind::ConvInput,
        CaseKind::ConvWeight,
        CaseKind::Softmax,
        CaseKind::CrossEntropy,
        CaseKind::AvgPool,
        CaseKind::GlobalAvgPool,
        CaseKind::Product,
        CaseKind::Concat,
        CaseKind::BatchNormInput,
        CaseKind::BatchNormAffine,
        CaseKind::MaxPool,
        CaseKind::ConvBnReluChain,
        CaseKind::DenseBlock,
    ];

    pub fn is_smooth(self) -> bool {
        !matches!(
            self,
            CaseKind::BatchNormInput
                | CaseKind::BatchNormAffine
                | CaseKind::MaxPool
                | CaseKind::ConvBnReluChain
                | CaseKind::DenseBlock
        )
    }

    pub fn tolerance(self) -> f64 {
        if self.is_smooth() {
            SMOOTH_TOLERANCE
        } else {
            CHAIN_TOLERANCE
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub kind: CaseKind,
    pub seed: u64,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coordinates: usize,
    /// Coordinates skipped because their difference interval crosses a
    /// ReLU or max-pool branch point.
    pub kinked: usize,
}

impl CaseResult {
    /// Below tolerance, with at most a quarter of the coordinates skipped.
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance && self.kinked * 4 <= self.coordinates
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

fn project(g: &mut Graph, y: Var, r: &Tensor) -> Result<Var> {
    let rv = g.constant(r);
    let p = g.mul(y, rv)?;
    Ok(g.sum(p))
}

/// At most `limit` distinct coordinates of a tensor with `n` elements.
fn sample_coords(rng: &mut ChaCha8Rng, n: usize, limit: usize) -> Vec<usize> {
    if n <= limit {
        return (0..n).collect();
    }
    let mut c = rand::seq::index::sample(rng, n, limit).into_vec();
    c.sort_unstable();
    c
}

/// Runs one randomized case of `kind`.
pub fn run_case(kind: CaseKind, seed: u64) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let rng = &mut rng;
    let n = rng.gen_range(2..4usize);
    let c = rng.gen_range(1..4usize);
    let h = rng.gen_range(3..7usize);
    let w = rng.gen_range(3..7usize);
    let wide = 0.25f32;
    let fine = 1e-2f32;
    let chain = 3e-3f32;

    let report = match kind {
        CaseKind::LinearInput | CaseKind::LinearWeight => {
            let (f_in, k) = (rng.gen_range(2..9), rng.gen_range(2..6));
            let input = uniform(rng, &[n, f_in], -1.0, 1.0);
            let weight = uniform(rng, &[f_in, k], -1.0, 1.0);
            let bias = uniform(rng, &[k], -1.0, 1.0);
            let r = uniform(rng, &[n, k], -1.0, 1.0);
            if kind == CaseKind::LinearInput {
                let f = |g: &mut Graph, v: Var| {
                    let (wv, bv) = (g.constant(&weight), g.constant(&bias));
                    let y = g.linear(v, wv, bv)?;
                    project(g, y, &r)
                };
                let coords = sample_coords(rng, input.numel(), 64);
                grad_check_coords(f, &input, wide, &coords)?
            } else {
                let f = |g: &mut Graph, v: Var| {
                    let (iv, bv) = (g.constant(&input), g.constant(&bias));
                    let y = g.linear(iv, v, bv)?;
                    project(g, y, &r)
                };
                let coords = sample_coords(rng, weight.numel(), 64);
                grad_check_coords(f, &weight, wide, &coords)?
            }
        }
        CaseKind::ConvInput | CaseKind::ConvWeight => {
            let k = rng.gen_range(1..4usize).min(h).min(w);
            let stride = rng.gen_range(1..3);
            let pad = rng.gen_range(0..k);
            let co = rng.gen_range(1..4);
            let input = uniform(rng, &[n, c, h, w], -1.0, 1.0);
            let weight = uniform(rng, &[co, c, k, k], -1.0, 1.0);
            let oh = (h + 2 * pad - k) / stride + 1;
            let ow = (w + 2 * pad - k) / stride + 1;
            let r = uniform(rng, &[n, co, oh, ow], -1.0, 1.0);
            if kind == CaseKind::ConvInput {
                let f = |g: &mut Graph, v: Var| {
                    let wv = g.constant(&weight);
                    let y = g.conv2d(v, wv, stride, pad)?;
                    project(g, y, &r)
                };
                let coords = sample_coords(rng, input.numel(), 64);
                grad_check_coords(f, &input, wide, &coords)?
            } else {
                let f = |g: &mut Graph, v: Var| {
                    let iv = g.constant(&input);
                    let y = g.conv2d(iv, v, stride, pad)?;
                    project(g, y, &r)
                };
                let coords = sample_coords(rng, weight.numel(), 64);
                grad_check_coords(f, &weight, wide, &coords)?
            }
        }
        CaseKind::Softmax => {
            let k = rng.gen_range(2..6);
            let logits = uniform(rng, &[n, k], -2.0, 2.0);
            // The softmax Jacobian annihilates constant rows, so a row offset
            // in `r` only inflates |f| and with it the rounding in f(x±eps).
            let mut r = uniform(rng, &[n, k], -1.0, 1.0);
            for row in r.data_mut().chunks_mut(k) {
                let m = row.iter().sum::<f32>() / k as f32;
                row.iter_mut().for_each(|v| *v -= m);
            }
            let f = |g: &mut Graph, v: Var| {
                let y = g.softmax(v)?;
                project(g, y, &r)
            };
            let coords = sample_coords(rng, logits.numel(), 64);
            grad_check_coords(f, &logits, fine, &coords)?
        }
        CaseKind::CrossEntropy => {
            let k = rng.gen_range(2..6);
            let logits = uniform(rng, &[n, k], -2.0, 2.0);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let f = |g: &mut Graph, v: Var| g.cross_entropy(v, &labels);
            let coords = sample_coords(rng, logits.numel(), 64);
            grad_check_coords(f, &logits, fine, &coords)?
        }
        CaseKind::AvgPool => {
            let k = rng.gen_range(1..3usize);
            let stride = rng.gen_range(1..3usize);
            let input = uniform(rng, &[n, c, h, w], -1.0, 1.0);
            let r = uniform(rng, &[n, c, (h - k) / stride + 1, (w - k) / stride + 1], -1.0, 1.0);
            let f = |g: &mut Graph, v: Var| {
                let y = g.avg_pool2d(v, k, stride)?;
                project(g, y, &r)
            };
            let coords = sample_coords(rng, input.numel(), 64);
            grad_check_coords(f, &input, wide, &coords)?
        }
        CaseKind::GlobalAvgPool => {
            let input = uniform(rng, &[n, c, h, w], -1.0, 1.0);
            let r = uniform(rng, &[n, c], -1.0, 1.0);
            let f = |g: &mut Graph, v: Var| {
                let y = g.global_avg_pool(v)?;
                project(g, y, &r)
            };
            let coords = sample_coords(rng, input.numel(), 64);
            grad_check_coords(f, &input, wide, &coords)?
        }
        CaseKind::Product => {
            let input = uniform(rng, &[n, c, h], -1.0, 1.0);
            let r = uniform(rng, &[n, c, h], -1.0, 1.0);
            // quadratic: central differences are exact up to rounding
            let f = |g: &mut Graph, v: Var| {
                let sq = g.mul(v, v)?;
                project(g, sq, &r)
            };
            let coords = sample_coords(rng, input.numel(), 64);
            grad_check_coords(f, &input, wide, &coords)?
        }
        CaseKind::Concat => {
            let c2 = rng.gen_range(1..4);
            let input = uniform(rng, &[n, c, h, w], -1.0, 1.0);
            let other = uniform(rng, &[n, c2, h, w], -1.0, 1.0);
            let r = uniform(rng, &[n, c + c2, h, w], -1.0, 1.0);
            let f = |g: &mut Graph, v: Var| {
                let o = g.constant(&other);
                let y = g.concat_channels(&[o, v])?;
                project(g, y, &r)
            };
            let coords = sample_coords(rng, input.numel(), 64);
            grad_check_coords(f, &input, wide, &coords)?
        }
        CaseKind::BatchNormInput | CaseKind::BatchNormAffine => {
            let input = uniform(rng, &[n, c, h, w], -1.0, 1.0);
            let gamma = uniform(rng, &[c], 0.5, 1.5);
            let beta = uniform(rng, &[c], -0.5, 0.5);
            let r = uniform(rng, &[n, c, h, w], -1.0, 1.0);
            if kind == CaseKind::BatchNormInput {
                let f = |g: &mut Graph, v: Var| {
                    let (gv, bv) = (g.constant(&gamma), g.constant(&beta));
                    let y = g.batch_norm2d(v, gv, bv, &mut RunningStats::new(c), true)?;
                    project(g, y, &r)
                };
                let coords = sample_coords(rng, input.numel(), 64);
                grad_check_coords(f, &input, fine, &coords)?
            } else {
                let fg = |g: &mut Graph, v: Var| {
                    let (xv, bv) = (g.constant(&input), g.constant(&beta));
                    let y = g.batch_norm2d(xv, v, bv, &mut RunningStats::new(c), true)?;
                    project(g, y, &r)
                };
                let fb = |g: &mut Graph, v: Var| {
                    let (xv, gv) = (g.constant(&input), g.constant(&gamma));
                    let y = g.batch_norm2d(xv, gv, v, &mut RunningStats::new(c), true)?;
                    project(g, y, &r)
                };
                let coords: Vec<usize> = (0..c).collect();
                let mut rep = grad_check_coords(fg, &gamma, fine, &coords)?;
                let rb = grad_check_coords(fb, &beta, fine, &coords)?;
                if rb.max_rel_error > rep.max_rel_error {
                    rep = rb;
                }
                rep
            }
        }
        CaseKind::MaxPool => {
            let k = rng.gen_range(2..4usize);
            let stride = rng.gen_range(1..3usize);
            let pad = rng.gen_range(0..=k / 2);
            // a shuffled grid keeps window maxima separated by more than 2·eps
            let numel = n * c * h * w;
            let mut vals: Vec<f32> = (0..numel).map(|i| i as f32 / numel as f32 * 2.0 - 1.0).collect();
            rand::seq::SliceRandom::shuffle(vals.as_mut_slice(), rng);
            let input = Tensor::new(&[n, c, h, w], vals)?;
            let oh = (h + 2 * pad - k) / stride + 1;
            let ow = (w + 2 * pad - k) / stride + 1;
            let r = uniform(rng, &[n, c, oh, ow], -1.0, 1.0);
            let eps = 0.25 / numel as f32;
            let f = |g: &mut Graph, v: Var| {
                let y = g.max_pool2d(v, k, stride, pad)?;
                project(g, y, &r)
            };
            let coords = sample_coords(rng, numel, 64);
            grad_check_coords(f, &input, eps, &coords)?
        }
        CaseKind::ConvBnReluChain => {
            let co = rng.gen_range(2..4);
            let k = rng.gen_range(2..6);
            let input = uniform(rng, &[n, c, h, w], -1.0, 1.0);
            let weight = uniform(rng, &[co, c, 3, 3], -0.5, 0.5);
            let fc = uniform(rng, &[co, k], -1.0, 1.0);
            let bias = uniform(rng, &[k], -0.1, 0.1);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let f = |g: &mut Graph, v: Var| {
                let wv = g.constant(&weight);
                let y = g.conv2d(v, wv, 1, 1)?;
                let (gv, bv) = (g.constant(&Tensor::full(&[co], 1.0)), g.constant(&Tensor::zeros(&[co])));
                let y = g.batch_norm2d(y, gv, bv, &mut RunningStats::new(co), true)?;
                let y = g.relu(y);
                let y = g.global_avg_pool(y)?;
                let (fw, fb) = (g.constant(&fc), g.constant(&bias));
                let logits = g.linear(y, fw, fb)?;
                g.cross_entropy(logits, &labels)
            };
            let coords = sample_coords(rng, input.numel(), 64);
            if std::env::var("DIG").is_ok() {
                eprintln!("DIG n{n} c{c} h{h} w{w} co{co} k{k}");
                for e in [1e-4f32, 3e-4, 1e-3, 3e-3] {
                    let r = grad_check_coords(f, &input, e, &coords)?;
                    let wi = r.checked.iter().position(|&q| q == r.worst_index).unwrap();
                    let scale = r.analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    eprintln!(
                        "DIG eps {e:e} err {:.3e} a {:.6e} n {:.6e} scale {scale:.3e} kinked {}",
                        r.max_rel_error,
                        r.analytic[wi],
                        r.numeric[wi],
                        r.kinked.len()
                    );
                }
            }
            grad_check_coords(f, &input, chain, &coords)?
        }
        CaseKind::DenseBlock => {
            let cfg = DcnConfig {
                block_config: vec![rng.gen_range(1..3)],
                growth_rate: 4,
                init_features: 8,
                bottleneck_factor: 2,
                dropout: 0.0,
                compression: 0.5,
                num_classes: 4,
                input_size: 8,
                in_channels: c,
            };
            let model = build_dcn(&cfg, rng.gen())?;
            let input = uniform(rng, &[n, c, 8, 8], -1.0, 1.0);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
            let f = |g: &mut Graph, v: Var| {
                let mut m = model.clone();
                let rec = m.forward(g, v)?;
                g.cross_entropy(rec.logits, &labels)
            };
            let coords = sample_coords(rng, input.numel(), 48);
            grad_check_coords(f, &input, chain, &coords)?
        }
    };
    Ok(CaseResult {
        kind,
        seed,
        max_rel_error: report.max_rel_error,
        tolerance: kind.tolerance(),
        coordinates: report.checked.len(),
        kinked: report.kinked.len(),
    })
}

/// Runs `count` cases cycling through every [`CaseKind`].
pub fn run_battery(seed: u64, count: usize) -> Result<Vec<CaseResult>> {
    (0..count)
        .map(|i| {
            let kind = CaseKind::ALL[i % CaseKind::ALL.len()];
            run_case(kind, seed.wrapping_mul(1_000_003).wrapping_add(i as u64))
        })
        .collect()
}
