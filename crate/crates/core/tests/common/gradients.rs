//! Finite-difference gradient cases shared by the layer tests and the
//! acceptance suite.

use atomnas::tensor::{BatchNormState, BnMode, ParamId, ParamStore, Parameter, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

//
// The engine's analytic gradients are compared against central differences of
// independent f64 reference forwards, so the oracle carries no f32 rounding.

pub const FD_STEP: f64 = 1e-3;
pub const FD_MAX_REL: f64 = 1e-3;
pub const INSTANCES: u64 = 20;

mod reference {
    pub type Shape = [usize; 4];

    pub fn pointwise(x: &[f64], xs: Shape, w: &[f64], cout: usize) -> Vec<f64> {
        let [n, cin, h, wd] = xs;
        let hw = h * wd;
        let mut out = vec![0.0; n * cout * hw];
        for s in 0..n {
            for o in 0..cout {
                for p in 0..hw {
                    out[(s * cout + o) * hw + p] = (0..cin).map(|c| w[o * cin + c] * x[(s * cin + c) * hw + p]).sum();
                }
            }
        }
        out
    }

    /// Dense (`groups = None`) or depthwise convolution, zero same-padding.
    pub fn conv(x: &[f64], xs: Shape, w: &[f64], cout: usize, kernels: &[usize], stride: usize, depthwise: bool) -> Vec<f64> {
        let [n, cin, h, wd] = xs;
        let (ho, wo) = (h.div_ceil(stride), wd.div_ceil(stride));
        let mut out = vec![0.0; n * cout * ho * wo];
        // per-output-channel kernel size and weight offset
        let mut offsets = Vec::with_capacity(cout);
        let mut off = 0;
        for o in 0..cout {
            let k = kernels[o];
            offsets.push(off);
            off += if depthwise { k * k } else { cin * k * k };
        }
        for s in 0..n {
            for o in 0..cout {
                let k = kernels[o];
                let pad = (k / 2) as isize;
                let ins: Vec<usize> = if depthwise { vec![o] } else { (0..cin).collect() };
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for (ci, &c) in ins.iter().enumerate() {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad;
                                    let ix = (ox * stride + kx) as isize - pad;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let wv = w[offsets[o] + (ci * k + ky) * k + kx];
                                    acc += wv * x[((s * cin + c) * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                        out[((s * cout + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    pub fn batchnorm(x: &[f64], xs: Shape, g: &[f64], b: &[f64], stats: Option<(&[f64], &[f64])>, eps: f64) -> Vec<f64> {
        let [n, c, h, w] = xs;
        let hw = h * w;
        let mut out = vec![0.0; x.len()];
        for ch in 0..c {
            let idx: Vec<usize> = (0..n).flat_map(|s| (0..hw).map(move |p| (s * c + ch) * hw + p)).collect();
            let (mean, var) = match stats {
                Some((m, v)) => (m[ch], v[ch]),
                None => {
                    let m = idx.iter().map(|&i| x[i]).sum::<f64>() / idx.len() as f64;
                    let v = idx.iter().map(|&i| (x[i] - m).powi(2)).sum::<f64>() / idx.len() as f64;
                    (m, v)
                }
            };
            for &i in &idx {
                out[i] = g[ch] * (x[i] - mean) / (var + eps).sqrt() + b[ch];
            }
        }
        out
    }

    pub fn dot(y: &[f64], r: &[f32]) -> f64 {
        y.iter().zip(r).map(|(a, &b)| a * b as f64).sum()
    }

    pub fn avgpool(x: &[f64], hw: usize) -> Vec<f64> {
        x.chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect()
    }

    pub fn linear(x: &[f64], n: usize, d: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
        let k = b.len();
        (0..n)
            .flat_map(|s| (0..k).map(move |j| (s, j)))
            .map(|(s, j)| b[j] + (0..d).map(|i| x[s * d + i] * w[j * d + i]).sum::<f64>())
            .collect()
    }

    pub fn cross_entropy(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
        let n = labels.len();
        let mut total = 0.0;
        for (s, row) in logits.chunks(k).enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[labels[s]];
        }
        total / n as f64
    }
}

/// An engine graph producing a scalar, plus the same function in f64.
pub struct GradCase {
    store: ParamStore,
    ids: Vec<ParamId>,
    engine: Box<dyn Fn(&mut Tape, &ParamStore, &[ParamId]) -> Var>,
    reference: Box<dyn Fn(&[Vec<f64>]) -> f64>,
}

impl GradCase {
    pub fn new(
        values: Vec<Tensor>,
        engine: impl Fn(&mut Tape, &ParamStore, &[ParamId]) -> Var + 'static,
        reference: impl Fn(&[Vec<f64>]) -> f64 + 'static,
    ) -> Self {
        let mut store = ParamStore::new();
        let ids = values.into_iter().map(|t| store.push(Parameter::new(t))).collect();
        GradCase {
            store,
            ids,
            engine: Box::new(engine),
            reference: Box::new(reference),
        }
    }

    /// Largest relative deviation between analytic and central-difference
    /// gradients over every entry; denominators are floored at `floor`.
    pub fn max_error(mut self, floor: f64) -> f64 {
        let mut tape = Tape::new();
        let loss = (self.engine)(&mut tape, &self.store, &self.ids);
        tape.backward(loss, &mut self.store).unwrap();
        let mut point: Vec<Vec<f64>> = self
            .ids
            .iter()
            .map(|&id| self.store.get(id).value.data().iter().map(|&v| v as f64).collect())
            .collect();
        let mut worst = 0.0f64;
        for (pi, &id) in self.ids.iter().enumerate() {
            for j in 0..point[pi].len() {
                let orig = point[pi][j];
                point[pi][j] = orig + FD_STEP;
                let up = (self.reference)(&point);
                point[pi][j] = orig - FD_STEP;
                let down = (self.reference)(&point);
                point[pi][j] = orig;
                let numeric = (up - down) / (2.0 * FD_STEP);
                let analytic = self.store.get(id).grad.data()[j] as f64;
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
                worst = worst.max(err);
            }
        }
        worst
    }
}

/// Largest relative gradient error of `make` over `INSTANCES` seeded instances.
pub fn worst_error(make: impl Fn(&mut ChaCha8Rng) -> GradCase) -> f64 {
    (0..INSTANCES)
        .map(|seed| make(&mut ChaCha8Rng::seed_from_u64(1000 + seed)).max_error(1e-3))
        .fold(0.0, f64::max)
}

/// Every layer's case builder with its name.
pub fn suite() -> Vec<(String, Box<dyn Fn(&mut ChaCha8Rng) -> GradCase>)> {
    let mut v: Vec<(String, Box<dyn Fn(&mut ChaCha8Rng) -> GradCase>)> = vec![
        ("conv2d_pointwise".into(), Box::new(pointwise)),
        ("conv2d_depthwise".into(), Box::new(depthwise_mixed)),
        ("conv2d".into(), Box::new(conv2d_dense)),
        ("relu/add/global_avgpool".into(), Box::new(relu_add_avgpool)),
        ("fully_connected/softmax_cross_entropy".into(), Box::new(linear_cross_entropy)),
        ("weighted_abs_sum/sum_squares".into(), Box::new(weighted_abs_and_squares)),
    ];
    for mode in [BnMode::Train, BnMode::Eval] {
        v.push((format!("batchnorm2d ({mode:?})"), Box::new(move |rng: &mut ChaCha8Rng| batchnorm(mode, rng))));
    }
    v
}

pub fn projection(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

/// Values bounded away from zero so ReLU/abs kinks stay out of FD range.
pub fn away_from_zero(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(0.05f32..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

pub fn pointwise(rng: &mut ChaCha8Rng) -> GradCase {
        let xs = [2, 3, 3, 2];
        let x = rand_tensor(xs, rng);
        let w = rand_tensor([4, 3, 1, 1], rng);
        let r = projection(2 * 4 * 3 * 2, rng);
        let r2 = r.clone();
        GradCase::new(
            vec![x, w],
            move |t, s, ids| {
                let (x, w) = (t.param(s, ids[0]), t.param(s, ids[1]));
                let y = t.pointwise(x, w).unwrap();
                t.weighted_sum(y, &r).unwrap()
            },
            move |p| reference::dot(&reference::pointwise(&p[0], xs, &p[1], 4), &r2),
        )}

pub fn depthwise_mixed(rng: &mut ChaCha8Rng) -> GradCase {
        let stride = 1 + rng.random_range(0..2usize);
        let xs = [2, 4, 5, 5];
        let x = rand_tensor(xs, rng);
        let w3 = rand_tensor([2, 1, 3, 3], rng);
        let w5 = rand_tensor([1, 1, 5, 5], rng);
        let w7 = rand_tensor([1, 1, 7, 7], rng);
        let o = 5usize.div_ceil(stride);
        let r = projection(2 * 4 * o * o, rng);
        let r2 = r.clone();
        GradCase::new(
            vec![x, w3, w5, w7],
            move |t, s, ids| {
                let x = t.param(s, ids[0]);
                let ws: Vec<Var> = ids[1..].iter().map(|&i| t.param(s, i)).collect();
                let y = t.depthwise_mixed(x, &ws, stride).unwrap();
                t.weighted_sum(y, &r).unwrap()
            },
            move |p| {
                let w: Vec<f64> = p[1].iter().chain(&p[2]).chain(&p[3]).cloned().collect();
                let y = reference::conv(&p[0], xs, &w, 4, &[3, 3, 5, 7], stride, true);
                reference::dot(&y, &r2)
            },
        )}

pub fn conv2d_dense(rng: &mut ChaCha8Rng) -> GradCase {
        let stride = 1 + rng.random_range(0..2usize);
        let xs = [2, 2, 5, 4];
        let x = rand_tensor(xs, rng);
        let w = rand_tensor([3, 2, 3, 3], rng);
        let (ho, wo) = (5usize.div_ceil(stride), 4usize.div_ceil(stride));
        let r = projection(2 * 3 * ho * wo, rng);
        let r2 = r.clone();
        GradCase::new(
            vec![x, w],
            move |t, s, ids| {
                let (x, w) = (t.param(s, ids[0]), t.param(s, ids[1]));
                let y = t.conv2d(x, w, stride).unwrap();
                t.weighted_sum(y, &r).unwrap()
            },
            move |p| reference::dot(&reference::conv(&p[0], xs, &p[1], 3, &[3; 3], stride, false), &r2),
        )}

pub fn batchnorm(mode: BnMode, rng: &mut ChaCha8Rng) -> GradCase {
        let xs = [4, 3, 2, 2];
        let x = rand_tensor(xs, rng);
        let g = rand_tensor([3, 1, 1, 1], rng);
        let b = rand_tensor([3, 1, 1, 1], rng);
        let r = projection(4 * 3 * 2 * 2, rng);
        let r2 = r.clone();
        let mut state = BatchNormState::new(3);
        state.running_mean = projection(3, rng);
        state.running_var = (0..3).map(|_| rng.random_range(0.5f32..2.0)).collect();
        let stats: Vec<Vec<f64>> = [&state.running_mean, &state.running_var]
            .iter()
            .map(|v| v.iter().map(|&x| x as f64).collect())
            .collect();
        let eps = state.eps as f64;
        GradCase::new(
            vec![x, g, b],
            move |t, s, ids| {
                let mut st = state.clone();
                let (x, g, b) = (t.param(s, ids[0]), t.param(s, ids[1]), t.param(s, ids[2]));
                let y = t.batchnorm(x, g, b, &mut st, mode).unwrap();
                t.weighted_sum(y, &r).unwrap()
            },
            move |p| {
                let st = (mode == BnMode::Eval).then(|| (stats[0].as_slice(), stats[1].as_slice()));
                reference::dot(&reference::batchnorm(&p[0], xs, &p[1], &p[2], st, eps), &r2)
            },
        )
}

pub fn relu_add_avgpool(rng: &mut ChaCha8Rng) -> GradCase {
        let a = away_from_zero([2, 3, 2, 3], rng);
        let b = rand_tensor([2, 3, 2, 3], rng);
        let r = projection(2 * 3, rng);
        let r2 = r.clone();
        GradCase::new(
            vec![a, b],
            move |t, s, ids| {
                let (a, b) = (t.param(s, ids[0]), t.param(s, ids[1]));
                let ra = t.relu(a).unwrap();
                let y = t.add(ra, b).unwrap();
                let p = t.global_avgpool(y).unwrap();
                t.weighted_sum(p, &r).unwrap()
            },
            move |p| {
                let y: Vec<f64> = p[0].iter().zip(&p[1]).map(|(a, b)| a.max(0.0) + b).collect();
                reference::dot(&reference::avgpool(&y, 6), &r2)
            },
        )}

pub fn linear_cross_entropy(rng: &mut ChaCha8Rng) -> GradCase {
        let x = rand_tensor([5, 4, 1, 1], rng);
        let w = rand_tensor([3, 4, 1, 1], rng);
        let b = rand_tensor([3, 1, 1, 1], rng);
        let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..3)).collect();
        let l2 = labels.clone();
        GradCase::new(
            vec![x, w, b],
            move |t, s, ids| {
                let (x, w, b) = (t.param(s, ids[0]), t.param(s, ids[1]), t.param(s, ids[2]));
                let y = t.linear(x, w, b).unwrap();
                t.softmax_cross_entropy(y, &labels).unwrap()
            },
            move |p| reference::cross_entropy(&reference::linear(&p[0], 5, 4, &p[1], &p[2]), 3, &l2),
        )}

pub fn weighted_abs_and_squares(rng: &mut ChaCha8Rng) -> GradCase {
        let x = away_from_zero([1, 6, 1, 1], rng);
        let y = rand_tensor([1, 4, 1, 1], rng);
        let c: Vec<f32> = (0..6).map(|_| rng.random_range(0.0f32..1.0)).collect();
        let c2 = c.clone();
        GradCase::new(
            vec![x, y],
            move |t, s, ids| {
                let (x, y) = (t.param(s, ids[0]), t.param(s, ids[1]));
                let a = t.weighted_abs_sum(x, &c).unwrap();
                let q = t.sum_squares(y).unwrap();
                t.add(a, q).unwrap()
            },
            move |p| {
                let a: f64 = p[0].iter().zip(&c2).map(|(v, &c)| v.abs() * c as f64).sum();
                a + p[1].iter().map(|v| v * v).sum::<f64>()
            },
        )}

