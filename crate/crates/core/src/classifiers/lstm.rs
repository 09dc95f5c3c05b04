//! Stacked LSTM over the 24 frames of a sequence. The last hidden state of
//! the top layer feeds a rectified dense layer and a 3-way softmax. Gradients
//! come from backpropagation through time; training uses Adam.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nn::{init_uniform, shuffled_batches, sigmoid, softmax, softmax_cross_entropy, Adam};
use super::TrainingReport;
use crate::error::{Error, Result};
use crate::level::{EngagementLevel, LabelDistribution, LEVELS};
use crate::scalar::Scalar;
use crate::sequence::{check_sequence_shape, FRAMES_PER_SECOND};

/// Flat parameter vector. Per layer `l`: `W_l (4H x in_l)`, `U_l (4H x H)`,
/// `b_l (4H)` with gate blocks ordered input, forget, cell, output; then the
/// dense layer `(F x H)`, its bias `(F)`, the output layer `(3 x F)` and its
/// bias `(3)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Lstm<T: Scalar> {
    pub input_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub dense: usize,
    pub params: Vec<T>,
}

#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    w: usize,
    u: usize,
    b: usize,
    input: usize,
}

#[derive(Debug, Clone, Copy)]
struct HeadOffsets {
    wd: usize,
    bd: usize,
    wo: usize,
    bo: usize,
}

struct LayerCache<T> {
    inputs: Vec<Vec<T>>,
    /// Activated gates per step: `[i | f | g | o]`.
    gates: Vec<Vec<T>>,
    /// `c[0]` and `h[0]` are the zero initial state.
    c: Vec<Vec<T>>,
    h: Vec<Vec<T>>,
    tanh_c: Vec<Vec<T>>,
}

struct Forward<T> {
    layers: Vec<LayerCache<T>>,
    dense_pre: Vec<T>,
    dense: Vec<T>,
    logits: [T; LEVELS],
}

impl<T: Scalar> Lstm<T> {
    pub fn param_count(input_dim: usize, hidden: usize, layers: usize, dense: usize) -> usize {
        let mut n = 0;
        for l in 0..layers {
            let inp = if l == 0 { input_dim } else { hidden };
            n += 4 * hidden * inp + 4 * hidden * hidden + 4 * hidden;
        }
        n + dense * hidden + dense + LEVELS * dense + LEVELS
    }

    pub fn zeros(input_dim: usize, hidden: usize, layers: usize, dense: usize) -> Self {
        Self {
            input_dim,
            hidden,
            layers,
            dense,
            params: vec![T::zero(); Self::param_count(input_dim, hidden, layers, dense)],
        }
    }

    pub fn initialized(input_dim: usize, hidden: usize, layers: usize, dense: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut m = Self::zeros(input_dim, hidden, layers, dense);
        let (layer_offsets, head) = m.offsets();
        for lo in &layer_offsets {
            init_uniform(&mut m.params[lo.w..lo.u], hidden, rng);
            init_uniform(&mut m.params[lo.u..lo.b], hidden, rng);
        }
        init_uniform(&mut m.params[head.wd..head.bd], hidden, rng);
        init_uniform(&mut m.params[head.wo..head.bo], dense, rng);
        m
    }

    fn offsets(&self) -> (Vec<LayerOffsets>, HeadOffsets) {
        let h = self.hidden;
        let mut at = 0;
        let mut layers = Vec::with_capacity(self.layers);
        for l in 0..self.layers {
            let input = if l == 0 { self.input_dim } else { h };
            let w = at;
            let u = w + 4 * h * input;
            let b = u + 4 * h * h;
            at = b + 4 * h;
            layers.push(LayerOffsets { w, u, b, input });
        }
        let wd = at;
        let bd = wd + self.dense * h;
        let wo = bd + self.dense;
        let bo = wo + LEVELS * self.dense;
        (layers, HeadOffsets { wd, bd, wo, bo })
    }

    fn forward(&self, seq: &[Vec<T>]) -> Forward<T> {
        let h = self.hidden;
        let p = &self.params;
        let (layer_offsets, head) = self.offsets();
        let mut input: Vec<Vec<T>> = seq.to_vec();
        let mut caches = Vec::with_capacity(self.layers);
        for lo in &layer_offsets {
            let steps = input.len();
            let mut cache = LayerCache {
                inputs: Vec::new(),
                gates: Vec::with_capacity(steps),
                c: vec![vec![T::zero(); h]],
                h: vec![vec![T::zero(); h]],
                tanh_c: Vec::with_capacity(steps),
            };
            for x in &input {
                let h_prev = cache.h.last().expect("initial state");
                let c_prev = cache.c.last().expect("initial state");
                let mut z = vec![T::zero(); 4 * h];
                for (r, zr) in z.iter_mut().enumerate() {
                    let wr = &p[lo.w + r * lo.input..lo.w + (r + 1) * lo.input];
                    let ur = &p[lo.u + r * h..lo.u + (r + 1) * h];
                    *zr = p[lo.b + r]
                        + wr.iter().zip(x).map(|(&a, &b)| a * b).sum::<T>()
                        + ur.iter().zip(h_prev).map(|(&a, &b)| a * b).sum::<T>();
                }
                for (r, zr) in z.iter_mut().enumerate() {
                    *zr = if (2 * h..3 * h).contains(&r) { zr.tanh() } else { sigmoid(*zr) };
                }
                let mut c = vec![T::zero(); h];
                let mut tc = vec![T::zero(); h];
                let mut hn = vec![T::zero(); h];
                for k in 0..h {
                    c[k] = z[h + k] * c_prev[k] + z[k] * z[2 * h + k];
                    tc[k] = c[k].tanh();
                    hn[k] = z[3 * h + k] * tc[k];
                }
                cache.gates.push(z);
                cache.c.push(c);
                cache.tanh_c.push(tc);
                cache.h.push(hn);
            }
            cache.inputs = input;
            input = cache.h[1..].to_vec();
            caches.push(cache);
        }
        let last = caches
            .last()
            .and_then(|c| c.h.last())
            .cloned()
            .unwrap_or_else(|| vec![T::zero(); h]);
        let dense_pre: Vec<T> = (0..self.dense)
            .map(|j| {
                let row = &p[head.wd + j * h..head.wd + (j + 1) * h];
                p[head.bd + j] + row.iter().zip(&last).map(|(&a, &b)| a * b).sum::<T>()
            })
            .collect();
        let dense: Vec<T> = dense_pre.iter().map(|&v| v.max(T::zero())).collect();
        let mut logits = [T::zero(); LEVELS];
        for (k, l) in logits.iter_mut().enumerate() {
            let row = &p[head.wo + k * self.dense..head.wo + (k + 1) * self.dense];
            *l = p[head.bo + k] + row.iter().zip(&dense).map(|(&a, &b)| a * b).sum::<T>();
        }
        Forward {
            layers: caches,
            dense_pre,
            dense,
            logits,
        }
    }

    fn check_input(&self, seq: &[Vec<T>]) -> Result<()> {
        check_sequence_shape(seq)?;
        if seq[0].len() != self.input_dim {
            return Err(Error::Dimension {
                expected: self.input_dim,
                got: seq[0].len(),
            });
        }
        Ok(())
    }

    pub fn predict_distribution(&self, seq: &[Vec<T>]) -> Result<LabelDistribution<T>> {
        self.check_input(seq)?;
        Ok(LabelDistribution(softmax(&self.forward(seq).logits)))
    }

    /// Mean cross-entropy over `batch` and its gradient. Accepts sequences of
    /// any positive length so gradient checks can use short toys.
    pub fn loss_and_gradient(&self, x: &[Vec<Vec<T>>], y: &[usize], batch: &[usize]) -> (T, Vec<T>) {
        let h = self.hidden;
        let p = &self.params;
        let (layer_offsets, head) = self.offsets();
        let mut grad = vec![T::zero(); p.len()];
        let mut loss = T::zero();
        let scale = T::one() / T::of_usize(batch.len().max(1));
        for &s in batch {
            let fw = self.forward(&x[s]);
            let (l, dlogits) = softmax_cross_entropy(&fw.logits, y[s]);
            loss += l;
            let dlogits = dlogits.map(|g| g * scale);

            let mut ddense = vec![T::zero(); self.dense];
            for k in 0..LEVELS {
                grad[head.bo + k] += dlogits[k];
                let row = head.wo + k * self.dense;
                for j in 0..self.dense {
                    grad[row + j] += dlogits[k] * fw.dense[j];
                    ddense[j] += dlogits[k] * p[row + j];
                }
            }
            let top = fw.layers.last().expect("at least one layer");
            let last = top.h.last().expect("state");
            let mut dlast = vec![T::zero(); h];
            for j in 0..self.dense {
                if fw.dense_pre[j] <= T::zero() {
                    continue;
                }
                let dj = ddense[j];
                grad[head.bd + j] += dj;
                let row = head.wd + j * h;
                for k in 0..h {
                    grad[row + k] += dj * last[k];
                    dlast[k] += dj * p[row + k];
                }
            }

            let steps = top.gates.len();
            let mut dh_ext = vec![vec![T::zero(); h]; steps];
            dh_ext[steps - 1] = dlast;
            for (lo, cache) in layer_offsets.iter().zip(&fw.layers).rev() {
                let mut dh_next = vec![T::zero(); h];
                let mut dc_next = vec![T::zero(); h];
                let mut dx = vec![vec![T::zero(); lo.input]; steps];
                let mut dz = vec![T::zero(); 4 * h];
                for t in (0..steps).rev() {
                    let g = &cache.gates[t];
                    let c_prev = &cache.c[t];
                    let h_prev = &cache.h[t];
                    let tc = &cache.tanh_c[t];
                    for k in 0..h {
                        let (ig, fg, cg, og) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
                        let dh = dh_ext[t][k] + dh_next[k];
                        let d_o = dh * tc[k];
                        let dc = dh * og * (T::one() - tc[k] * tc[k]) + dc_next[k];
                        dc_next[k] = dc * fg;
                        dz[k] = dc * cg * ig * (T::one() - ig);
                        dz[h + k] = dc * c_prev[k] * fg * (T::one() - fg);
                        dz[2 * h + k] = dc * ig * (T::one() - cg * cg);
                        dz[3 * h + k] = d_o * og * (T::one() - og);
                    }
                    dh_next.iter_mut().for_each(|v| *v = T::zero());
                    let x_t = &cache.inputs[t];
                    for (r, &dzr) in dz.iter().enumerate() {
                        if dzr == T::zero() {
                            continue;
                        }
                        grad[lo.b + r] += dzr;
                        let wrow = lo.w + r * lo.input;
                        for k in 0..lo.input {
                            grad[wrow + k] += dzr * x_t[k];
                            dx[t][k] += dzr * p[wrow + k];
                        }
                        let urow = lo.u + r * h;
                        for k in 0..h {
                            grad[urow + k] += dzr * h_prev[k];
                            dh_next[k] += dzr * p[urow + k];
                        }
                    }
                }
                dh_ext = dx;
            }
        }
        (loss * scale, grad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LstmParams {
    pub hidden: usize,
    pub layers: usize,
    pub dense: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LstmParams {
    fn default() -> Self {
        Self {
            hidden: 128,
            layers: 2,
            dense: 64,
            learning_rate: 0.001,
            epochs: 5,
            batch_size: 64,
            seed: 0,
        }
    }
}

pub fn fit_lstm<T: Scalar>(x: &[Vec<Vec<T>>], y: &[EngagementLevel], p: &LstmParams) -> Result<(Lstm<T>, TrainingReport)> {
    if x.len() != y.len() {
        return Err(Error::Dimension {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.is_empty() {
        return Err(Error::Shape("LSTM needs training sequences".into()));
    }
    if p.layers == 0 || p.hidden == 0 || p.dense == 0 {
        return Err(Error::Config("LSTM sizes must be positive".into()));
    }
    for s in x {
        if s.len() != FRAMES_PER_SECOND {
            return Err(Error::Shape(format!(
                "sequence of length {} (expected {FRAMES_PER_SECOND})",
                s.len()
            )));
        }
        check_sequence_shape(s)?;
    }
    let d = x[0][0].len();
    if x.iter().any(|s| s[0].len() != d) {
        return Err(Error::Shape("sequences differ in frame dimension".into()));
    }
    let labels: Vec<usize> = y.iter().map(|l| l.index()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut model = Lstm::initialized(d, p.hidden, p.layers, p.dense, &mut rng);
    let mut opt = Adam::new(model.params.len(), T::of(p.learning_rate));
    let mut curve = Vec::with_capacity(p.epochs);
    for epoch in 0..p.epochs {
        let mut total = 0.0;
        for b in shuffled_batches(x.len(), p.batch_size, &mut rng) {
            let (l, g) = model.loss_and_gradient(x, &labels, &b);
            if !l.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            opt.step(&mut model.params, &g);
            total += l.as_f64() * b.len() as f64;
        }
        curve.push(total / x.len() as f64);
    }
    let report = TrainingReport {
        seed: p.seed,
        epochs_run: curve.len(),
        loss_curve: curve,
        validation_trace: Vec::new(),
        best_epoch: None,
    };
    Ok((model, report))
}
