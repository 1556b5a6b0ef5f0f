use rand::Rng;

use super::ops::{matmul_ab_acc, matmul_abt, matmul_atb_acc, sigmoid};
use super::Tensor;
use crate::error::{Error, Result};

/// Single-layer LSTM. Gate rows are stacked as input, forget, candidate, output:
///
/// ```text
/// [i f g o] = [sig sig tanh sig](W_ih x_t + W_hh h_{t-1} + b)
/// c_t = f * c_{t-1} + i * g
/// h_t = o * tanh(c_t)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub bias: Tensor,
}

/// Hidden states of a single-sequence forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmOutput {
    /// `H x hidden`.
    pub hidden: Vec<Vec<f64>>,
    pub last: Vec<f64>,
}

#[derive(Debug, Clone)]
struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// post-activation gates, `batch x 4h`
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// Record of a batched forward pass, consumed by [`LstmLayer::backward`].
#[derive(Debug, Clone)]
pub struct LstmCache {
    batch: usize,
    steps: Vec<StepCache>,
}

impl LstmLayer {
    /// `w_ih ~ U(±1/sqrt(input))`, `w_hh` and `bias ~ U(±1/sqrt(hidden))`.
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let si = 1.0 / (input.max(1) as f64).sqrt();
        let sh = 1.0 / (hidden.max(1) as f64).sqrt();
        Self {
            w_ih: Tensor::uniform(&[4 * hidden, input], si, rng),
            w_hh: Tensor::uniform(&[4 * hidden, hidden], sh, rng),
            bias: Tensor::uniform(&[4 * hidden], sh, rng),
        }
    }

    pub fn from_parts(w_ih: Tensor, w_hh: Tensor, bias: Tensor) -> Result<Self> {
        let ok = w_ih.shape().len() == 2
            && w_hh.shape().len() == 2
            && w_ih.rows().is_multiple_of(4)
            && w_hh.rows() == w_ih.rows()
            && w_hh.cols() * 4 == w_hh.rows()
            && bias.shape() == [w_ih.rows()];
        if !ok {
            return Err(Error::Shape(format!(
                "inconsistent LSTM parameter shapes w_ih {:?}, w_hh {:?}, bias {:?}",
                w_ih.shape(),
                w_hh.shape(),
                bias.shape()
            )));
        }
        Ok(Self { w_ih, w_hh, bias })
    }

    pub fn input_size(&self) -> usize {
        self.w_ih.cols()
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hh.cols()
    }

    pub fn zeros_like(&self) -> Self {
        Self { w_ih: self.w_ih.zeros_like(), w_hh: self.w_hh.zeros_like(), bias: self.bias.zeros_like() }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w_ih, &self.w_hh, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w_ih, &mut self.w_hh, &mut self.bias]
    }

    /// Run one sequence (`H x input`) from zero initial state.
    pub fn forward(&self, sequence: &[Vec<f64>]) -> Result<LstmOutput> {
        let (hidden, _) = self.forward_batch(sequence, 1)?;
        let last = hidden.last().cloned().unwrap_or_default();
        Ok(LstmOutput { hidden, last })
    }

    /// Run `batch` sequences in lockstep. `xs[t]` is the `batch x input` slab at step `t`;
    /// returns the `batch x hidden` hidden state at every step.
    pub fn forward_batch(&self, xs: &[Vec<f64>], batch: usize) -> Result<(Vec<Vec<f64>>, LstmCache)> {
        if xs.is_empty() {
            return Err(Error::Shape("LSTM needs a sequence of length >= 1".into()));
        }
        let (din, h) = (self.input_size(), self.hidden_size());
        let g4 = 4 * h;
        let bias = self.bias.data();
        let mut h_prev = vec![0.0; batch * h];
        let mut c_prev = vec![0.0; batch * h];
        let mut hs = Vec::with_capacity(xs.len());
        let mut steps = Vec::with_capacity(xs.len());
        let mut rec = vec![0.0; batch * g4];
        for x in xs {
            if x.len() != batch * din {
                return Err(Error::Shape(format!(
                    "LSTM step expects {batch}x{din} input, got {} values",
                    x.len()
                )));
            }
            let mut gates = vec![0.0; batch * g4];
            matmul_abt(x, batch, din, self.w_ih.data(), g4, &mut gates);
            matmul_abt(&h_prev, batch, h, self.w_hh.data(), g4, &mut rec);
            let mut c = vec![0.0; batch * h];
            let mut tanh_c = vec![0.0; batch * h];
            let mut h_new = vec![0.0; batch * h];
            for b in 0..batch {
                let gr = &mut gates[b * g4..(b + 1) * g4];
                let rr = &rec[b * g4..(b + 1) * g4];
                for (k, g) in gr.iter_mut().enumerate() {
                    let pre = *g + rr[k] + bias[k];
                    *g = if (2 * h..3 * h).contains(&k) { pre.tanh() } else { sigmoid(pre) };
                }
                for j in 0..h {
                    let (i_g, f_g, g_g, o_g) = (gr[j], gr[h + j], gr[2 * h + j], gr[3 * h + j]);
                    let idx = b * h + j;
                    c[idx] = f_g * c_prev[idx] + i_g * g_g;
                    tanh_c[idx] = c[idx].tanh();
                    h_new[idx] = o_g * tanh_c[idx];
                }
            }
            steps.push(StepCache {
                x: x.clone(),
                h_prev: std::mem::replace(&mut h_prev, h_new.clone()),
                c_prev: std::mem::replace(&mut c_prev, c),
                gates,
                tanh_c,
            });
            hs.push(h_new);
        }
        Ok((hs, LstmCache { batch, steps }))
    }

    /// Backpropagation through time. `dhs[t]` is the loss gradient w.r.t. the hidden
    /// state emitted at step `t` (zeros where the output is unused). Parameter
    /// gradients accumulate into `grads`; returns `dL/dx_t` for every step.
    pub fn backward(&self, cache: &LstmCache, dhs: &[Vec<f64>], grads: &mut LstmLayer) -> Vec<Vec<f64>> {
        let (din, h, batch) = (self.input_size(), self.hidden_size(), cache.batch);
        let g4 = 4 * h;
        debug_assert_eq!(dhs.len(), cache.steps.len());
        let mut dh_next = vec![0.0; batch * h];
        let mut dc_next = vec![0.0; batch * h];
        let mut dxs = vec![Vec::new(); cache.steps.len()];
        let mut dpre = vec![0.0; batch * g4];
        for (t, step) in cache.steps.iter().enumerate().rev() {
            for b in 0..batch {
                let gr = &step.gates[b * g4..(b + 1) * g4];
                let dp = &mut dpre[b * g4..(b + 1) * g4];
                for j in 0..h {
                    let idx = b * h + j;
                    let (i_g, f_g, g_g, o_g) = (gr[j], gr[h + j], gr[2 * h + j], gr[3 * h + j]);
                    let dh = dhs[t][idx] + dh_next[idx];
                    let tc = step.tanh_c[idx];
                    let d_o = dh * tc;
                    let dc = dc_next[idx] + dh * o_g * (1.0 - tc * tc);
                    let d_i = dc * g_g;
                    let d_g = dc * i_g;
                    let d_f = dc * step.c_prev[idx];
                    dc_next[idx] = dc * f_g;
                    dp[j] = d_i * i_g * (1.0 - i_g);
                    dp[h + j] = d_f * f_g * (1.0 - f_g);
                    dp[2 * h + j] = d_g * (1.0 - g_g * g_g);
                    dp[3 * h + j] = d_o * o_g * (1.0 - o_g);
                }
            }
            matmul_atb_acc(&dpre, batch, g4, &step.x, din, grads.w_ih.data_mut());
            matmul_atb_acc(&dpre, batch, g4, &step.h_prev, h, grads.w_hh.data_mut());
            let gb = grads.bias.data_mut();
            for row in dpre.chunks(g4) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
            let mut dx = vec![0.0; batch * din];
            matmul_ab_acc(&dpre, batch, g4, self.w_ih.data(), din, &mut dx);
            dxs[t] = dx;
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            matmul_ab_acc(&dpre, batch, g4, self.w_hh.data(), h, &mut dh_next);
        }
        dxs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant_layer(input: usize, hidden: usize, value: f64) -> LstmLayer {
        let fill = |shape: &[usize]| {
            let mut t = Tensor::zeros(shape);
            t.fill(value);
            t
        };
        LstmLayer::from_parts(fill(&[4 * hidden, input]), fill(&[4 * hidden, hidden]), fill(&[4 * hidden]))
            .unwrap()
    }

    #[test]
    fn zero_parameters_give_zero_hidden_state() {
        let layer = constant_layer(3, 5, 0.0);
        let seq = vec![vec![0.3, -1.0, 2.0]; 4];
        let out = layer.forward(&seq).unwrap();
        assert!(out.hidden.iter().flatten().all(|&h| h == 0.0));
    }

    #[test]
    fn single_cell_matches_hand_evaluation() {
        // every pre-activation equals 0.5*1 + 0.5*0 + 0.5 = 1
        let layer = constant_layer(1, 1, 0.5);
        let out = layer.forward(&[vec![1.0]]).unwrap();
        assert!((out.last[0] - 0.369_606_352_935_705_76).abs() < 1e-15);
    }

    #[test]
    fn constant_input_converges_for_contractive_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut layer = LstmLayer::new(2, 4, &mut rng);
        layer.w_hh.data_mut().iter_mut().for_each(|w| *w *= 0.2);
        let seq = vec![vec![0.5, -0.25]; 100];
        let out = layer.forward(&seq).unwrap();
        let diffs: Vec<f64> = out
            .hidden
            .windows(2)
            .map(|w| w[1].iter().zip(&w[0]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
            .collect();
        for pair in diffs[5..].windows(2) {
            assert!(pair[1] <= pair[0] + 1e-15, "{pair:?}");
        }
        assert!(*diffs.last().unwrap() < 1e-10);
    }

    #[test]
    fn empty_sequence_and_bad_width_are_rejected() {
        let layer = constant_layer(2, 2, 0.1);
        assert!(layer.forward(&[]).is_err());
        assert!(layer.forward(&[vec![1.0]]).is_err());
    }
}
