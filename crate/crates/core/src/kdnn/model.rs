use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::KdnnConfig;
use crate::dataset::{HistoryMatrix, Sample};
use crate::error::{Error, Result};
use crate::nn::{Activation, Checkpoint, FcCache, FcLayer, LstmCache, LstmLayer, Tensor};

/// Trainable parameters.
///
/// Encoder: LSTM (`n -> hidden`) over the `H` history columns, then FC to `N` with
/// tanh. Koopman layers: `A` (`N x N`) and `B` (`N x m`), no bias, identity.
/// Decoder: FC (`N -> hidden*H`, tanh) cut into `H` step inputs, an LSTM
/// (`hidden -> hidden`), and a shared linear readout `hidden -> n` per step.
#[derive(Debug, Clone, PartialEq)]
pub struct Kdnn {
    pub config: KdnnConfig,
    pub enc_lstm: LstmLayer,
    pub enc_fc: FcLayer,
    pub a: FcLayer,
    pub b: FcLayer,
    pub dec_fc: FcLayer,
    pub dec_lstm: LstmLayer,
    pub readout: FcLayer,
}

const TENSOR_NAMES: [&str; 14] = [
    "encoder.lstm.w_ih",
    "encoder.lstm.w_hh",
    "encoder.lstm.bias",
    "encoder.fc.weight",
    "encoder.fc.bias",
    "koopman.A",
    "koopman.B",
    "decoder.fc.weight",
    "decoder.fc.bias",
    "decoder.lstm.w_ih",
    "decoder.lstm.w_hh",
    "decoder.lstm.bias",
    "decoder.readout.weight",
    "decoder.readout.bias",
];

/// Normalized samples packed sample-major: `v_k` and `v_next` are `size x n*H`
/// (each history row-major), `u` is `size x m`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub v_k: Vec<f64>,
    pub u: Vec<f64>,
    pub v_next: Vec<f64>,
}

impl Batch {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Self {
        let mut b = Batch { size: 0, v_k: Vec::new(), u: Vec::new(), v_next: Vec::new() };
        for s in samples {
            b.size += 1;
            b.v_k.extend_from_slice(s.v_k.as_slice());
            b.u.extend_from_slice(&s.u_k);
            b.v_next.extend_from_slice(s.v_next.as_slice());
        }
        b
    }

    /// Rows `idx` of `self`.
    pub fn gather(&self, idx: &[usize]) -> Self {
        let nh = self.v_k.len() / self.size.max(1);
        let m = self.u.len() / self.size.max(1);
        let mut b = Batch {
            size: idx.len(),
            v_k: Vec::with_capacity(idx.len() * nh),
            u: Vec::with_capacity(idx.len() * m),
            v_next: Vec::with_capacity(idx.len() * nh),
        };
        for &i in idx {
            b.v_k.extend_from_slice(&self.v_k[i * nh..(i + 1) * nh]);
            b.u.extend_from_slice(&self.u[i * m..(i + 1) * m]);
            b.v_next.extend_from_slice(&self.v_next[i * nh..(i + 1) * nh]);
        }
        b
    }
}

/// Single-sample forward result.
#[derive(Debug, Clone, PartialEq)]
pub struct KdnnOutput {
    pub v_next_hat: HistoryMatrix,
    pub v_k_hat: HistoryMatrix,
    /// `G(v_k)`.
    pub z: Vec<f64>,
    /// `A z + B u`, the decoder input for `v_next_hat`.
    pub z_next: Vec<f64>,
}

/// Batch-mean reconstruction errors (per-sample MSE over `n*H` entries).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub mse_next: f64,
    pub mse_k: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.mse_next + self.mse_k
    }
}

#[derive(Debug, Clone)]
struct EncCache {
    lstm: LstmCache,
    fc: FcCache,
}

#[derive(Debug, Clone)]
struct DecCache {
    fc: FcCache,
    lstm: LstmCache,
    readout: FcCache,
}

#[derive(Debug, Clone)]
struct Record {
    size: usize,
    enc: EncCache,
    a: FcCache,
    b: FcCache,
    dec: DecCache,
    /// `[v_next_hat; v_k_hat]`, `2*size x n*H`.
    y: Vec<f64>,
    z: Vec<f64>,
    z_next: Vec<f64>,
}

/// Execution record of a forward pass, required by [`Kdnn::backward`].
#[derive(Debug, Clone, Default)]
pub struct Tape {
    record: Option<Record>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_recorded(&self) -> bool {
        self.record.is_some()
    }

    /// `size x n*H` predictions of the recorded pass.
    pub fn predictions(&self) -> Option<(&[f64], &[f64])> {
        self.record.as_ref().map(|r| r.y.split_at(r.y.len() / 2))
    }

    pub fn lifted(&self) -> Option<(&[f64], &[f64])> {
        self.record.as_ref().map(|r| (r.z.as_slice(), r.z_next.as_slice()))
    }
}

impl Kdnn {
    /// Uniform `±1/sqrt(fan_in)` initialization from `config.seed`.
    pub fn new(config: KdnnConfig) -> Result<Self> {
        config.validate()?;
        let KdnnConfig { n, h, m, lifted_dim: big_n, hidden, .. } = config;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            config,
            enc_lstm: LstmLayer::new(n, hidden, &mut rng),
            enc_fc: FcLayer::new(hidden, big_n, Activation::Tanh, true, &mut rng),
            a: FcLayer::new(big_n, big_n, Activation::Identity, false, &mut rng),
            b: FcLayer::new(m, big_n, Activation::Identity, false, &mut rng),
            dec_fc: FcLayer::new(big_n, hidden * h, Activation::Tanh, true, &mut rng),
            dec_lstm: LstmLayer::new(hidden, hidden, &mut rng),
            readout: FcLayer::new(hidden, n, Activation::Identity, true, &mut rng),
        })
    }

    /// Zero-valued parameters of the same shapes (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            enc_lstm: self.enc_lstm.zeros_like(),
            enc_fc: self.enc_fc.zeros_like(),
            a: self.a.zeros_like(),
            b: self.b.zeros_like(),
            dec_fc: self.dec_fc.zeros_like(),
            dec_lstm: self.dec_lstm.zeros_like(),
            readout: self.readout.zeros_like(),
        }
    }

    /// All parameter tensors in a fixed order (matches the checkpoint names).
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.enc_lstm.tensors();
        v.extend(self.enc_fc.tensors());
        v.extend(self.a.tensors());
        v.extend(self.b.tensors());
        v.extend(self.dec_fc.tensors());
        v.extend(self.dec_lstm.tensors());
        v.extend(self.readout.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.enc_lstm.tensors_mut();
        v.extend(self.enc_fc.tensors_mut());
        v.extend(self.a.tensors_mut());
        v.extend(self.b.tensors_mut());
        v.extend(self.dec_fc.tensors_mut());
        v.extend(self.dec_lstm.tensors_mut());
        v.extend(self.readout.tensors_mut());
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for (name, t) in TENSOR_NAMES.iter().zip(self.tensors()) {
            ck.push(*name, t);
        }
        ck
    }

    pub fn from_checkpoint(config: KdnnConfig, ck: &Checkpoint) -> Result<Self> {
        let mut model = Self::new(config)?;
        for (name, t) in TENSOR_NAMES.iter().zip(model.tensors_mut()) {
            let loaded = ck.get(name)?;
            if loaded.shape() != t.shape() {
                return Err(Error::Parse(format!(
                    "tensor {name:?} has shape {:?}, config implies {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
            *t = loaded;
        }
        Ok(model)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let KdnnConfig { n, h, m, .. } = self.config;
        if batch.size == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        let ok = batch.v_k.len() == batch.size * n * h
            && batch.v_next.len() == batch.size * n * h
            && batch.u.len() == batch.size * m;
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!("batch of {} does not match n={n}, H={h}, m={m}", batch.size)))
        }
    }

    fn encode(&self, v_k: &[f64], rows: usize) -> Result<(Vec<f64>, EncCache)> {
        let KdnnConfig { n, h, .. } = self.config;
        let xs: Vec<Vec<f64>> = (0..h)
            .map(|t| (0..rows).flat_map(|r| (0..n).map(move |i| v_k[r * n * h + i * h + t])).collect())
            .collect();
        let (hs, lstm) = self.enc_lstm.forward_batch(&xs, rows)?;
        let (z, fc) = self.enc_fc.forward_batch(&hs[h - 1], rows)?;
        Ok((z, EncCache { lstm, fc }))
    }

    fn decode(&self, zin: &[f64], rows: usize) -> Result<(Vec<f64>, DecCache)> {
        let KdnnConfig { n, h, hidden, .. } = self.config;
        let (s, fc) = self.dec_fc.forward_batch(zin, rows)?;
        let xs: Vec<Vec<f64>> = (0..h)
            .map(|t| {
                (0..rows)
                    .flat_map(|r| s[r * hidden * h + t * hidden..r * hidden * h + (t + 1) * hidden].iter().copied())
                    .collect()
            })
            .collect();
        let (hs, lstm) = self.dec_lstm.forward_batch(&xs, rows)?;
        let stacked: Vec<f64> = hs.concat();
        let (o, readout) = self.readout.forward_batch(&stacked, h * rows)?;
        let mut y = vec![0.0; rows * n * h];
        for t in 0..h {
            for r in 0..rows {
                for i in 0..n {
                    y[r * n * h + i * h + t] = o[(t * rows + r) * n + i];
                }
            }
        }
        Ok((y, DecCache { fc, lstm, readout }))
    }

    /// Lift normalized histories (`rows x n*H`) to `rows x N`.
    pub fn lift_batch(&self, v_k: &[f64], rows: usize) -> Result<Vec<f64>> {
        let nh = self.config.n * self.config.h;
        if rows == 0 || v_k.len() != rows * nh {
            return Err(Error::Shape(format!("expected {rows} histories of {nh} values, got {}", v_k.len())));
        }
        Ok(self.encode(v_k, rows)?.0)
    }

    /// Decode lifted states (`rows x N`) to normalized histories (`rows x n*H`).
    pub fn decode_batch(&self, z: &[f64], rows: usize) -> Result<Vec<f64>> {
        if rows == 0 || z.len() != rows * self.config.lifted_dim {
            return Err(Error::Shape(format!("expected {rows} lifted states of {}", self.config.lifted_dim)));
        }
        Ok(self.decode(z, rows)?.0)
    }

    /// `A z + B u` for `rows` lifted states and normalized controls.
    pub fn advance_batch(&self, z: &[f64], u: &[f64], rows: usize) -> Result<Vec<f64>> {
        let (mut az, _) = self.a.forward_batch(z, rows)?;
        let (bu, _) = self.b.forward_batch(u, rows)?;
        az.iter_mut().zip(&bu).for_each(|(x, y)| *x += y);
        Ok(az)
    }

    /// Forward pass on a batch, recording what [`Kdnn::backward`] needs into `tape`.
    pub fn forward_batch(&self, batch: &Batch, tape: &mut Tape) -> Result<()> {
        self.check_batch(batch)?;
        let size = batch.size;
        let (z, enc) = self.encode(&batch.v_k, size)?;
        let (mut z_next, a) = self.a.forward_batch(&z, size)?;
        let (bu, b) = self.b.forward_batch(&batch.u, size)?;
        z_next.iter_mut().zip(&bu).for_each(|(x, y)| *x += y);
        let mut zin = Vec::with_capacity(2 * z.len());
        zin.extend_from_slice(&z_next);
        zin.extend_from_slice(&z);
        let (y, dec) = self.decode(&zin, 2 * size)?;
        tape.record = Some(Record { size, enc, a, b, dec, y, z, z_next });
        Ok(())
    }

    /// Batch loss without recording.
    pub fn loss(&self, batch: &Batch) -> Result<LossParts> {
        let mut tape = Tape::new();
        self.forward_batch(batch, &mut tape)?;
        let (yn, yk) = tape.predictions().expect("just recorded");
        Ok(loss_parts(yn, yk, batch))
    }

    /// Single-sample forward on normalized inputs.
    pub fn forward(&self, v_k: &HistoryMatrix, u_k: &[f64]) -> Result<KdnnOutput> {
        let KdnnConfig { n, h, .. } = self.config;
        if v_k.n() != n || v_k.h() != h {
            return Err(Error::Shape(format!("history is {}x{}, model expects {n}x{h}", v_k.n(), v_k.h())));
        }
        let batch = Batch { size: 1, v_k: v_k.as_slice().to_vec(), u: u_k.to_vec(), v_next: v_k.as_slice().to_vec() };
        let mut tape = Tape::new();
        self.forward_batch(&batch, &mut tape)?;
        let r = tape.record.expect("just recorded");
        let (yn, yk) = r.y.split_at(n * h);
        Ok(KdnnOutput {
            v_next_hat: HistoryMatrix::new(n, h, yn.to_vec())?,
            v_k_hat: HistoryMatrix::new(n, h, yk.to_vec())?,
            z: r.z,
            z_next: r.z_next,
        })
    }

    /// Reverse pass for the loss `mean_b [MSE(v_next_hat) + MSE(v_k_hat)]` against
    /// the targets in `batch`. Returns the loss and parameter gradients.
    pub fn backward(&self, tape: &Tape, batch: &Batch) -> Result<(LossParts, Kdnn)> {
        let r = tape
            .record
            .as_ref()
            .ok_or_else(|| Error::Usage("backward called without a recorded forward pass".into()))?;
        if r.size != batch.size {
            return Err(Error::Usage(format!("tape recorded {} samples, batch has {}", r.size, batch.size)));
        }
        self.check_batch(batch)?;
        let KdnnConfig { n, h, hidden, lifted_dim: big_n, .. } = self.config;
        let (size, nh) = (r.size, n * h);
        let rows = 2 * size;
        let scale = 2.0 / (nh * size) as f64;
        let (yn, yk) = r.y.split_at(size * nh);
        let parts = loss_parts(yn, yk, batch);
        let dy: Vec<f64> = yn
            .iter()
            .zip(&batch.v_next)
            .chain(yk.iter().zip(&batch.v_k))
            .map(|(p, t)| scale * (p - t))
            .collect();

        let mut g = self.zeros_like();
        let mut d_out = vec![0.0; rows * nh];
        for t in 0..h {
            for row in 0..rows {
                for i in 0..n {
                    d_out[(t * rows + row) * n + i] = dy[row * nh + i * h + t];
                }
            }
        }
        let d_stacked = self.readout.backward(&r.dec.readout, &d_out, &mut g.readout);
        let dhs: Vec<Vec<f64>> = d_stacked.chunks(rows * hidden).map(<[f64]>::to_vec).collect();
        let dxs = self.dec_lstm.backward(&r.dec.lstm, &dhs, &mut g.dec_lstm);
        let mut ds = vec![0.0; rows * hidden * h];
        for (t, dx) in dxs.iter().enumerate() {
            for row in 0..rows {
                ds[row * hidden * h + t * hidden..row * hidden * h + (t + 1) * hidden]
                    .copy_from_slice(&dx[row * hidden..(row + 1) * hidden]);
            }
        }
        let dzin = self.dec_fc.backward(&r.dec.fc, &ds, &mut g.dec_fc);
        let (dz_next, dz_direct) = dzin.split_at(size * big_n);
        let mut dz = self.a.backward(&r.a, dz_next, &mut g.a);
        self.b.backward(&r.b, dz_next, &mut g.b);
        dz.iter_mut().zip(dz_direct).for_each(|(x, y)| *x += y);
        let dh_last = self.enc_fc.backward(&r.enc.fc, &dz, &mut g.enc_fc);
        let mut dhs = vec![vec![0.0; size * hidden]; h];
        dhs[h - 1] = dh_last;
        self.enc_lstm.backward(&r.enc.lstm, &dhs, &mut g.enc_lstm);
        Ok((parts, g))
    }
}

fn loss_parts(yn: &[f64], yk: &[f64], batch: &Batch) -> LossParts {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let denom = yn.len() as f64;
    LossParts { mse_next: sq(yn, &batch.v_next) / denom, mse_k: sq(yk, &batch.v_k) / denom }
}
