//! Fixed-dictionary lifting fitted by ridge least squares.
//!
//! Features act on the flattened, normalized `n x H` history so the fit consumes
//! exactly the samples the network does. Every dictionary starts with the constant
//! and the raw coordinates, which makes affine systems representable and lets the
//! projection back to histories be an exact coordinate selector.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, HistoryMatrix, Scaler};
use crate::error::{Error, Result};
use crate::linalg::{solve_normal, DenseMatrix};
use crate::mpc::LinearEmbedding;

/// `kind` tag in `lifted_model.json`.
pub const EDMD_KIND: &str = "edmd";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Dictionary {
    /// `(1, x)`.
    Identity,
    /// `(1, x)` followed by every monomial of total degree `2..=degree`, graded and
    /// then lexicographic in the coordinate indices.
    Polynomial { degree: usize },
    /// `(1, x)` followed by `exp(-|x - c|^2 / width^2)` for each center.
    Rbf { centers: Vec<Vec<f64>>, width: f64 },
}

impl Dictionary {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            Dictionary::Identity => Ok(()),
            Dictionary::Polynomial { degree } if *degree == 0 => {
                Err(Error::InvalidArgument("polynomial degree must be >= 1".into()))
            }
            Dictionary::Polynomial { .. } => Ok(()),
            Dictionary::Rbf { width, .. } if !(*width > 0.0 && width.is_finite()) => {
                Err(Error::InvalidArgument(format!("rbf width must be positive, got {width}")))
            }
            Dictionary::Rbf { centers, .. } => match centers.iter().position(|c| c.len() != dim) {
                Some(i) => Err(Error::Shape(format!("rbf center {i} has {} entries, input has {dim}", centers[i].len()))),
                None => Ok(()),
            },
        }
    }

    /// Feature count `N_d` for inputs of dimension `dim`.
    pub fn len(&self, dim: usize) -> usize {
        1 + dim
            + match self {
                Dictionary::Identity => 0,
                Dictionary::Polynomial { degree } => (2..=*degree).map(|d| multichoose(dim, d)).sum(),
                Dictionary::Rbf { centers, .. } => centers.len(),
            }
    }

    /// Rbf dictionary with `k` centers drawn (without replacement) from the
    /// normalized `v_k` histories of `ds`.
    pub fn rbf_from_data(ds: &Dataset, scaler: &Scaler, k: usize, width: f64, seed: u64) -> Result<Self> {
        use rand::seq::index::sample;
        use rand::SeedableRng;
        if k > ds.len() {
            return Err(Error::InvalidArgument(format!("{k} rbf centers requested from {} samples", ds.len())));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, ds.len(), k).into_vec();
        idx.sort_unstable();
        let centers = idx.into_iter().map(|i| scaler.norm_vs(ds.samples[i].v_k.as_slice())).collect();
        let dict = Dictionary::Rbf { centers, width };
        dict.validate(ds.n * ds.h)?;
        Ok(dict)
    }
}

fn multichoose(n: usize, k: usize) -> usize {
    // C(n + k - 1, k), computed incrementally to stay exact.
    (1..=k).fold(1usize, |acc, i| acc * (n + i - 1) / i)
}

fn push_monomials(x: &[f64], degree: usize, start: usize, prod: f64, out: &mut Vec<f64>) {
    if degree == 0 {
        out.push(prod);
        return;
    }
    for i in start..x.len() {
        push_monomials(x, degree - 1, i, prod * x[i], out);
    }
}

/// Feature vector of `x`: `(1, x, extras)`.
pub fn lift_dict(dict: &Dictionary, x: &[f64]) -> Result<Vec<f64>> {
    dict.validate(x.len())?;
    let mut out = Vec::with_capacity(dict.len(x.len()));
    out.push(1.0);
    out.extend_from_slice(x);
    match dict {
        Dictionary::Identity => {}
        Dictionary::Polynomial { degree } => {
            for d in 2..=*degree {
                push_monomials(x, d, 0, 1.0, &mut out);
            }
        }
        Dictionary::Rbf { centers, width } => {
            for c in centers {
                let r2: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                out.push((-r2 / (width * width)).exp());
            }
        }
    }
    Ok(out)
}

/// Frobenius norms of the two least-squares residuals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub samples: usize,
    /// `|Psi(v_next) - [A B][Psi(v_k); u]|_F`.
    pub dynamics_residual: f64,
    /// `|v_k - C Psi(v_k)|_F`.
    pub projection_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdmdModel {
    pub dictionary: Dictionary,
    pub n: usize,
    pub h: usize,
    pub ridge: f64,
    pub scaler: Scaler,
    pub report: FitReport,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
}

fn lifted_rows(dict: &Dictionary, scaler: &Scaler, xs: impl Iterator<Item = HistoryMatrix>) -> Result<Vec<Vec<f64>>> {
    xs.map(|x| lift_dict(dict, &scaler.norm_vs(x.as_slice()))).collect()
}

/// Selector of the raw coordinates: `C Psi(x) = x` for every dictionary here.
fn selector(dim: usize, features: usize) -> DMatrix<f64> {
    DMatrix::from_fn(dim, features, |i, j| if j == i + 1 { 1.0 } else { 0.0 })
}

/// Ridge least squares for `[A B]` on `(Psi(v_k), u) -> Psi(v_next)`. The dataset's
/// scaler is applied first when present (identity otherwise); `m = 0` fits `A` only.
pub fn fit(ds: &Dataset, dictionary: Dictionary, ridge: f64) -> Result<EdmdModel> {
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::InvalidArgument(format!("ridge must be >= 0, got {ridge}")));
    }
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot fit on an empty dataset".into()));
    }
    let dim = ds.n * ds.h;
    dictionary.validate(dim)?;
    let scaler = ds.scaler.unwrap_or_else(Scaler::identity);
    let nd = dictionary.len(dim);
    let m = ds.m;

    let psi_k = lifted_rows(&dictionary, &scaler, ds.samples.iter().map(|s| s.v_k.clone()))?;
    let psi_next = lifted_rows(&dictionary, &scaler, ds.samples.iter().map(|s| s.v_next.clone()))?;
    let rows = ds.len();
    let theta = DMatrix::from_fn(rows, nd + m, |r, j| {
        if j < nd {
            psi_k[r][j]
        } else {
            scaler.norm_u(ds.samples[r].u_k[j - nd])
        }
    });
    let y = DMatrix::from_fn(rows, nd, |r, j| psi_next[r][j]);

    let theta_t = theta.transpose();
    let gram = &theta_t * &theta + DMatrix::identity(nd + m, nd + m) * ridge;
    let w = solve_normal(&gram, &(&theta_t * &y))?;
    let dynamics_residual = (&theta * &w - &y).norm();
    let wt = w.transpose();
    let a = wt.columns(0, nd).into_owned();
    let b = wt.columns(nd, m).into_owned();

    let c = selector(dim, nd);
    let psi = DMatrix::from_fn(rows, nd, |r, j| psi_k[r][j]);
    let x = DMatrix::from_fn(rows, dim, |r, j| scaler.norm_v(ds.samples[r].v_k.as_slice()[j]));
    let projection_residual = (&psi * c.transpose() - x).norm();

    Ok(EdmdModel {
        dictionary,
        n: ds.n,
        h: ds.h,
        ridge,
        scaler,
        report: FitReport { samples: rows, dynamics_residual, projection_residual },
        a,
        b,
        c,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct EdmdShape {
    n: usize,
    h: usize,
    m: usize,
    ridge: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct EdmdFile {
    kind: String,
    config: EdmdShape,
    scaler: Scaler,
    dictionary: Dictionary,
    #[serde(rename = "A")]
    a: DenseMatrix,
    #[serde(rename = "B")]
    b: DenseMatrix,
    #[serde(rename = "C")]
    c: DenseMatrix,
    fit: FitReport,
}

impl EdmdModel {
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// Lifted state of a raw p.u. history.
    pub fn lift(&self, v: &HistoryMatrix) -> Result<DVector<f64>> {
        if v.n() != self.n || v.h() != self.h {
            return Err(Error::Shape(format!("history is {}x{}, model expects {}x{}", v.n(), v.h(), self.n, self.h)));
        }
        Ok(DVector::from_vec(lift_dict(&self.dictionary, &self.scaler.norm_vs(v.as_slice()))?))
    }

    /// Raw p.u. history `denormalize(C z)`.
    pub fn project(&self, z: &DVector<f64>) -> Result<HistoryMatrix> {
        HistoryMatrix::new(self.n, self.h, self.scaler.denorm_vs((&self.c * z).as_slice()))
    }

    /// Open-loop histories for `v_k` under raw controls `u_seq`: entry 0 is the
    /// reconstruction of `v_k`, entry `i` the prediction after `i` intervals.
    pub fn predict(&self, v_k: &HistoryMatrix, u_seq: &[Vec<f64>]) -> Result<Vec<HistoryMatrix>> {
        let mut z = self.lift(v_k)?;
        let mut out = vec![self.project(&z)?];
        for (i, u) in u_seq.iter().enumerate() {
            if u.len() != self.m() {
                return Err(Error::Shape(format!("control {i} has {} entries, model has m = {}", u.len(), self.m())));
            }
            z = &self.a * &z + &self.b * DVector::from_vec(self.scaler.norm_us(u));
            out.push(self.project(&z)?);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = EdmdFile {
            kind: EDMD_KIND.into(),
            config: EdmdShape { n: self.n, h: self.h, m: self.m(), ridge: self.ridge },
            scaler: self.scaler,
            dictionary: self.dictionary.clone(),
            a: DenseMatrix::from_matrix(&self.a),
            b: DenseMatrix::from_matrix(&self.b),
            c: DenseMatrix::from_matrix(&self.c),
            fit: self.report,
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: EdmdFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if file.kind != EDMD_KIND {
            return Err(Error::Parse(format!("lifted model kind {:?} is not {EDMD_KIND:?}", file.kind)));
        }
        let EdmdShape { n, h, m, ridge } = file.config;
        let nd = file.dictionary.len(n * h);
        let (a, b, c) = (file.a.to_matrix()?, file.b.to_matrix()?, file.c.to_matrix()?);
        if a.shape() != (nd, nd) || b.shape() != (nd, m) || c.shape() != (n * h, nd) {
            return Err(Error::Parse(format!(
                "A {:?}, B {:?}, C {:?} do not fit N_d = {nd}, m = {m}, n*H = {}",
                a.shape(),
                b.shape(),
                c.shape(),
                n * h
            )));
        }
        file.dictionary.validate(n * h)?;
        Ok(Self { dictionary: file.dictionary, n, h, ridge, scaler: file.scaler, report: file.fit, a, b, c })
    }
}

impl LinearEmbedding for EdmdModel {
    fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    fn scaler(&self) -> &Scaler {
        &self.scaler
    }

    fn history_shape(&self) -> (usize, usize) {
        (self.n, self.h)
    }

    fn lift(&self, v: &HistoryMatrix) -> Result<DVector<f64>> {
        EdmdModel::lift(self, v)
    }

    fn reconstruct(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.c * z)
    }

    fn output_jacobian(&self, _: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.c.clone())
    }
}

/// Root-mean-square error of each predicted history against the truth.
pub fn step_errors(pred: &[HistoryMatrix], truth: &[HistoryMatrix]) -> Result<Vec<f64>> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} ground-truth histories", pred.len(), truth.len())));
    }
    pred.iter()
        .zip(truth)
        .map(|(p, t)| {
            if (p.n(), p.h()) != (t.n(), t.h()) {
                return Err(Error::Shape("prediction and truth histories differ in shape".into()));
            }
            let s: f64 = p.as_slice().iter().zip(t.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum();
            Ok((s / p.as_slice().len() as f64).sqrt())
        })
        .collect()
}
