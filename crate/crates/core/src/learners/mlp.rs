//! Feed-forward classifier over concatenated embeddings: rectified hidden
//! layers, a 6-way softmax output, cross-entropy loss and Adam updates.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ensembles::make_fold_plan;
use crate::error::{Error, Result};
use crate::metrics::{qwk, SCORE_CATEGORIES};

pub const DEFAULT_HIDDEN: [usize; 2] = [3200, 1600];

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    /// Layer widths from input to output.
    pub dims: Vec<usize>,
    /// `weights[l]` has shape `dims[l] x dims[l + 1]`.
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub seed: u64,
}

/// Model with the default hidden widths.
pub fn init_mlp(input_dim: usize, seed: u64) -> Result<MlpModel> {
    init_mlp_with(input_dim, &DEFAULT_HIDDEN, seed)
}

/// Weights uniform on `[-a, a]` with `a = sqrt(6 / fan_in)` (variance
/// `2 / fan_in`), biases zero.
pub fn init_mlp_with(input_dim: usize, hidden: &[usize], seed: u64) -> Result<MlpModel> {
    if input_dim == 0 {
        return Err(Error::Precondition("input_dim must be >= 1".into()));
    }
    if hidden.contains(&0) {
        return Err(Error::Precondition("hidden widths must be >= 1".into()));
    }
    let mut dims = vec![input_dim];
    dims.extend_from_slice(hidden);
    dims.push(SCORE_CATEGORIES);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for l in 0..dims.len() - 1 {
        let a = (6.0 / dims[l] as f64).sqrt();
        weights.push(Array2::from_shape_simple_fn((dims[l], dims[l + 1]), || {
            rng.gen_range(-a..=a)
        }));
        biases.push(Array1::zeros(dims[l + 1]));
    }
    Ok(MlpModel {
        dims,
        weights,
        biases,
        seed,
    })
}

fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

/// Parameter (and optionally input) gradients of the mean cross-entropy loss.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: f64,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub input: Option<Array2<f64>>,
}

impl MlpModel {
    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn check_cols(&self, got: usize) -> Result<()> {
        if got != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got,
            });
        }
        Ok(())
    }

    /// Class probabilities for one input.
    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let p = self.forward_batch(x.insert_axis(Axis(0)))?;
        Ok(p.row(0).to_owned())
    }

    /// Class probabilities, one row per input row.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_cols(x.ncols())?;
        let mut h = x.to_owned();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = h.dot(w) + b;
            if l < last {
                h.mapv_inplace(|v| v.max(0.0));
            }
        }
        softmax_rows(&mut h);
        Ok(h)
    }

    /// Predicted scores (argmax class, 1-based) for each row, evaluated in
    /// chunks to bound memory.
    pub fn predict_scores(&self, x: ArrayView2<f64>) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(x.nrows());
        for start in (0..x.nrows()).step_by(512) {
            let end = (start + 512).min(x.nrows());
            let p = self.forward_batch(x.slice(s![start..end, ..]))?;
            out.extend(p.rows().into_iter().map(|r| argmax(r) as u8 + 1));
        }
        Ok(out)
    }

    /// Expected score `sum_k k * p_k` for each row.
    pub fn predict_expected(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        let p = self.forward_batch(x)?;
        Ok(p.rows()
            .into_iter()
            .map(|r| r.iter().enumerate().map(|(k, v)| (k + 1) as f64 * v).sum())
            .collect())
    }

    /// Mean cross-entropy over the batch and its gradients. `labels` are
    /// scores in `1..=6`.
    pub fn gradients(&self, x: ArrayView2<f64>, labels: &[u8], with_input: bool) -> Result<Gradients> {
        self.check_cols(x.ncols())?;
        if labels.len() != x.nrows() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                got: labels.len(),
            });
        }
        let n = x.nrows() as f64;
        let layers = self.weights.len();
        // activations[l] is the input to layer l.
        let mut activations: Vec<Array2<f64>> = Vec::with_capacity(layers);
        let mut h = x.to_owned();
        for l in 0..layers {
            let z = h.dot(&self.weights[l]) + &self.biases[l];
            activations.push(h);
            h = if l < layers - 1 { z.mapv(|v| v.max(0.0)) } else { z };
        }
        softmax_rows(&mut h);
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            loss -= h[[i, y as usize - 1]].max(1e-300).ln();
            h[[i, y as usize - 1]] -= 1.0;
        }
        loss /= n;
        h /= n;

        let mut dz = h;
        let mut gw = vec![Array2::zeros((0, 0)); layers];
        let mut gb = vec![Array1::zeros(0); layers];
        let mut input = None;
        for l in (0..layers).rev() {
            gw[l] = activations[l].t().dot(&dz);
            gb[l] = dz.sum_axis(Axis(0));
            if l > 0 || with_input {
                let mut da = dz.dot(&self.weights[l].t());
                if l > 0 {
                    Zip::from(&mut da)
                        .and(&activations[l])
                        .for_each(|d, &a| {
                            if a <= 0.0 {
                                *d = 0.0
                            }
                        });
                    dz = da;
                } else {
                    input = Some(da);
                }
            }
        }
        Ok(Gradients {
            loss,
            weights: gw,
            biases: gb,
            input,
        })
    }

    pub fn loss(&self, x: ArrayView2<f64>, labels: &[u8]) -> Result<f64> {
        let p = self.forward_batch(x)?;
        Ok(-labels
            .iter()
            .enumerate()
            .map(|(i, &y)| p[[i, y as usize - 1]].max(1e-300).ln())
            .sum::<f64>()
            / labels.len() as f64)
    }

    /// Writes a magic line, a JSON header line, then all parameters as
    /// little-endian `f64` (each weight matrix row-major, then its bias).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(CHECKPOINT_MAGIC.as_bytes()).map_err(io)?;
        let header = CheckpointHeader {
            dims: self.dims.clone(),
            seed: self.seed,
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n").map_err(io)?;
        for (wt, b) in self.weights.iter().zip(&self.biases) {
            for v in wt.iter().chain(b.iter()) {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut magic = String::new();
        r.read_line(&mut magic).map_err(io)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Integrity(format!("{}: not an MLP checkpoint", path.display())));
        }
        let mut line = String::new();
        r.read_line(&mut line).map_err(io)?;
        let header: CheckpointHeader = serde_json::from_str(&line)?;
        if header.dims.len() < 2 || header.dims.contains(&0) {
            return Err(Error::Integrity(format!("{}: bad layer dims", path.display())));
        }
        let mut body = Vec::new();
        r.read_to_end(&mut body).map_err(io)?;
        let mut values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let expected: usize = header.dims.windows(2).map(|d| d[0] * d[1] + d[1]).sum();
        if body.len() != expected * 8 {
            return Err(Error::Integrity(format!(
                "{}: expected {expected} parameters, found {} bytes",
                path.display(),
                body.len()
            )));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for d in header.dims.windows(2) {
            let w: Vec<f64> = values.by_ref().take(d[0] * d[1]).collect();
            weights.push(Array2::from_shape_vec((d[0], d[1]), w).unwrap());
            biases.push(values.by_ref().take(d[1]).collect());
        }
        Ok(MlpModel {
            dims: header.dims,
            weights,
            biases,
            seed: header.seed,
        })
    }
}

const CHECKPOINT_MAGIC: &str = "aes-mlp-checkpoint v1\n";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    dims: Vec<usize>,
    seed: u64,
}

fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn contiguous(a: &mut Array2<f64>) -> &mut [f64] {
    if !a.is_standard_layout() {
        *a = a.as_standard_layout().into_owned();
    }
    a.as_slice_mut().unwrap()
}

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    m_w: Vec<Array2<f64>>,
    v_w: Vec<Array2<f64>>,
    m_b: Vec<Array1<f64>>,
    v_b: Vec<Array1<f64>>,
}

impl Adam {
    pub fn new(model: &MlpModel, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m_w: model.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            v_w: model.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            m_b: model.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
            v_b: model.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn update(&mut self, model: &mut MlpModel, g: &Gradients) {
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let lr = self.learning_rate * (1.0 - b2.powi(self.step)).sqrt() / (1.0 - b1.powi(self.step));
        let step = |p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
            for (((p, m), v), &g) in p.iter_mut().zip(m).zip(v).zip(g) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * *m / (v.sqrt() + eps);
            }
        };
        for l in 0..model.weights.len() {
            step(
                contiguous(&mut model.weights[l]),
                contiguous(&mut self.m_w[l]),
                contiguous(&mut self.v_w[l]),
                g.weights[l].as_standard_layout().as_slice().unwrap(),
            );
            step(
                model.biases[l].as_slice_mut().unwrap(),
                self.m_b[l].as_slice_mut().unwrap(),
                self.v_b[l].as_slice_mut().unwrap(),
                g.biases[l].as_standard_layout().as_slice().unwrap(),
            );
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub folds: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: DEFAULT_HIDDEN.to_vec(),
            learning_rate: 0.001,
            batch_size: 128,
            epochs: 8,
            folds: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Precondition("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Precondition("batch_size must be >= 1".into()));
        }
        if self.folds < 2 {
            return Err(Error::Precondition("folds must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub fold: usize,
    pub qwk: f64,
    pub accuracy: f64,
    /// Mean training loss of each epoch.
    pub epoch_loss: Vec<f64>,
}

fn check_labels(labels: &[u8]) -> Result<()> {
    if let Some(i) = labels.iter().position(|&y| !(1..=SCORE_CATEGORIES as u8).contains(&y)) {
        return Err(Error::Precondition(format!(
            "label {} at row {i} is outside 1..={SCORE_CATEGORIES}",
            labels[i]
        )));
    }
    Ok(())
}

fn gather_rows(x: ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

/// Trains a fresh model on `x`/`labels` for `config.epochs` epochs of shuffled
/// mini-batches. Returns the model and the mean loss of each epoch.
pub fn fit_mlp(
    x: ArrayView2<f64>,
    labels: &[u8],
    config: &TrainConfig,
    seed: u64,
) -> Result<(MlpModel, Vec<f64>)> {
    let mut model = init_mlp_with(x.ncols(), &config.hidden, config.seed)?;
    let mut adam = Adam::new(&model, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let xb = gather_rows(x, batch);
            let yb: Vec<u8> = batch.iter().map(|&i| labels[i]).collect();
            let g = model.gradients(xb.view(), &yb, false)?;
            total += g.loss * batch.len() as f64;
            adam.update(&mut model, &g);
        }
        history.push(total / x.nrows() as f64);
    }
    Ok((model, history))
}

/// K-fold training. Every fold starts from the same initialization
/// (`config.seed`) and is scored by QWK on its held-out rows; the model of
/// the best fold is returned together with all fold records.
pub fn train_mlp(
    x: ArrayView2<f64>,
    labels: &[u8],
    config: &TrainConfig,
) -> Result<(MlpModel, Vec<FoldRecord>)> {
    config.validate()?;
    check_labels(labels)?;
    if labels.len() != x.nrows() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            got: labels.len(),
        });
    }
    if x.nrows() < config.folds {
        return Err(Error::Precondition(format!(
            "{} rows cannot fill {} folds",
            x.nrows(),
            config.folds
        )));
    }
    let plan = make_fold_plan(labels, config.folds, config.seed)?;
    let mut best: Option<(f64, MlpModel)> = None;
    let mut records = Vec::with_capacity(config.folds);
    for fold in 0..config.folds {
        let train_idx = plan.train_indices(fold);
        let test_idx = &plan.folds[fold];
        let xt = gather_rows(x, &train_idx);
        let yt: Vec<u8> = train_idx.iter().map(|&i| labels[i]).collect();
        let fold_seed = config.seed ^ ((fold as u64 + 1) << 32);
        let (model, epoch_loss) = fit_mlp(xt.view(), &yt, config, fold_seed)?;
        let xv = gather_rows(x, test_idx);
        let yv: Vec<u8> = test_idx.iter().map(|&i| labels[i]).collect();
        let pred = model.predict_scores(xv.view())?;
        let accuracy = pred.iter().zip(&yv).filter(|(a, b)| a == b).count() as f64 / yv.len() as f64;
        let k = qwk(&pred, &yv, SCORE_CATEGORIES).unwrap_or(0.0);
        log::info!("mlp fold {fold}: qwk {k:.4}, accuracy {accuracy:.4}");
        records.push(FoldRecord {
            fold,
            qwk: k,
            accuracy,
            epoch_loss,
        });
        if best.as_ref().map_or(true, |(b, _)| k > *b) {
            best = Some((k, model));
        }
    }
    Ok((best.unwrap().1, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shapes() {
        let m = init_mlp(4, 0).unwrap();
        let shapes: Vec<_> = m.weights.iter().map(|w| w.dim()).collect();
        assert_eq!(shapes, vec![(4, 3200), (3200, 1600), (1600, 6)]);
        assert!(m.biases.iter().all(|b| b.iter().all(|v| *v == 0.0)));
        assert_eq!(init_mlp(4, 0).unwrap(), m);
        assert_ne!(init_mlp(4, 1).unwrap(), m);
        assert!(init_mlp(0, 0).is_err());
    }

    #[test]
    fn zero_weights_give_uniform_output() {
        let mut m = init_mlp_with(5, &[7, 3], 0).unwrap();
        m.weights.iter_mut().for_each(|w| w.fill(0.0));
        let p = m.forward(ndarray::arr1(&[1.0, -2.0, 3.0, 0.5, 9.0]).view()).unwrap();
        for v in p.iter() {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
        assert!(m.forward(ndarray::arr1(&[1.0]).view()).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = init_mlp_with(3, &[4], 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        m.save(&p).unwrap();
        assert_eq!(MlpModel::load(&p).unwrap(), m);
        let mut raw = std::fs::read(&p).unwrap();
        raw.truncate(raw.len() - 8);
        std::fs::write(&p, raw).unwrap();
        assert!(matches!(MlpModel::load(&p), Err(Error::Integrity(_))));
    }

    #[test]
    fn bad_labels_and_sizes() {
        let x = Array2::zeros((4, 2));
        let cfg = TrainConfig {
            hidden: vec![3],
            folds: 2,
            ..Default::default()
        };
        assert!(matches!(train_mlp(x.view(), &[0, 1, 2, 3], &cfg), Err(Error::Precondition(_))));
        let cfg10 = TrainConfig { hidden: vec![3], ..Default::default() };
        assert!(train_mlp(x.view(), &[1, 2, 1, 2], &cfg10).is_err());
    }
}
