//! Small fully-connected regressor with rectifier hidden layers, minibatch
//! Adam training, early stopping and MAE/MSE/RMSE evaluation.
//!
//! Inputs are z-scored per column with statistics frozen from the training
//! split; targets are z-scored the same way so one learning rate works
//! across microgrid sizes. Both sets of statistics travel with the
//! parameters and predictions are reported in raw target units.

#![allow(clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::Dataset;
use crate::error::{Error, Result};

/// Architecture and training hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MlpConfig {
    /// Total layer count including input and output.
    pub layer_count: usize,
    /// Neurons per hidden layer.
    pub hidden_width: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Consecutive epochs without validation improvement tolerated before
    /// stopping (training halts once this is exceeded).
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            layer_count: 5,
            hidden_width: 10,
            learning_rate: 1e-3,
            max_epochs: 5000,
            patience: 50,
            batch_size: 256,
            seed: 0,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layer_count < 3 {
            return Err(Error::Config("need at least one hidden layer".into()));
        }
        if self.hidden_width == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("width, batch size and epochs must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// One affine map, row-major `rows x cols`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LayerParams {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl LayerParams {
    fn zeros(rows: usize, cols: usize) -> Self {
        LayerParams {
            rows,
            cols,
            w: vec![0.0; rows * cols],
            b: vec![0.0; rows],
        }
    }
}

/// Network parameters plus the frozen standardization statistics.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MlpParams {
    pub layers: Vec<LayerParams>,
    pub feat_mean: Vec<f64>,
    pub feat_std: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

impl MlpParams {
    /// Seeded He-uniform initialization with identity standardization.
    pub fn random(sizes: &[usize], seed: u64) -> Result<MlpParams> {
        if sizes.len() < 2 {
            return Err(Error::Shape("need at least input and output sizes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for win in sizes.windows(2) {
            let (cols, rows) = (win[0], win[1]);
            let limit = (6.0 / cols as f64).sqrt();
            let mut layer = LayerParams::zeros(rows, cols);
            for w in layer.w.iter_mut() {
                *w = rng.gen_range(-limit..limit);
            }
            layers.push(layer);
        }
        Ok(MlpParams {
            feat_mean: vec![0.0; sizes[0]],
            feat_std: vec![1.0; sizes[0]],
            target_mean: 0.0,
            target_std: 1.0,
            layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map(|l| l.cols).unwrap_or(0)
    }

    pub fn shapes_chain(&self) -> bool {
        self.layers.windows(2).all(|w| w[0].rows == w[1].cols)
            && self.layers.last().map(|l| l.rows) == Some(1)
    }

    /// Prediction in raw target units: standardize, forward, de-standardize.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} features, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let z: Vec<f64> = x
            .iter()
            .zip(self.feat_mean.iter().zip(&self.feat_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        Ok(forward(self, &z)? * self.target_std + self.target_mean)
    }
}

/// Raw network pass: affine, rectifier on hidden layers, affine scalar
/// output. No standardization is applied.
pub fn forward(params: &MlpParams, x: &[f64]) -> Result<f64> {
    if params.layers.is_empty() {
        return Err(Error::Shape("network has no layers".into()));
    }
    if x.len() != params.input_dim() {
        return Err(Error::Shape(format!(
            "input has {} features, network expects {}",
            x.len(),
            params.input_dim()
        )));
    }
    let last = params.layers.len() - 1;
    let mut h = x.to_vec();
    for (k, layer) in params.layers.iter().enumerate() {
        if h.len() != layer.cols {
            return Err(Error::Shape(format!(
                "layer {k} expects {} inputs, got {}",
                layer.cols,
                h.len()
            )));
        }
        let mut z = layer.b.clone();
        for r in 0..layer.rows {
            let row = &layer.w[r * layer.cols..(r + 1) * layer.cols];
            z[r] += row.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>();
        }
        if k != last {
            for v in z.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        h = z;
    }
    if h.len() != 1 {
        return Err(Error::Shape(format!("output layer produced {} values", h.len())));
    }
    Ok(h[0])
}

/// Mean-squared-error loss and analytic gradients over a batch, via
/// backpropagation.
pub fn gradients(params: &MlpParams, xs: &[&[f64]], ys: &[f64]) -> Result<(f64, Vec<LayerParams>)> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::Shape("batch inputs and targets must align and be nonempty".into()));
    }
    let depth = params.layers.len();
    let last = depth - 1;
    let mut grads: Vec<LayerParams> = params
        .layers
        .iter()
        .map(|l| LayerParams::zeros(l.rows, l.cols))
        .collect();
    let batch = xs.len() as f64;
    let mut loss = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        // Forward pass retaining activations and rectifier masks.
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(depth + 1);
        let mut masks: Vec<Vec<bool>> = Vec::with_capacity(depth);
        acts.push(x.to_vec());
        for (k, layer) in params.layers.iter().enumerate() {
            let h = acts.last().unwrap();
            let mut z = layer.b.clone();
            for r in 0..layer.rows {
                let row = &layer.w[r * layer.cols..(r + 1) * layer.cols];
                z[r] += row.iter().zip(h).map(|(w, v)| w * v).sum::<f64>();
            }
            if k != last {
                let mask: Vec<bool> = z.iter().map(|&v| v > 0.0).collect();
                for (v, &m) in z.iter_mut().zip(&mask) {
                    if !m {
                        *v = 0.0;
                    }
                }
                masks.push(mask);
            } else {
                masks.push(vec![true; layer.rows]);
            }
            acts.push(z);
        }
        let pred = acts[depth][0];
        let err = pred - y;
        loss += err * err / batch;
        // Backward pass.
        let mut delta = vec![2.0 * err / batch];
        for k in (0..depth).rev() {
            let layer = &params.layers[k];
            let h_prev = &acts[k];
            let g = &mut grads[k];
            for r in 0..layer.rows {
                g.b[r] += delta[r];
                let grow = &mut g.w[r * layer.cols..(r + 1) * layer.cols];
                for (c, gv) in grow.iter_mut().enumerate() {
                    *gv += delta[r] * h_prev[c];
                }
            }
            if k > 0 {
                let mut prev = vec![0.0; layer.cols];
                for r in 0..layer.rows {
                    let row = &layer.w[r * layer.cols..(r + 1) * layer.cols];
                    for (c, p) in prev.iter_mut().enumerate() {
                        *p += row[c] * delta[r];
                    }
                }
                for (p, &m) in prev.iter_mut().zip(&masks[k - 1]) {
                    if !m {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
    }
    Ok((loss, grads))
}

/// Central-difference gradients of the same batch loss, using only the
/// forward pass. Returned in flattened `(w then b) per layer` order.
pub fn finite_difference_gradients(
    params: &MlpParams,
    xs: &[&[f64]],
    ys: &[f64],
    eps: f64,
) -> Result<Vec<f64>> {
    let batch_loss = |p: &MlpParams| -> Result<f64> {
        let mut acc = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let e = forward(p, x)? - y;
            acc += e * e / xs.len() as f64;
        }
        Ok(acc)
    };
    let mut out = Vec::new();
    let mut probe = params.clone();
    for k in 0..params.layers.len() {
        for i in 0..params.layers[k].w.len() {
            probe.layers[k].w[i] = params.layers[k].w[i] + eps;
            let up = batch_loss(&probe)?;
            probe.layers[k].w[i] = params.layers[k].w[i] - eps;
            let down = batch_loss(&probe)?;
            probe.layers[k].w[i] = params.layers[k].w[i];
            out.push((up - down) / (2.0 * eps));
        }
        for i in 0..params.layers[k].b.len() {
            probe.layers[k].b[i] = params.layers[k].b[i] + eps;
            let up = batch_loss(&probe)?;
            probe.layers[k].b[i] = params.layers[k].b[i] - eps;
            let down = batch_loss(&probe)?;
            probe.layers[k].b[i] = params.layers[k].b[i];
            out.push((up - down) / (2.0 * eps));
        }
    }
    Ok(out)
}

/// Flatten analytic layer gradients in the same order as
/// [`finite_difference_gradients`].
pub fn flatten_gradients(grads: &[LayerParams]) -> Vec<f64> {
    let mut out = Vec::new();
    for g in grads {
        out.extend_from_slice(&g.w);
        out.extend_from_slice(&g.b);
    }
    out
}

/// Adam optimizer state (bias-corrected moment estimates).
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<LayerParams>,
    v: Vec<LayerParams>,
}

impl Adam {
    pub fn new(lr: f64, layers: &[LayerParams]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: layers.iter().map(|l| LayerParams::zeros(l.rows, l.cols)).collect(),
            v: layers.iter().map(|l| LayerParams::zeros(l.rows, l.cols)).collect(),
        }
    }

    pub fn step(&mut self, layers: &mut [LayerParams], grads: &[LayerParams]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for k in 0..layers.len() {
            let (m, v, g, p) = (&mut self.m[k], &mut self.v[k], &grads[k], &mut layers[k]);
            for i in 0..p.w.len() {
                m.w[i] = self.beta1 * m.w[i] + (1.0 - self.beta1) * g.w[i];
                v.w[i] = self.beta2 * v.w[i] + (1.0 - self.beta2) * g.w[i] * g.w[i];
                p.w[i] -= self.lr * (m.w[i] / c1) / ((v.w[i] / c2).sqrt() + self.eps);
            }
            for i in 0..p.b.len() {
                m.b[i] = self.beta1 * m.b[i] + (1.0 - self.beta1) * g.b[i];
                v.b[i] = self.beta2 * v.b[i] + (1.0 - self.beta2) * g.b[i] * g.b[i];
                p.b[i] -= self.lr * (m.b[i] / c1) / ((v.b[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// MAE/MSE/RMSE triple in raw target units.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
}

/// Outcome of one training run.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub train: Metrics,
    pub validation: Metrics,
    pub test: Metrics,
    /// Best validation MSE in standardized target units.
    pub best_val_loss: f64,
    pub wall_time_s: f64,
}

/// Standard-definition metrics of `params` over a dataset.
pub fn evaluate(params: &MlpParams, data: &Dataset) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty split".into()));
    }
    let mut abs = 0.0;
    let mut sq = 0.0;
    for i in 0..data.rows() {
        let e = params.predict(data.row(i))? - data.targets[i];
        abs += e.abs();
        sq += e * e;
    }
    let n = data.rows() as f64;
    let mse = sq / n;
    Ok(Metrics {
        mae: abs / n,
        mse,
        rmse: mse.sqrt(),
    })
}

fn column_stats(data: &Dataset) -> (Vec<f64>, Vec<f64>) {
    let rows = data.rows() as f64;
    let mut mean = vec![0.0; data.width];
    for i in 0..data.rows() {
        for (j, v) in data.row(i).iter().enumerate() {
            mean[j] += v / rows;
        }
    }
    let mut std = vec![0.0; data.width];
    for i in 0..data.rows() {
        for (j, v) in data.row(i).iter().enumerate() {
            let d = v - mean[j];
            std[j] += d * d / rows;
        }
    }
    for s in std.iter_mut() {
        *s = s.sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    (mean, std)
}

fn standardize(data: &Dataset, mean: &[f64], std: &[f64], t_mean: f64, t_std: f64) -> (Vec<f64>, Vec<f64>) {
    let mut xs = Vec::with_capacity(data.features.len());
    for i in 0..data.rows() {
        for (j, v) in data.row(i).iter().enumerate() {
            xs.push((v - mean[j]) / std[j]);
        }
    }
    let ys = data.targets.iter().map(|y| (y - t_mean) / t_std).collect();
    (xs, ys)
}

/// Minibatch Adam on MSE with early stopping on validation loss; returns
/// the parameters from the best-validation epoch.
pub fn train(
    train_split: &Dataset,
    val_split: &Dataset,
    test_split: &Dataset,
    config: &MlpConfig,
) -> Result<(MlpParams, TrainReport)> {
    config.validate()?;
    for (name, d) in [("train", train_split), ("validation", val_split), ("test", test_split)] {
        if d.is_empty() {
            return Err(Error::Data(format!("{name} split is empty")));
        }
        if d.width != train_split.width {
            return Err(Error::Shape(format!("{name} split width differs from training width")));
        }
    }
    let started = std::time::Instant::now();
    let width = train_split.width;
    let (feat_mean, feat_std) = column_stats(train_split);
    let t_rows = train_split.rows() as f64;
    let target_mean = train_split.targets.iter().sum::<f64>() / t_rows;
    let target_std = {
        let var = train_split
            .targets
            .iter()
            .map(|y| (y - target_mean) * (y - target_mean))
            .sum::<f64>()
            / t_rows;
        let s = var.sqrt();
        if s < 1e-12 {
            1.0
        } else {
            s
        }
    };
    let (xs_train, ys_train) = standardize(train_split, &feat_mean, &feat_std, target_mean, target_std);
    let (xs_val, ys_val) = standardize(val_split, &feat_mean, &feat_std, target_mean, target_std);

    let mut sizes = vec![width];
    sizes.extend(std::iter::repeat_n(config.hidden_width, config.layer_count - 2));
    sizes.push(1);
    let mut params = MlpParams::random(&sizes, config.seed)?;
    params.feat_mean = feat_mean;
    params.feat_std = feat_std;
    params.target_mean = target_mean;
    params.target_std = target_std;

    let mut adam = Adam::new(config.learning_rate, &params.layers);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let n_train = train_split.rows();
    let mut order: Vec<usize> = (0..n_train).collect();

    let val_loss = |p: &MlpParams| -> Result<f64> {
        let mut acc = 0.0;
        for (i, &y) in ys_val.iter().enumerate() {
            let e = forward(p, &xs_val[i * width..(i + 1) * width])? - y;
            acc += e * e / ys_val.len() as f64;
        }
        Ok(acc)
    };

    let mut best_val = f64::INFINITY;
    let mut best_layers = params.layers.clone();
    let mut stall = 0usize;
    let mut stopped_early = false;
    let mut epochs_run = 0usize;

    for epoch in 0..config.max_epochs {
        epochs_run = epoch + 1;
        for i in (1..n_train).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(config.batch_size) {
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| &xs_train[i * width..(i + 1) * width]).collect();
            let ys: Vec<f64> = chunk.iter().map(|&i| ys_train[i]).collect();
            let (loss, grads) = gradients(&params, &xs, &ys)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            adam.step(&mut params.layers, &grads);
        }
        let vl = val_loss(&params)?;
        if !vl.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        if vl < best_val {
            best_val = vl;
            best_layers = params.layers.clone();
            stall = 0;
        } else {
            stall += 1;
            if stall > config.patience {
                stopped_early = true;
                break;
            }
        }
    }
    params.layers = best_layers;

    let report = TrainReport {
        epochs_run,
        stopped_early,
        train: evaluate(&params, train_split)?,
        validation: evaluate(&params, val_split)?,
        test: evaluate(&params, test_split)?,
        best_val_loss: best_val,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok((params, report))
}

/// Serialized model document.
#[derive(serde::Serialize, serde::Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub n_dg: Option<usize>,
    pub params: MlpParams,
}

pub const MODEL_FORMAT: &str = "gridswitch-model-v1";

impl MlpParams {
    pub fn write_json<W: std::io::Write>(&self, w: W) -> Result<()> {
        let doc = ModelFile {
            format: MODEL_FORMAT.into(),
            n_dg: super::dg_count_for_width(self.input_dim()),
            params: self.clone(),
        };
        serde_json::to_writer_pretty(w, &doc).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn read_json<R: std::io::Read>(r: R) -> Result<MlpParams> {
        let doc: ModelFile = serde_json::from_reader(r).map_err(|e| Error::Parse(e.to_string()))?;
        if doc.format != MODEL_FORMAT {
            return Err(Error::Parse(format!("unsupported model format '{}'", doc.format)));
        }
        if !doc.params.shapes_chain() {
            return Err(Error::Shape("model layer shapes do not chain to a scalar output".into()));
        }
        Ok(doc.params)
    }
}

#[cfg(test)]
mod tests {
    use super::super::data::{split, Dataset, Provenance};
    use super::*;

    fn toy_linear_dataset(rows: usize) -> Dataset {
        // y = 3x over [-1, 1].
        let features: Vec<f64> = (0..rows).map(|i| -1.0 + 2.0 * i as f64 / (rows - 1) as f64).collect();
        let targets: Vec<f64> = features.iter().map(|x| 3.0 * x).collect();
        Dataset {
            width: 1,
            features,
            targets,
            attacked: Vec::new(),
            provenance: Provenance {
                seed: 0,
                n_dg: 0,
                snr_db: None,
                attack_fraction: 0.0,
                rows,
                generator: "toy".into(),
            },
        }
    }

    #[test]
    fn default_hyperparameters() {
        let cfg = MlpConfig::default();
        assert_eq!(cfg.layer_count, 5); // input + 3 hidden + output
        assert_eq!(cfg.hidden_width, 10);
        assert_eq!(cfg.learning_rate, 1e-3);
        assert_eq!(cfg.max_epochs, 5000);
        assert_eq!(cfg.patience, 50);
    }

    #[test]
    fn zero_weights_output_bias() {
        let mut p = MlpParams::random(&[3, 4, 1], 0).unwrap();
        for l in p.layers.iter_mut() {
            l.w.iter_mut().for_each(|w| *w = 0.0);
            l.b.iter_mut().for_each(|b| *b = 0.0);
        }
        p.layers.last_mut().unwrap().b[0] = 2.5;
        assert_eq!(forward(&p, &[10.0, -3.0, 0.7]).unwrap(), 2.5);
        assert_eq!(forward(&p, &[0.0, 0.0, 0.0]).unwrap(), 2.5);
    }

    #[test]
    fn negative_preactivation_contributes_nothing() {
        // Single hidden unit driven negative: output is the output bias.
        let mut p = MlpParams::random(&[1, 1, 1], 0).unwrap();
        p.layers[0].w[0] = -5.0;
        p.layers[0].b[0] = 0.0;
        p.layers[1].w[0] = 7.0;
        p.layers[1].b[0] = 0.25;
        assert_eq!(forward(&p, &[1.0]).unwrap(), 0.25);
        // And positive pre-activation passes through linearly.
        assert_eq!(forward(&p, &[-1.0]).unwrap(), 5.0 * 7.0 + 0.25);
    }

    #[test]
    fn forward_rejects_shape_mismatch() {
        let p = MlpParams::random(&[3, 4, 1], 0).unwrap();
        assert!(matches!(forward(&p, &[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn backprop_matches_central_differences() {
        let mut max_rel: f64 = 0.0;
        for seed in 0..10 {
            let p = MlpParams::random(&[4, 6, 5, 1], seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let xs_store: Vec<Vec<f64>> =
                (0..3).map(|_| (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
            let xs: Vec<&[f64]> = xs_store.iter().map(|v| v.as_slice()).collect();
            let ys: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (_, analytic) = gradients(&p, &xs, &ys).unwrap();
            let flat = flatten_gradients(&analytic);
            let numeric = finite_difference_gradients(&p, &xs, &ys, 1e-4).unwrap();
            for (a, n) in flat.iter().zip(&numeric) {
                let denom = a.abs().max(n.abs());
                if denom > 1e-3 {
                    max_rel = max_rel.max((a - n).abs() / denom);
                } else {
                    assert!((a - n).abs() < 1e-7, "near-zero gradient mismatch: {a} vs {n}");
                }
            }
        }
        assert!(max_rel < 1e-5, "max relative error {max_rel}");
    }

    #[test]
    fn adam_leaves_params_unchanged_on_zero_gradient() {
        let p0 = MlpParams::random(&[2, 3, 1], 9).unwrap();
        let mut p = p0.clone();
        let zero: Vec<LayerParams> = p
            .layers
            .iter()
            .map(|l| LayerParams::zeros(l.rows, l.cols))
            .collect();
        let mut adam = Adam::new(1e-3, &p.layers);
        adam.step(&mut p.layers, &zero);
        assert_eq!(p.layers, p0.layers);
    }

    #[test]
    fn toy_linear_regression_converges() {
        let data = toy_linear_dataset(300);
        let (tr, va, te) = split(&data, 4).unwrap();
        let cfg = MlpConfig {
            max_epochs: 500,
            patience: 500,
            batch_size: 32,
            seed: 2,
            ..MlpConfig::default()
        };
        let (_, report) = train(&tr, &va, &te, &cfg).unwrap();
        assert!(report.train.mse < 1e-4, "train mse {}", report.train.mse);
    }

    #[test]
    fn patience_contract_counts_exactly() {
        // lr = 0 freezes validation loss after the first epoch; training must
        // continue for exactly patience + 1 further epochs.
        let data = toy_linear_dataset(50);
        let (tr, va, te) = split(&data, 1).unwrap();
        let cfg = MlpConfig {
            learning_rate: 0.0,
            max_epochs: 100,
            patience: 3,
            batch_size: 16,
            seed: 5,
            ..MlpConfig::default()
        };
        let (_, report) = train(&tr, &va, &te, &cfg).unwrap();
        assert!(report.stopped_early);
        assert_eq!(report.epochs_run, 1 + 3 + 1);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let data = toy_linear_dataset(200);
        let (tr, va, te) = split(&data, 7).unwrap();
        let cfg = MlpConfig {
            max_epochs: 40,
            batch_size: 32,
            seed: 11,
            ..MlpConfig::default()
        };
        let (p1, r1) = train(&tr, &va, &te, &cfg).unwrap();
        let (p2, r2) = train(&tr, &va, &te, &cfg).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(r1.epochs_run, r2.epochs_run);
        assert_eq!(r1.train, r2.train);
        assert_eq!(r1.validation, r2.validation);
        assert_eq!(r1.test, r2.test);
        assert_eq!(r1.best_val_loss, r2.best_val_loss);
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let data = toy_linear_dataset(100);
        let (tr, va, te) = split(&data, 3).unwrap();
        let cfg = MlpConfig {
            learning_rate: 1e160,
            max_epochs: 50,
            batch_size: 16,
            seed: 1,
            ..MlpConfig::default()
        };
        match train(&tr, &va, &te, &cfg) {
            Err(Error::TrainingDiverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn metrics_identities() {
        let data = toy_linear_dataset(64);
        // Perfect predictor built by hand: y = 3x as a two-ReLU pair.
        let mut p = MlpParams::random(&[1, 2, 1], 0).unwrap();
        p.layers[0].w = vec![1.0, -1.0];
        p.layers[0].b = vec![0.0, 0.0];
        p.layers[1].w = vec![3.0, -3.0];
        p.layers[1].b = vec![0.0];
        let m = evaluate(&p, &data).unwrap();
        assert!(m.mae < 1e-12 && m.mse < 1e-12 && m.rmse < 1e-12);
        // Constant offset c: MAE = c, MSE = c^2, RMSE = c.
        p.layers[1].b = vec![0.5];
        let m = evaluate(&p, &data).unwrap();
        assert!((m.mae - 0.5).abs() < 1e-12);
        assert!((m.mse - 0.25).abs() < 1e-12);
        assert!((m.rmse - 0.5).abs() < 1e-12);
        assert!((m.rmse * m.rmse - m.mse).abs() <= 1e-12 * m.mse.max(1.0));
    }

    #[test]
    fn mae_never_exceeds_rmse() {
        // Jensen: for any prediction vector, MAE <= RMSE.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let rows = 50;
            let data = Dataset {
                width: 1,
                features: (0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                targets: (0..rows).map(|_| rng.gen_range(-5.0..5.0)).collect(),
                attacked: Vec::new(),
                provenance: Provenance {
                    seed: 0,
                    n_dg: 0,
                    snr_db: None,
                    attack_fraction: 0.0,
                    rows,
                    generator: "test".into(),
                },
            };
            let p = MlpParams::random(&[1, 4, 1], rng.gen()).unwrap();
            let m = evaluate(&p, &data).unwrap();
            assert!(m.mae <= m.rmse + 1e-12);
        }
    }

    #[test]
    fn model_json_round_trip() {
        let p = MlpParams::random(&[13, 10, 10, 10, 1], 21).unwrap();
        let mut buf = Vec::new();
        p.write_json(&mut buf).unwrap();
        let back = MlpParams::read_json(&buf[..]).unwrap();
        assert_eq!(back, p);
    }
}
