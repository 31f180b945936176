//! Dataset generation, SNR-controlled noise infusion and splitting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{featurize, feature_width};
use crate::comm::{route, AttackKind, AttackSpec, ChannelBias, ReceivedMatrix, TreeSet, Waveform};
use crate::control::{compute_tpr, consensus_rates, ControllerGains};
use crate::error::{Error, Result};
use crate::grid::DroopParams;

/// Supervised rows: features are routed measurements, targets the analytic
/// fused abnormality.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Feature count per row (`3n²+1`).
    pub width: usize,
    /// Row-major feature storage, `rows() * width` long.
    pub features: Vec<f64>,
    pub targets: Vec<f64>,
    /// Per-row attack flag; empty when unknown (e.g. CSV import).
    pub attacked: Vec<bool>,
    pub provenance: Provenance,
}

/// Where a dataset came from; written as a JSON sidecar next to the CSV.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub n_dg: usize,
    /// `None` means no noise was applied (infinite SNR).
    pub snr_db: Option<f64>,
    /// Fraction of rows carrying an active attack.
    pub attack_fraction: f64,
    pub rows: usize,
    pub generator: String,
}

impl Dataset {
    pub fn rows(&self) -> usize {
        self.targets.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.width..(i + 1) * self.width]
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// CSV with header `f0,...,f_{width-1},target`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        let mut header = String::new();
        for j in 0..self.width {
            header.push_str(&format!("f{j},"));
        }
        header.push_str("target");
        writeln!(w, "{header}")?;
        for i in 0..self.rows() {
            let mut line = String::new();
            for v in self.row(i) {
                line.push_str(&format!("{v},"));
            }
            line.push_str(&format!("{}", self.targets[i]));
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: std::io::BufRead>(r: R) -> Result<Dataset> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Data("empty dataset file".into()))??;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.last() != Some(&"target") || cols.len() < 2 {
            return Err(Error::Parse(format!(
                "dataset header must end in 'target', got '{header}'"
            )));
        }
        let width = cols.len() - 1;
        let mut features = Vec::new();
        let mut targets = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut vals = Vec::with_capacity(width + 1);
            for field in line.split(',') {
                let v: f64 = field.parse().map_err(|_| {
                    Error::Parse(format!("bad number '{field}' at data line {}", lineno + 1))
                })?;
                vals.push(v);
            }
            if vals.len() != width + 1 {
                return Err(Error::Parse(format!(
                    "row {} has {} fields, expected {}",
                    lineno + 1,
                    vals.len(),
                    width + 1
                )));
            }
            targets.push(vals.pop().unwrap());
            features.extend(vals);
        }
        let n_dg = super::dg_count_for_width(width).unwrap_or(0);
        let rows = targets.len();
        Ok(Dataset {
            width,
            features,
            targets,
            attacked: Vec::new(),
            provenance: Provenance {
                seed: 0,
                n_dg,
                snr_db: None,
                attack_fraction: f64::NAN,
                rows,
                generator: "csv-import".into(),
            },
        })
    }
}

/// Signal-to-noise specification for synthetic measurement noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    /// SNR in decibels; `f64::INFINITY` disables noise.
    pub snr_db: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if self.snr_db.is_infinite() && self.snr_db > 0.0 {
            return Ok(());
        }
        if self.snr_db.is_finite() && self.snr_db > 0.0 {
            return Ok(());
        }
        Err(Error::Config(format!(
            "snr_db must be positive or infinite, got {}",
            self.snr_db
        )))
    }
}

/// Add zero-mean Gaussian noise to every feature column so that each column
/// meets the requested SNR; `P_noise = P_signal / 10^(snr_db/10)` with
/// `P_signal` the column mean square. Targets stay clean; all-zero columns
/// receive no noise.
pub fn add_noise(data: &Dataset, spec: &NoiseSpec) -> Result<Dataset> {
    spec.validate()?;
    if spec.snr_db.is_infinite() {
        return Ok(data.clone());
    }
    let rows = data.rows();
    let mut out = data.clone();
    if rows == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let ratio = 10f64.powf(spec.snr_db / 10.0);
    for col in 0..data.width {
        let p_signal = (0..rows)
            .map(|i| {
                let x = data.features[i * data.width + col];
                x * x
            })
            .sum::<f64>()
            / rows as f64;
        if p_signal == 0.0 {
            continue;
        }
        let std = (p_signal / ratio).sqrt();
        for i in 0..rows {
            let z: f64 = sample_standard_normal(&mut rng);
            out.features[i * data.width + col] += std * z;
        }
    }
    out.provenance.snr_db = Some(spec.snr_db);
    Ok(out)
}

fn sample_standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple and seedable.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Random disjoint 64/16/20 partition (two-phase 80/20 split), reproducible
/// by seed.
pub fn split(data: &Dataset, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let rows = data.rows();
    if rows < 10 {
        return Err(Error::Data(format!("need at least 10 rows to split, got {rows}")));
    }
    let mut idx: Vec<usize> = (0..rows).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..rows).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let n_trainval = (0.8 * rows as f64).floor() as usize;
    let n_train = (0.8 * n_trainval as f64).floor() as usize;
    let take = |slice: &[usize]| -> Dataset {
        let mut features = Vec::with_capacity(slice.len() * data.width);
        let mut targets = Vec::with_capacity(slice.len());
        let mut attacked = Vec::new();
        for &i in slice {
            features.extend_from_slice(data.row(i));
            targets.push(data.targets[i]);
            if !data.attacked.is_empty() {
                attacked.push(data.attacked[i]);
            }
        }
        let mut prov = data.provenance.clone();
        prov.rows = slice.len();
        Dataset {
            width: data.width,
            features,
            targets,
            attacked,
            provenance: prov,
        }
    };
    Ok((
        take(&idx[..n_train]),
        take(&idx[n_train..n_trainval]),
        take(&idx[n_trainval..]),
    ))
}

/// Attack magnitude ranges drawn by the sampler (absolute values; a shared
/// random sign is applied to all three channels).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerAttackRanges {
    pub omega: (f64, f64),
    pub p: (f64, f64),
    pub q: (f64, f64),
}

impl Default for SamplerAttackRanges {
    fn default() -> Self {
        SamplerAttackRanges {
            omega: (0.2, 1.0),
            p: (500.0, 5000.0),
            q: (200.0, 2000.0),
        }
    }
}

/// Randomized operating-point sampler: draws loads, a candidate tree and an
/// optional attack, then routes the synchronized (lightly jittered) steady
/// state through the communication layer.
#[derive(Debug, Clone)]
pub struct RowSampler {
    pub droop: Vec<DroopParams>,
    pub k1: f64,
    pub k2: f64,
    pub trees: TreeSet,
    pub base_loads_p: Vec<f64>,
    pub base_loads_q: Vec<f64>,
    /// Relative load spread (0.3 = ±30%).
    pub load_spread: f64,
    pub jitter_omega: f64,
    pub jitter_p: f64,
    pub jitter_q: f64,
    pub attack_probability: f64,
    pub attack: SamplerAttackRanges,
    pub omega_ref: f64,
}

impl RowSampler {
    pub fn n(&self) -> usize {
        self.droop.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.base_loads_p.len() != n || self.base_loads_q.len() != n {
            return Err(Error::Config("sampler load arrays must match droop length".into()));
        }
        if self.trees.is_empty() {
            return Err(Error::Config("sampler needs a nonempty tree set".into()));
        }
        for t in &self.trees.trees {
            if t.n() != n {
                return Err(Error::Config("sampler tree size mismatch".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.attack_probability) {
            return Err(Error::Config("attack probability must be in [0,1]".into()));
        }
        Ok(())
    }

    /// One routed operating point: `(received, tree index, attacked)`.
    /// Used directly for threshold calibration, where the estimator needs
    /// the matrix and its tree rather than a flattened row.
    pub fn sample_received<R: Rng>(&self, rng: &mut R) -> Result<(ReceivedMatrix, usize, bool)> {
        let n = self.n();
        // Randomized loads around the base point.
        let mut loads_p = Vec::with_capacity(n);
        let mut loads_q = Vec::with_capacity(n);
        for l in 0..n {
            loads_p.push(self.base_loads_p[l] * (1.0 + rng.gen_range(-self.load_spread..=self.load_spread)));
            loads_q.push(self.base_loads_q[l] * (1.0 + rng.gen_range(-self.load_spread..=self.load_spread)));
        }
        // Synchronized steady state: uniform frequency, droop-weighted shares
        // equalized, total generation equal to total load.
        let inv_dp: f64 = self.droop.iter().map(|d| 1.0 / d.d_p).sum();
        let inv_dq: f64 = self.droop.iter().map(|d| 1.0 / d.d_q).sum();
        let c_p = loads_p.iter().sum::<f64>() / inv_dp;
        let c_q = loads_q.iter().sum::<f64>() / inv_dq;
        let mut omega = vec![self.omega_ref; n];
        let mut p: Vec<f64> = self.droop.iter().map(|d| c_p / d.d_p).collect();
        let mut q: Vec<f64> = self.droop.iter().map(|d| c_q / d.d_q).collect();
        for l in 0..n {
            omega[l] += self.jitter_omega * sample_standard_normal(rng);
            p[l] += self.jitter_p * sample_standard_normal(rng);
            q[l] += self.jitter_q * sample_standard_normal(rng);
        }
        let tree_idx = rng.gen_range(0..self.trees.len());
        let tree = &self.trees.trees[tree_idx];
        let attacked = rng.gen_bool(self.attack_probability);
        let mut attacks = Vec::new();
        if attacked {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let bias = ChannelBias {
                omega: sign * rng.gen_range(self.attack.omega.0..=self.attack.omega.1),
                p: sign * rng.gen_range(self.attack.p.0..=self.attack.p.1),
                q: sign * rng.gen_range(self.attack.q.0..=self.attack.q.1),
            };
            let kind = if rng.gen_bool(0.5) {
                // FDI on a node that actually sends under this tree.
                let senders: Vec<usize> = (0..n)
                    .filter(|&v| tree.edges.iter().any(|&(f, _)| f == v))
                    .collect();
                AttackKind::Fdi { node: senders[rng.gen_range(0..senders.len())] }
            } else {
                let (a, b) = tree.edges[rng.gen_range(0..tree.edges.len())];
                AttackKind::Mitm { link: (a.min(b), a.max(b)) }
            };
            attacks.push(AttackSpec {
                kind,
                start: 0.0,
                waveform: Waveform::Constant,
                bias,
            });
        }
        let rx = route(&omega, &p, &q, self.omega_ref, tree, &attacks, 0.0)?;
        Ok((rx, tree_idx, attacked))
    }

    /// One supervised row: `(features, target, attacked)`. The target is the
    /// analytic fused abnormality of the routed measurements.
    pub fn sample_row<R: Rng>(&self, rng: &mut R) -> Result<(Vec<f64>, f64, bool)> {
        let (rx, tree_idx, attacked) = self.sample_received(rng)?;
        let tree = &self.trees.trees[tree_idx];
        let gains = ControllerGains::pinned(self.k1, self.k2, self.n(), tree.root);
        let rates = consensus_rates(&rx, tree, &gains, &self.droop)?;
        Ok((featurize(&rx), compute_tpr(&rates), attacked))
    }
}

/// Draw `rows` supervised rows. Non-finite rows are skipped and counted; a
/// yield below 99% is an error rather than a silent truncation.
pub fn generate_dataset(sampler: &RowSampler, rows: usize, seed: u64) -> Result<Dataset> {
    sampler.validate()?;
    let n = sampler.n();
    let width = feature_width(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(rows * width);
    let mut targets = Vec::with_capacity(rows);
    let mut attacked_flags = Vec::with_capacity(rows);
    let mut attacked_rows = 0usize;
    let mut skipped = 0usize;
    let max_attempts = rows + rows / 50 + 10;
    let mut attempts = 0usize;
    while targets.len() < rows {
        if attempts >= max_attempts {
            return Err(Error::Data(format!(
                "row yield below 99%: {} skipped of {attempts} attempts",
                skipped
            )));
        }
        attempts += 1;
        let (f, t, attacked) = sampler.sample_row(&mut rng)?;
        if !t.is_finite() || f.iter().any(|x| !x.is_finite()) {
            skipped += 1;
            continue;
        }
        features.extend(f);
        targets.push(t);
        attacked_flags.push(attacked);
        if attacked {
            attacked_rows += 1;
        }
    }
    Ok(Dataset {
        width,
        features,
        targets,
        attacked: attacked_flags,
        provenance: Provenance {
            seed,
            n_dg: n,
            snr_db: None,
            attack_fraction: attacked_rows as f64 / rows as f64,
            rows,
            generator: format!("sampler-v1 (trees={}, skipped={skipped})", sampler.trees.len()),
        },
    })
}
