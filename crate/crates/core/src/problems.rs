//! Loss functions, datasets and stochastic gradient oracles.
//!
//! Every device `m` owns a dataset and an empirical loss `f_m`; the global
//! objective is their plain average. The convex kinds expose exact curvature
//! constants so that step-size conditions and convergence bounds can be
//! evaluated.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::controller::mlp::{Activation, Mlp};
use crate::error::{invalid, Error, Result};
use crate::sparsifier::{check_finite, norm_sq, GradientVector};

/// Row-major examples with one target per row.
///
/// Targets are real responses for least squares, `0/1` labels for logistic
/// regression and class indices for classification. The quadratic kind reads
/// each row as a center and ignores the target.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    width: usize,
    features: Vec<f64>,
    targets: Vec<f64>,
}

impl Dataset {
    pub fn new(width: usize, features: Vec<f64>, targets: Vec<f64>) -> Result<Self> {
        if width == 0 || features.len() != width * targets.len() {
            return Err(invalid(format!(
                "{} feature values do not form {} rows of width {width}",
                features.len(),
                targets.len()
            )));
        }
        check_finite(&features)?;
        check_finite(&targets)?;
        Ok(Self {
            width,
            features,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.width..(i + 1) * self.width]
    }

    pub fn target(&self, i: usize) -> f64 {
        self.targets[i]
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        let mut features = Vec::with_capacity(rows.len() * self.width);
        for &i in rows {
            features.extend_from_slice(self.row(i));
        }
        Self {
            width: self.width,
            features,
            targets: rows.iter().map(|&i| self.targets[i]).collect(),
        }
    }

    /// Reads `label,f0,f1,...` rows after a header line.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines();
        let header = lines.next().ok_or_else(|| invalid("empty dataset file"))??;
        let width = header.split(',').count().saturating_sub(1);
        let mut features = Vec::new();
        let mut targets = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| invalid(format!("row {}: {e}", n + 2)))?;
            if fields.len() != width + 1 {
                return Err(invalid(format!("row {} has {} fields, header has {}", n + 2, fields.len(), width + 1)));
            }
            targets.push(fields[0]);
            features.extend_from_slice(&fields[1..]);
        }
        Self::new(width, features, targets)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(File::create(path)?);
        let header: Vec<String> = std::iter::once("label".to_string())
            .chain((0..self.width).map(|j| format!("f{j}")))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for i in 0..self.len() {
            let row: Vec<String> = std::iter::once(self.targets[i])
                .chain(self.row(i).iter().copied())
                .map(|v| v.to_string())
                .collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LossKind {
    /// `0.5 * sum_j h_j (w_j - c_j)^2` per example, with centers `c` as rows.
    Quadratic { curvature: Vec<f64> },
    /// `0.5 * (a^T w - y)^2` per example.
    LeastSquares,
    /// `log(1 + exp(-s a^T w))` per example with `s = 2y - 1`.
    Logistic,
    /// One tanh hidden layer and softmax cross-entropy.
    Mlp { hidden: usize, classes: usize },
}

/// Smoothness and strong-convexity constants of the device losses:
/// `l` bounds every `f_m`'s gradient Lipschitz constant, `mu` every `f_m`'s
/// strong convexity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Curvature {
    pub l: f64,
    pub mu: f64,
}

impl Curvature {
    pub fn kappa(&self) -> f64 {
        self.l / self.mu
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimum {
    pub w: Vec<f64>,
    pub f: f64,
}

#[derive(Debug)]
pub struct Problem {
    kind: LossKind,
    lambda: f64,
    devices: Vec<Dataset>,
    dim: usize,
    net: Option<Mlp>,
    curvature: OnceLock<Option<Curvature>>,
    optimum: OnceLock<Option<Optimum>>,
}

impl Problem {
    pub fn new(kind: LossKind, lambda: f64, devices: Vec<Dataset>) -> Result<Self> {
        if devices.is_empty() {
            return Err(invalid("problem needs at least one device"));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(invalid(format!("regularizer must be non-negative, got {lambda}")));
        }
        let width = devices[0].width();
        if let Some(m) = devices.iter().position(|d| d.width() != width || d.is_empty()) {
            return Err(invalid(format!("device {m} dataset is empty or has a different width")));
        }
        let (dim, net) = match &kind {
            LossKind::Quadratic { curvature } => {
                if curvature.len() != width || curvature.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
                    return Err(invalid("quadratic curvature must be positive with one entry per coordinate"));
                }
                (width, None)
            }
            LossKind::LeastSquares => (width, None),
            LossKind::Logistic => {
                if devices.iter().flat_map(|d| d.targets()).any(|&y| y != 0.0 && y != 1.0) {
                    return Err(invalid("logistic labels must be 0 or 1"));
                }
                (width, None)
            }
            &LossKind::Mlp { hidden, classes } => {
                if classes < 2 || hidden == 0 {
                    return Err(invalid("classifier needs at least 2 classes and 1 hidden unit"));
                }
                if devices
                    .iter()
                    .flat_map(|d| d.targets())
                    .any(|&y| y < 0.0 || y.fract() != 0.0 || y as usize >= classes)
                {
                    return Err(invalid(format!("class labels must be integers in [0, {classes})")));
                }
                let mut rng = crate::seeding::stream(0, crate::seeding::Stream::Init, 0);
                let net = Mlp::random(&[width, hidden, classes], Activation::Tanh, Activation::Identity, &mut rng)?;
                (net.param_count(), Some(net))
            }
        };
        Ok(Self {
            kind,
            lambda,
            devices,
            dim,
            net,
            curvature: OnceLock::new(),
            optimum: OnceLock::new(),
        })
    }

    pub fn kind(&self) -> &LossKind {
        &self.kind
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn devices(&self) -> &[Dataset] {
        &self.devices
    }

    pub fn device_count(&self) -> usize {
        self.devices.len()
    }

    fn check_point(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.dim {
            return Err(invalid(format!("point has dimension {}, problem has {}", w.len(), self.dim)));
        }
        Ok(())
    }

    pub fn dataset(&self, m: usize) -> Result<&Dataset> {
        self.devices
            .get(m)
            .ok_or_else(|| invalid(format!("no device {m} (problem has {})", self.devices.len())))
    }

    fn network_at(&self, w: &[f64]) -> Mlp {
        let mut net = self.net.clone().expect("classifier problem holds a template network");
        net.set_params(w).expect("dimension checked by caller");
        net
    }

    /// Adds the gradient of the unregularized loss over `rows` of device `m`
    /// (summed, not averaged) into `grad` and returns the summed loss.
    fn accumulate(&self, data: &Dataset, rows: impl Iterator<Item = usize>, w: &[f64], grad: &mut [f64]) -> f64 {
        let mut loss = 0.0;
        match &self.kind {
            LossKind::Quadratic { curvature } => {
                for i in rows {
                    for ((g, (&wj, &cj)), &h) in grad.iter_mut().zip(w.iter().zip(data.row(i))).zip(curvature) {
                        let r = wj - cj;
                        loss += 0.5 * h * r * r;
                        *g += h * r;
                    }
                }
            }
            LossKind::LeastSquares => {
                for i in rows {
                    let a = data.row(i);
                    let r = dot(a, w) - data.target(i);
                    loss += 0.5 * r * r;
                    axpy(r, a, grad);
                }
            }
            LossKind::Logistic => {
                for i in rows {
                    let a = data.row(i);
                    let s = 2.0 * data.target(i) - 1.0;
                    let margin = s * dot(a, w);
                    loss += softplus(-margin);
                    axpy(-s * sigmoid(-margin), a, grad);
                }
            }
            LossKind::Mlp { .. } => {
                let net = self.network_at(w);
                let mut acc = net.zero_grads();
                for i in rows {
                    let trace = net.forward_trace(data.row(i)).expect("width checked at construction");
                    let (l, g_out) = softmax_xent(trace.output(), data.target(i) as usize);
                    loss += l;
                    net.backward_into(&trace, &g_out, &mut acc).expect("shapes match");
                }
                for (g, a) in grad.iter_mut().zip(&acc.0) {
                    *g += a;
                }
            }
        }
        loss
    }

    fn finish(&self, w: &[f64], count: usize, sum_loss: f64, grad: &mut [f64]) -> f64 {
        let inv = 1.0 / count as f64;
        for (g, &wj) in grad.iter_mut().zip(w) {
            *g = *g * inv + self.lambda * wj;
        }
        sum_loss * inv + 0.5 * self.lambda * norm_sq(w)
    }

    /// Loss and exact gradient of `f_m` at `w`.
    pub fn device_loss_grad(&self, m: usize, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_point(w)?;
        let data = self.dataset(m)?;
        let mut grad = vec![0.0; self.dim];
        let sum = self.accumulate(data, 0..data.len(), w, &mut grad);
        let loss = self.finish(w, data.len(), sum, &mut grad);
        Ok((loss, grad))
    }

    pub fn device_loss(&self, m: usize, w: &[f64]) -> Result<f64> {
        self.check_point(w)?;
        let data = self.dataset(m)?;
        let sum = match &self.kind {
            LossKind::Mlp { .. } => {
                let net = self.network_at(w);
                (0..data.len())
                    .map(|i| softmax_xent(&net.forward(data.row(i)).unwrap(), data.target(i) as usize).0)
                    .sum()
            }
            _ => {
                let mut scratch = vec![0.0; self.dim];
                self.accumulate(data, 0..data.len(), w, &mut scratch)
            }
        };
        Ok(sum / data.len() as f64 + 0.5 * self.lambda * norm_sq(w))
    }

    pub fn full_gradient(&self, m: usize, w: &[f64]) -> Result<GradientVector> {
        GradientVector::new(self.device_loss_grad(m, w)?.1)
    }

    /// Gradient of `f_m` restricted to `rows` (averaged, regularizer included).
    pub fn batch_gradient(&self, m: usize, w: &[f64], rows: &[usize]) -> Result<Vec<f64>> {
        self.check_point(w)?;
        let data = self.dataset(m)?;
        if rows.is_empty() || rows.iter().any(|&i| i >= data.len()) {
            return Err(invalid("batch rows must be non-empty and in range"));
        }
        let mut grad = vec![0.0; self.dim];
        let sum = self.accumulate(data, rows.iter().copied(), w, &mut grad);
        self.finish(w, rows.len(), sum, &mut grad);
        Ok(grad)
    }

    /// Global objective: the average of the device losses.
    pub fn loss(&self, w: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for m in 0..self.devices.len() {
            total += self.device_loss(m, w)?;
        }
        Ok(total / self.devices.len() as f64)
    }

    pub fn gradient(&self, w: &[f64]) -> Result<Vec<f64>> {
        let mut total = vec![0.0; self.dim];
        for m in 0..self.devices.len() {
            let (_, g) = self.device_loss_grad(m, w)?;
            total.iter_mut().zip(&g).for_each(|(t, v)| *t += v);
        }
        let inv = 1.0 / self.devices.len() as f64;
        total.iter_mut().for_each(|t| *t *= inv);
        Ok(total)
    }

    /// Fraction of correctly classified examples over all devices, for the
    /// classification kinds.
    pub fn accuracy(&self, w: &[f64]) -> Result<Option<f64>> {
        self.check_point(w)?;
        let predict: Box<dyn Fn(&[f64]) -> usize> = match &self.kind {
            LossKind::Logistic => Box::new(|a: &[f64]| usize::from(dot(a, w) > 0.0)),
            LossKind::Mlp { .. } => {
                let net = self.network_at(w);
                Box::new(move |a: &[f64]| argmax(&net.forward(a).unwrap()))
            }
            _ => return Ok(None),
        };
        let (mut hits, mut total) = (0usize, 0usize);
        for data in &self.devices {
            for i in 0..data.len() {
                hits += usize::from(predict(data.row(i)) == data.target(i) as usize);
                total += 1;
            }
        }
        Ok(Some(hits as f64 / total as f64))
    }

    /// Starting iterate: zero for the convex kinds, a small seeded network
    /// for the classifier.
    pub fn initial_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match &self.kind {
            &LossKind::Mlp { hidden, classes } => {
                Mlp::random(&[self.devices[0].width(), hidden, classes], Activation::Tanh, Activation::Identity, rng)
                    .expect("validated at construction")
                    .params()
            }
            _ => vec![0.0; self.dim],
        }
    }

    /// Exact `L` and `mu` over all devices; `None` for the classifier.
    pub fn curvature(&self) -> Option<Curvature> {
        *self.curvature.get_or_init(|| self.compute_curvature())
    }

    fn compute_curvature(&self) -> Option<Curvature> {
        let lambda = self.lambda;
        match &self.kind {
            LossKind::Quadratic { curvature } => {
                let hi = curvature.iter().copied().fold(f64::MIN, f64::max);
                let lo = curvature.iter().copied().fold(f64::MAX, f64::min);
                Some(Curvature {
                    l: hi + lambda,
                    mu: lo + lambda,
                })
            }
            LossKind::LeastSquares => {
                let (mut l, mut mu) = (f64::MIN, f64::MAX);
                for data in &self.devices {
                    let (lo, hi) = symmetric_extremes(&gram(data));
                    l = l.max(hi + lambda);
                    mu = mu.min(lo.max(0.0) + lambda);
                }
                Some(Curvature { l, mu })
            }
            LossKind::Logistic => {
                let l = self
                    .devices
                    .iter()
                    .map(|d| symmetric_extremes(&gram(d)).1 / 4.0 + lambda)
                    .fold(f64::MIN, f64::max);
                Some(Curvature { l, mu: lambda })
            }
            LossKind::Mlp { .. } => None,
        }
    }

    /// Minimizer of the global objective: closed form for the quadratic kinds,
    /// a deterministic full-gradient solver for logistic regression.
    pub fn optimum(&self) -> Option<&Optimum> {
        self.optimum.get_or_init(|| self.compute_optimum()).as_ref()
    }

    fn compute_optimum(&self) -> Option<Optimum> {
        let m = self.devices.len() as f64;
        let w = match &self.kind {
            LossKind::Quadratic { curvature } => {
                // Per coordinate: minimize mean_m mean_i h_j (w_j - c_ij)^2 / 2 + lambda w_j^2 / 2.
                let mut mean_center = vec![0.0; self.dim];
                for data in &self.devices {
                    let inv = 1.0 / (data.len() as f64 * m);
                    for i in 0..data.len() {
                        axpy(inv, data.row(i), &mut mean_center);
                    }
                }
                curvature
                    .iter()
                    .zip(&mean_center)
                    .map(|(h, c)| h * c / (h + self.lambda))
                    .collect()
            }
            LossKind::LeastSquares => {
                let mut hess = DMatrix::<f64>::identity(self.dim, self.dim) * self.lambda;
                let mut rhs = DVector::<f64>::zeros(self.dim);
                for data in &self.devices {
                    let a = DMatrix::from_row_slice(data.len(), self.dim, &data.features);
                    let y = DVector::from_column_slice(data.targets());
                    let scale = 1.0 / (data.len() as f64 * m);
                    hess += a.transpose() * &a * scale;
                    rhs += a.transpose() * y * scale;
                }
                let chol = hess.cholesky()?;
                chol.solve(&rhs).as_slice().to_vec()
            }
            LossKind::Logistic => self.solve_logistic().ok()?,
            LossKind::Mlp { .. } => return None,
        };
        let f = self.loss(&w).ok()?;
        Some(Optimum { w, f })
    }

    /// Gradient descent with step `1/L` until the gradient norm is <= 1e-10.
    fn solve_logistic(&self) -> Result<Vec<f64>> {
        let curv = self.curvature().expect("logistic has curvature");
        if curv.mu <= 0.0 {
            return Err(Error::Precondition("logistic optimum needs lambda > 0".into()));
        }
        let step = 1.0 / curv.l;
        let mut w = vec![0.0; self.dim];
        for _ in 0..1_000_000 {
            let g = self.gradient(&w)?;
            if norm_sq(&g).sqrt() <= 1e-10 {
                return Ok(w);
            }
            axpy(-step, &g, &mut w);
        }
        Err(Error::Precondition("logistic solver did not reach gradient norm 1e-10".into()))
    }
}

/// `A^T A / n` for a device's feature matrix.
pub fn gram(data: &Dataset) -> DMatrix<f64> {
    let a = DMatrix::from_row_slice(data.len(), data.width(), &data.features);
    a.transpose() * &a / data.len() as f64
}

/// Smallest and largest eigenvalue of a symmetric matrix by dense
/// decomposition.
pub fn symmetric_extremes(matrix: &DMatrix<f64>) -> (f64, f64) {
    let eig = matrix.clone().symmetric_eigen();
    let lo = eig.eigenvalues.iter().copied().fold(f64::MAX, f64::min);
    let hi = eig.eigenvalues.iter().copied().fold(f64::MIN, f64::max);
    (lo, hi)
}

/// Largest eigenvalue of a symmetric positive semidefinite operator by power
/// iteration, stopping when the Rayleigh quotient changes by less than `tol`
/// relative.
pub fn power_iteration<R: Rng + ?Sized>(
    dim: usize,
    apply: impl Fn(&[f64]) -> Vec<f64>,
    max_iters: usize,
    tol: f64,
    rng: &mut R,
) -> f64 {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let mut estimate = 0.0;
    for _ in 0..max_iters {
        let n = norm_sq(&v).sqrt();
        if n == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= n);
        let av = apply(&v);
        let next = dot(&v, &av);
        let done = (next - estimate).abs() <= tol * next.abs();
        estimate = next;
        v = av;
        if done {
            break;
        }
    }
    estimate
}

/// Draws uniform mini-batches without replacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MinibatchOracle {
    pub batch: usize,
}

impl MinibatchOracle {
    pub fn new(batch: usize) -> Result<Self> {
        if batch == 0 {
            return Err(invalid("batch size must be positive"));
        }
        Ok(Self { batch })
    }

    pub fn sample_rows<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.batch > size {
            return Err(invalid(format!("batch {} exceeds dataset size {size}", self.batch)));
        }
        let mut rows = index::sample(rng, size, self.batch).into_vec();
        rows.sort_unstable();
        Ok(rows)
    }

    pub fn gradient<R: Rng + ?Sized>(&self, problem: &Problem, m: usize, w: &[f64], rng: &mut R) -> Result<GradientVector> {
        let size = problem.dataset(m)?.len();
        let rows = self.sample_rows(size, rng)?;
        GradientVector::new(problem.batch_gradient(m, w, &rows)?)
    }
}

/// Empirical constants of the gradient-noise assumptions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionConstants {
    pub curvature: Option<Curvature>,
    /// Per device: largest mean squared deviation of a batch gradient from
    /// the full gradient over the probed iterates.
    pub sigma2: Vec<f64>,
    /// Largest mean squared batch-gradient norm over devices and iterates.
    pub g2: f64,
}

impl AssumptionConstants {
    pub fn sigma2_max(&self) -> f64 {
        self.sigma2.iter().copied().fold(0.0, f64::max)
    }
}

/// Estimates `(L, mu, sigma^2, G^2)` by drawing `samples` batches at each
/// probe iterate (typically points recorded along a trajectory).
pub fn estimate_constants<R: Rng + ?Sized>(
    problem: &Problem,
    oracle: MinibatchOracle,
    iterates: &[Vec<f64>],
    samples: usize,
    rng: &mut R,
) -> Result<AssumptionConstants> {
    if samples == 0 || iterates.is_empty() {
        return Err(invalid("need at least one sample and one iterate"));
    }
    let mut sigma2 = vec![0.0f64; problem.device_count()];
    let mut g2 = 0.0f64;
    for (m, s2) in sigma2.iter_mut().enumerate() {
        let size = problem.dataset(m)?.len();
        for w in iterates {
            let (_, full) = problem.device_loss_grad(m, w)?;
            let (mut dev, mut sq) = (0.0, 0.0);
            for _ in 0..samples {
                let rows = oracle.sample_rows(size, rng)?;
                let g = problem.batch_gradient(m, w, &rows)?;
                sq += norm_sq(&g);
                dev += g.iter().zip(&full).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
            *s2 = s2.max(dev / samples as f64);
            g2 = g2.max(sq / samples as f64);
        }
    }
    Ok(AssumptionConstants {
        curvature: problem.curvature(),
        sigma2,
        g2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum PartitionMode {
    Iid,
    /// Each device draws a fraction `rho` of its rows from one dominant label.
    LabelSkew { rho: f64 },
}

/// Splits `data` into `devices` disjoint parts covering every row.
pub fn partition_data<R: Rng + ?Sized>(data: &Dataset, devices: usize, mode: PartitionMode, rng: &mut R) -> Result<Vec<Dataset>> {
    if devices == 0 {
        return Err(invalid("need at least one device"));
    }
    let n = data.len();
    if n < devices {
        return Err(invalid(format!("{n} rows cannot cover {devices} devices")));
    }
    let sizes: Vec<usize> = (0..devices).map(|m| n / devices + usize::from(m < n % devices)).collect();
    let parts: Vec<Vec<usize>> = match mode {
        PartitionMode::Iid => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            let mut start = 0;
            sizes
                .iter()
                .map(|&s| {
                    let part = order[start..start + s].to_vec();
                    start += s;
                    part
                })
                .collect()
        }
        PartitionMode::LabelSkew { rho } => {
            if !(0.0..=1.0).contains(&rho) {
                return Err(invalid(format!("skew fraction must lie in [0, 1], got {rho}")));
            }
            let mut labels: Vec<i64> = data.targets().iter().map(|&y| y as i64).collect();
            labels.sort_unstable();
            labels.dedup();
            let mut pools: Vec<Vec<usize>> = labels
                .iter()
                .map(|&l| (0..n).filter(|&i| data.target(i) as i64 == l).collect())
                .collect();
            pools.iter_mut().for_each(|p| p.shuffle(rng));
            let mut parts: Vec<Vec<usize>> = sizes
                .iter()
                .enumerate()
                .map(|(m, &s)| {
                    let pool = &mut pools[m % labels.len()];
                    let take = ((rho * s as f64).round() as usize).min(pool.len());
                    pool.split_off(pool.len() - take)
                })
                .collect();
            let mut rest: Vec<usize> = pools.into_iter().flatten().collect();
            rest.shuffle(rng);
            for (part, &s) in parts.iter_mut().zip(&sizes) {
                let need = s - part.len();
                part.extend(rest.drain(..need));
            }
            parts
        }
    };
    Ok(parts
        .into_iter()
        .map(|mut rows| {
            rows.sort_unstable();
            data.subset(&rows)
        })
        .collect())
}

/// Gaussian blobs: class `c` is centered at a random point with norm
/// `separation`, rows add unit noise.
pub fn gaussian_blobs<R: Rng + ?Sized>(classes: usize, width: usize, rows: usize, separation: f64, rng: &mut R) -> Result<Dataset> {
    if classes < 2 || width == 0 || rows == 0 {
        return Err(invalid("blobs need at least 2 classes, 1 feature and 1 row"));
    }
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..width).map(|_| rng.sample(StandardNormal)).collect();
            let n = norm_sq(&v).sqrt().max(1e-12);
            v.into_iter().map(|x| x * separation / n).collect()
        })
        .collect();
    let mut features = Vec::with_capacity(rows * width);
    let mut targets = Vec::with_capacity(rows);
    for i in 0..rows {
        let c = i % classes;
        features.extend(centers[c].iter().map(|&mu| mu + rng.sample::<f64, _>(StandardNormal)));
        targets.push(c as f64);
    }
    Dataset::new(width, features, targets)
}

/// Settings for the synthetic convex problems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub devices: usize,
    pub rows_per_device: usize,
    pub lambda: f64,
    /// Spread of the centers (quadratic) or the response noise (least squares).
    pub noise: f64,
    /// Spread of per-device offsets, making device optima differ.
    pub heterogeneity: f64,
    /// Quadratic curvature range `[mu, L]`, log-spaced across coordinates.
    pub curvature: [f64; 2],
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dim: 100,
            devices: 3,
            rows_per_device: 200,
            lambda: 0.0,
            noise: 1.0,
            heterogeneity: 0.5,
            curvature: [1.0, 4.0],
        }
    }
}

fn gaussian_vec<R: Rng + ?Sized>(len: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..len).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Quadratic with log-spaced diagonal curvature; every device draws its
/// centers around a shared optimum plus a device offset.
pub fn synthetic_quadratic<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<Problem> {
    let [lo, hi] = spec.curvature;
    if !(lo > 0.0 && hi >= lo) {
        return Err(invalid("curvature range must satisfy 0 < mu <= L"));
    }
    let d = spec.dim;
    let curvature: Vec<f64> = (0..d)
        .map(|j| {
            let frac = if d > 1 { j as f64 / (d - 1) as f64 } else { 0.0 };
            lo * (hi / lo).powf(frac)
        })
        .collect();
    let shared = gaussian_vec(d, 1.0, rng);
    let devices = (0..spec.devices)
        .map(|_| {
            let offset = gaussian_vec(d, spec.heterogeneity, rng);
            let mut features = Vec::with_capacity(d * spec.rows_per_device);
            for _ in 0..spec.rows_per_device {
                features.extend(shared.iter().zip(&offset).map(|(s, o)| s + o + spec.noise * rng.sample::<f64, _>(StandardNormal)));
            }
            Dataset::new(d, features, vec![0.0; spec.rows_per_device])
        })
        .collect::<Result<Vec<_>>>()?;
    Problem::new(LossKind::Quadratic { curvature }, spec.lambda, devices)
}

/// Linear regression with Gaussian features and a planted model.
pub fn synthetic_least_squares<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<Problem> {
    let d = spec.dim;
    let truth = gaussian_vec(d, 1.0, rng);
    let devices = (0..spec.devices)
        .map(|_| {
            let model: Vec<f64> = truth.iter().zip(gaussian_vec(d, spec.heterogeneity, rng)).map(|(a, b)| a + b).collect();
            let features = gaussian_vec(d * spec.rows_per_device, 1.0, rng);
            let targets = features
                .chunks_exact(d)
                .map(|a| dot(a, &model) + spec.noise * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Dataset::new(d, features, targets)
        })
        .collect::<Result<Vec<_>>>()?;
    Problem::new(LossKind::LeastSquares, spec.lambda, devices)
}

/// Logistic regression with labels drawn from a planted linear model.
pub fn synthetic_logistic<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<Problem> {
    if spec.lambda <= 0.0 {
        return Err(invalid("regularized logistic regression needs lambda > 0"));
    }
    let d = spec.dim;
    let truth = gaussian_vec(d, 1.0 / (d as f64).sqrt(), rng);
    let devices = (0..spec.devices)
        .map(|_| {
            let model: Vec<f64> = truth
                .iter()
                .zip(gaussian_vec(d, spec.heterogeneity / (d as f64).sqrt(), rng))
                .map(|(a, b)| a + b)
                .collect();
            let features = gaussian_vec(d * spec.rows_per_device, 1.0, rng);
            let targets = features
                .chunks_exact(d)
                .map(|a| {
                    let p = sigmoid(dot(a, &model) * 4.0);
                    f64::from(u8::from(rng.gen::<f64>() < p))
                })
                .collect();
            Dataset::new(d, features, targets)
        })
        .collect::<Result<Vec<_>>>()?;
    Problem::new(LossKind::Logistic, spec.lambda, devices)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::MIN), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Cross-entropy of softmax(logits) against `label`, with its gradient.
fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::MIN, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() + max - logits[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / total).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::{stream, Stream};

    fn rng(seed: u64) -> crate::seeding::Rng {
        stream(seed, Stream::Data, 0)
    }

    /// `f = 0.5 * ||w - c||^2` on one device with a single center row.
    fn shifted_sphere(c: &[f64]) -> Problem {
        let data = Dataset::new(c.len(), c.to_vec(), vec![0.0]).unwrap();
        Problem::new(LossKind::Quadratic { curvature: vec![1.0; c.len()] }, 0.0, vec![data]).unwrap()
    }

    fn central_difference(f: impl Fn(&[f64]) -> f64, w: &[f64], j: usize, h: f64) -> f64 {
        let mut p = w.to_vec();
        p[j] += h;
        let mut q = w.to_vec();
        q[j] -= h;
        (f(&p) - f(&q)) / (2.0 * h)
    }

    #[test]
    fn sphere_gradients() {
        let c = [0.5, -2.0, 3.0];
        let p = shifted_sphere(&c);
        assert_eq!(&*p.full_gradient(0, &c).unwrap(), &[0.0, 0.0, 0.0]);
        let p = shifted_sphere(&[0.0, 0.0]);
        assert_eq!(&*p.full_gradient(0, &[2.0, -1.0]).unwrap(), &[2.0, -1.0]);
    }

    fn check_fd(p: &Problem, points: usize, seed: u64) {
        let mut r = rng(seed);
        for _ in 0..points {
            let w: Vec<f64> = gaussian_vec(p.dim(), 0.5, &mut r);
            let m = r.gen_range(0..p.device_count());
            let g = p.full_gradient(m, &w).unwrap();
            for j in 0..p.dim() {
                let fd = central_difference(|x| p.device_loss(m, x).unwrap(), &w, j, 1e-5);
                let rel = (g[j] - fd).abs() / g[j].abs().max(fd.abs()).max(1e-6);
                assert!(rel <= 1e-5, "coord {j}: analytic {} vs fd {fd}", g[j]);
            }
        }
    }

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            dim: 6,
            devices: 2,
            rows_per_device: 30,
            lambda: 0.1,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng(1);
        check_fd(&synthetic_quadratic(&small_spec(), &mut r).unwrap(), 100, 2);
        check_fd(&synthetic_least_squares(&small_spec(), &mut r).unwrap(), 100, 3);
        check_fd(&synthetic_logistic(&small_spec(), &mut r).unwrap(), 100, 4);
        let blobs = gaussian_blobs(3, 4, 30, 3.0, &mut r).unwrap();
        let parts = partition_data(&blobs, 2, PartitionMode::Iid, &mut r).unwrap();
        check_fd(&Problem::new(LossKind::Mlp { hidden: 5, classes: 3 }, 0.01, parts).unwrap(), 100, 5);
    }

    #[test]
    fn full_batch_equals_full_gradient() {
        let mut r = rng(7);
        let p = synthetic_least_squares(&small_spec(), &mut r).unwrap();
        let w = gaussian_vec(6, 1.0, &mut r);
        let oracle = MinibatchOracle::new(30).unwrap();
        assert_eq!(oracle.gradient(&p, 1, &w, &mut r).unwrap(), p.full_gradient(1, &w).unwrap());
    }

    #[test]
    fn single_row_batches_average_to_full_gradient() {
        let mut r = rng(8);
        let spec = SyntheticSpec {
            rows_per_device: 3,
            ..small_spec()
        };
        let p = synthetic_logistic(&spec, &mut r).unwrap();
        let w = gaussian_vec(6, 1.0, &mut r);
        let mut mean = vec![0.0; 6];
        for i in 0..3 {
            axpy(1.0 / 3.0, &p.batch_gradient(0, &w, &[i]).unwrap(), &mut mean);
        }
        let full = p.full_gradient(0, &w).unwrap();
        for (a, b) in mean.iter().zip(full.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let mut r = rng(9);
        let p = synthetic_quadratic(&small_spec(), &mut r).unwrap();
        let w = vec![0.3; 6];
        let oracle = MinibatchOracle::new(4).unwrap();
        let a = oracle.gradient(&p, 0, &w, &mut rng(42)).unwrap();
        let b = oracle.gradient(&p, 0, &w, &mut rng(42)).unwrap();
        assert_eq!(a, b);
        assert!(MinibatchOracle::new(31).unwrap().gradient(&p, 0, &w, &mut r).is_err());
    }

    #[test]
    fn constants_of_the_unit_sphere() {
        let data = Dataset::new(2, vec![0.0, 0.0, 0.0, 0.0], vec![0.0, 0.0]).unwrap();
        let p = Problem::new(LossKind::Quadratic { curvature: vec![1.0, 1.0] }, 0.0, vec![data]).unwrap();
        let c = estimate_constants(&p, MinibatchOracle::new(2).unwrap(), &[vec![1.0, 2.0]], 5, &mut rng(0)).unwrap();
        assert_eq!(c.curvature, Some(Curvature { l: 1.0, mu: 1.0 }));
        assert_eq!(c.sigma2, vec![0.0]);
        assert_eq!(c.g2, 5.0);
    }

    #[test]
    fn logistic_strong_convexity_is_lambda() {
        let p = synthetic_logistic(&small_spec(), &mut rng(10)).unwrap();
        assert_eq!(p.curvature().unwrap().mu, 0.1);
    }

    #[test]
    fn least_squares_smoothness_agrees_with_power_iteration() {
        let spec = SyntheticSpec {
            dim: 12,
            rows_per_device: 40,
            ..small_spec()
        };
        let p = synthetic_least_squares(&spec, &mut rng(11)).unwrap();
        let mut l_power = f64::MIN;
        for data in p.devices() {
            let g = gram(data);
            let apply = |v: &[f64]| (&g * DVector::from_column_slice(v)).as_slice().to_vec();
            l_power = l_power.max(power_iteration(12, apply, 20_000, 1e-14, &mut rng(12)) + 0.1);
        }
        let l = p.curvature().unwrap().l;
        assert!((l - l_power).abs() <= 1e-8 * l, "dense {l} vs power {l_power}");
    }

    #[test]
    fn curvature_witnesses_hold_on_random_pairs() {
        let mut r = rng(13);
        for p in [
            synthetic_quadratic(&small_spec(), &mut r).unwrap(),
            synthetic_least_squares(&small_spec(), &mut r).unwrap(),
            synthetic_logistic(&small_spec(), &mut r).unwrap(),
        ] {
            let Curvature { l, mu } = p.curvature().unwrap();
            for _ in 0..50 {
                let m = r.gen_range(0..p.device_count());
                let w = gaussian_vec(6, 1.0, &mut r);
                let v = gaussian_vec(6, 1.0, &mut r);
                let (fw, gw) = p.device_loss_grad(m, &w).unwrap();
                let (fv, gv) = p.device_loss_grad(m, &v).unwrap();
                let diff: Vec<f64> = v.iter().zip(&w).map(|(a, b)| a - b).collect();
                let lower = fw + dot(&gw, &diff) + 0.5 * mu * norm_sq(&diff);
                assert!(fv >= lower - 1e-10 * fv.abs().max(1.0));
                let gdiff: Vec<f64> = gv.iter().zip(&gw).map(|(a, b)| a - b).collect();
                assert!(norm_sq(&gdiff).sqrt() <= l * norm_sq(&diff).sqrt() * (1.0 + 1e-10));
            }
        }
    }

    #[test]
    fn optimum_zeroes_the_gradient() {
        let mut r = rng(14);
        for p in [
            synthetic_quadratic(&small_spec(), &mut r).unwrap(),
            synthetic_least_squares(&small_spec(), &mut r).unwrap(),
            synthetic_logistic(&small_spec(), &mut r).unwrap(),
        ] {
            let opt = p.optimum().unwrap();
            assert!(norm_sq(&p.gradient(&opt.w).unwrap()).sqrt() <= 1e-8);
            assert!(p.loss(&vec![0.5; 6]).unwrap() >= opt.f);
        }
    }

    #[test]
    fn iid_partition_splits_evenly() {
        let data = Dataset::new(1, (0..100).map(f64::from).collect(), vec![0.0; 100]).unwrap();
        let parts = partition_data(&data, 2, PartitionMode::Iid, &mut rng(15)).unwrap();
        assert_eq!(parts.iter().map(Dataset::len).collect::<Vec<_>>(), vec![50, 50]);
        let mut all: Vec<f64> = parts.iter().flat_map(|p| (0..p.len()).map(|i| p.row(i)[0])).collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..100).map(f64::from).collect::<Vec<_>>());
        assert!(partition_data(&data.subset(&[0]), 2, PartitionMode::Iid, &mut rng(0)).is_err());
    }

    #[test]
    fn full_skew_gives_single_class_devices() {
        let data = Dataset::new(1, (0..40).map(f64::from).collect(), (0..40).map(|i| f64::from(i % 2)).collect()).unwrap();
        let parts = partition_data(&data, 2, PartitionMode::LabelSkew { rho: 1.0 }, &mut rng(16)).unwrap();
        for (m, part) in parts.iter().enumerate() {
            assert!(part.targets().iter().all(|&y| y == m as f64));
        }
        let parts = partition_data(&data, 3, PartitionMode::LabelSkew { rho: 0.7 }, &mut rng(17)).unwrap();
        let mut rows: Vec<f64> = parts.iter().flat_map(|p| (0..p.len()).map(|i| p.row(i)[0])).collect();
        rows.sort_by(f64::total_cmp);
        assert_eq!(rows, (0..40).map(f64::from).collect::<Vec<_>>());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let data = gaussian_blobs(2, 3, 10, 2.0, &mut rng(18)).unwrap();
        data.write_csv(&path).unwrap();
        assert_eq!(Dataset::read_csv(&path).unwrap(), data);
    }
}
