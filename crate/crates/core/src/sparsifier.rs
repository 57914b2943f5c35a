//! Magnitude sparsification and layered encoding.
//!
//! A vector is ranked once by decreasing magnitude (ties go to the lower
//! index) and the rank order is cut into consecutive windows. `top_k` is the
//! first window, `top_alpha_beta` an arbitrary window, and `lgc_encode` a
//! partition of the first `K = sum(k)` ranks into one window per channel.

use std::cmp::Ordering;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Dense real vector with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVector(Vec<f64>);

impl GradientVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_finite(&values)?;
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm_sq(&self) -> f64 {
        norm_sq(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for GradientVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn norm_sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

pub(crate) fn check_finite(x: &[f64]) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(invalid(format!("entry {i} is not finite ({})", x[i]))),
        None => Ok(()),
    }
}

/// Sparse vector in canonical form: strictly increasing indices, nonzero values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseLayer {
    dim: usize,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl SparseLayer {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds a layer from `(index, value)` pairs, rejecting anything that is
    /// not already canonical.
    pub fn from_entries(dim: usize, entries: &[(u32, f64)]) -> Result<Self> {
        let mut prev: Option<u32> = None;
        for &(i, v) in entries {
            if i as usize >= dim {
                return Err(invalid(format!("index {i} out of range for dim {dim}")));
            }
            if prev.is_some_and(|p| p >= i) {
                return Err(invalid("indices must be strictly increasing"));
            }
            if v == 0.0 || !v.is_finite() {
                return Err(invalid(format!("value at index {i} must be finite and nonzero")));
            }
            prev = Some(i);
        }
        Ok(Self {
            dim,
            indices: entries.iter().map(|e| e.0).collect(),
            values: entries.iter().map(|e| e.1).collect(),
        })
    }

    /// Gathers `x` at `support`, which must be sorted ascending and point at
    /// nonzero entries.
    fn gather(x: &[f64], support: Vec<u32>) -> Self {
        debug_assert!(support.windows(2).all(|w| w[0] < w[1]));
        let values = support.iter().map(|&i| x[i as usize]).collect();
        Self {
            dim: x.len(),
            indices: support,
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(&i, &v)| (i as usize, v))
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (i, v) in self.entries() {
            out[i] = v;
        }
        out
    }
}

/// Entries per channel. Channel `c` carries rank window
/// `(k[0] + .. + k[c-1], k[0] + .. + k[c]]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationPlan {
    k: Vec<usize>,
}

impl AllocationPlan {
    pub fn new(k: Vec<usize>) -> Result<Self> {
        if k.is_empty() {
            return Err(invalid("allocation plan needs at least one channel"));
        }
        Ok(Self { k })
    }

    /// Single channel carrying every coordinate.
    pub fn dense(dim: usize) -> Self {
        Self { k: vec![dim] }
    }

    pub fn k(&self) -> &[usize] {
        &self.k
    }

    pub fn channels(&self) -> usize {
        self.k.len()
    }

    pub fn total(&self) -> usize {
        self.k.iter().sum()
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.total() > dim {
            return Err(invalid(format!(
                "plan carries {} entries but dimension is {dim}",
                self.total()
            )));
        }
        Ok(())
    }
}

/// One sparse layer per channel of a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayeredUpdate {
    dim: usize,
    plan: AllocationPlan,
    layers: Vec<SparseLayer>,
}

impl LayeredUpdate {
    /// Assembles an update received from elsewhere. Per-layer shape is checked
    /// here; overlapping supports are only detected by [`lgc_decode`].
    pub fn from_parts(dim: usize, plan: AllocationPlan, layers: Vec<SparseLayer>) -> Result<Self> {
        if layers.len() != plan.channels() {
            return Err(invalid(format!(
                "{} layers for a {}-channel plan",
                layers.len(),
                plan.channels()
            )));
        }
        for (c, (layer, &k)) in layers.iter().zip(plan.k()).enumerate() {
            if layer.dim() != dim {
                return Err(invalid(format!("layer {c} has dim {}, expected {dim}", layer.dim())));
            }
            if layer.len() > k {
                return Err(invalid(format!("layer {c} has {} entries, plan allows {k}", layer.len())));
            }
        }
        Ok(Self { dim, plan, layers })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn plan(&self) -> &AllocationPlan {
        &self.plan
    }

    pub fn layers(&self) -> &[SparseLayer] {
        &self.layers
    }

    pub fn nnz(&self) -> usize {
        self.layers.iter().map(SparseLayer::len).sum()
    }
}

/// Indices of the `k` largest-magnitude nonzero entries, in rank order.
fn ranked_support(x: &[f64], k: usize) -> Vec<u32> {
    if k == 0 {
        return Vec::new();
    }
    let by_rank = |a: &u32, b: &u32| -> Ordering {
        let (ma, mb) = (x[*a as usize].abs(), x[*b as usize].abs());
        mb.total_cmp(&ma).then(a.cmp(b))
    };
    let mut idx: Vec<u32> = (0..x.len() as u32).filter(|&i| x[i as usize] != 0.0).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, by_rank);
        idx.truncate(k);
    }
    idx.sort_unstable_by(by_rank);
    idx
}

fn check_dim(x: &[f64]) -> Result<()> {
    if x.len() > u32::MAX as usize {
        return Err(invalid("dimension exceeds the 32-bit index space"));
    }
    check_finite(x)
}

pub fn top_k(x: &[f64], k: usize) -> Result<SparseLayer> {
    check_dim(x)?;
    if k > x.len() {
        return Err(invalid(format!("k = {k} exceeds dimension {}", x.len())));
    }
    let mut support = ranked_support(x, k);
    support.sort_unstable();
    Ok(SparseLayer::gather(x, support))
}

/// Entries whose 1-based magnitude rank `r` satisfies `alpha < r <= beta`.
/// `alpha = 0` means no upper cut.
pub fn top_alpha_beta(x: &[f64], alpha: usize, beta: usize) -> Result<SparseLayer> {
    check_dim(x)?;
    if alpha >= beta {
        return Err(invalid(format!("alpha ({alpha}) must be below beta ({beta})")));
    }
    if beta > x.len() {
        return Err(invalid(format!("beta = {beta} exceeds dimension {}", x.len())));
    }
    let ranked = ranked_support(x, beta);
    let mut window = ranked[alpha.min(ranked.len())..].to_vec();
    window.sort_unstable();
    Ok(SparseLayer::gather(x, window))
}

pub fn lgc_encode(x: &[f64], plan: &AllocationPlan) -> Result<LayeredUpdate> {
    check_dim(x)?;
    plan.validate(x.len())?;
    let ranked = ranked_support(x, plan.total());
    let mut start = 0usize;
    let layers = plan
        .k()
        .iter()
        .map(|&k| {
            let lo = start.min(ranked.len());
            let hi = (start + k).min(ranked.len());
            start += k;
            let mut window = ranked[lo..hi].to_vec();
            window.sort_unstable();
            SparseLayer::gather(x, window)
        })
        .collect::<Vec<_>>();
    debug_assert!(supports_disjoint(&layers, x.len()));
    Ok(LayeredUpdate {
        dim: x.len(),
        plan: plan.clone(),
        layers,
    })
}

fn supports_disjoint(layers: &[SparseLayer], dim: usize) -> bool {
    let mut seen = vec![false; dim];
    layers
        .iter()
        .flat_map(|l| l.indices())
        .all(|&i| !std::mem::replace(&mut seen[i as usize], true))
}

/// Sums the layers into a dense vector.
pub fn lgc_decode(update: &LayeredUpdate) -> Result<Vec<f64>> {
    let mut out = vec![0.0; update.dim];
    let mut seen = vec![false; update.dim];
    for (c, layer) in update.layers.iter().enumerate() {
        for (i, v) in layer.entries() {
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::CorruptUpdate(format!(
                    "index {i} appears again in layer {c}"
                )));
            }
            out[i] += v;
        }
    }
    Ok(out)
}

/// Top-K contraction parameter `K / D`.
pub fn contraction_factor(plan: &AllocationPlan, dim: usize) -> Result<f64> {
    plan.validate(dim)?;
    match plan.total() {
        0 => Err(invalid("a plan with zero entries has no contraction")),
        k => Ok(k as f64 / dim as f64),
    }
}
