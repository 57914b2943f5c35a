//! Per-channel upload cost model: bytes, energy, money and transfer time.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::sparsifier::{LayeredUpdate, SparseLayer};
use crate::wire;

pub const BYTES_PER_MB: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub name: String,
    /// Mean upload energy, J/MB.
    pub energy_mean: f64,
    /// Standard deviation of the per-MB energy draw.
    pub energy_std: f64,
    /// Money per MB.
    pub price: f64,
    /// Mbit/s.
    pub rate: f64,
}

impl ChannelSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.energy_mean > 0.0
            && self.energy_std >= 0.0
            && self.price >= 0.0
            && self.rate > 0.0
            && [self.energy_mean, self.energy_std, self.price, self.rate].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("channel {:?} needs energy_mean > 0, energy_std >= 0, price >= 0, rate > 0", self.name)))
        }
    }

    /// Per-MB energy multiplier that no accepted draw exceeds by more than
    /// six standard deviations; used for conservative budget projection.
    pub fn energy_ceiling(&self) -> f64 {
        self.energy_mean + 6.0 * self.energy_std
    }
}

/// 3G, 4G and 5G with the measured energy means; rates and prices are
/// placeholders meant to be overridden from config.
pub fn default_channels() -> Vec<ChannelSpec> {
    let spec = |name: &str, energy_mean: f64, price: f64, rate: f64| ChannelSpec {
        name: name.to_string(),
        energy_mean,
        energy_std: 0.00033,
        price,
        rate,
    };
    vec![
        spec("3G", 1296.0, 0.01, 2.0),
        spec("4G", 2851.2, 0.02, 20.0),
        spec("5G", 7128.0, 0.05, 100.0),
    ]
}

pub fn layer_bytes(layer: &SparseLayer) -> u64 {
    wire::encoded_len(layer.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmissionReceipt {
    pub bytes: Vec<u64>,
    pub energy: Vec<f64>,
    pub money: Vec<f64>,
    /// Seconds; channels upload in parallel.
    pub transfer_time: f64,
}

impl TransmissionReceipt {
    pub fn idle(channels: usize) -> Self {
        Self {
            bytes: vec![0; channels],
            energy: vec![0.0; channels],
            money: vec![0.0; channels],
            transfer_time: 0.0,
        }
    }

    pub fn total_bytes(&self) -> u64 {
        self.bytes.iter().sum()
    }

    pub fn total_energy(&self) -> f64 {
        self.energy.iter().sum()
    }

    pub fn total_money(&self) -> f64 {
        self.money.iter().sum()
    }
}

/// Costs of sending `bytes[c]` over channel `c`, drawing one energy
/// multiplier per channel.
pub fn transmit_bytes<R: Rng + ?Sized>(bytes: &[u64], channels: &[ChannelSpec], rng: &mut R) -> Result<TransmissionReceipt> {
    if bytes.len() > channels.len() {
        return Err(invalid(format!("{} layers but only {} channels", bytes.len(), channels.len())));
    }
    let mut receipt = TransmissionReceipt::idle(channels.len());
    for (c, (&b, ch)) in bytes.iter().zip(channels).enumerate() {
        let z: f64 = rng.sample(StandardNormal);
        let per_mb = (ch.energy_mean + ch.energy_std * z).max(0.0);
        let mb = b as f64 / BYTES_PER_MB;
        receipt.bytes[c] = b;
        receipt.energy[c] = mb * per_mb;
        receipt.money[c] = mb * ch.price;
        receipt.transfer_time = receipt.transfer_time.max(b as f64 * 8.0 / (ch.rate * 1e6));
    }
    Ok(receipt)
}

/// Layer `c` of the update travels over channel `c`.
pub fn transmit<R: Rng + ?Sized>(update: &LayeredUpdate, channels: &[ChannelSpec], rng: &mut R) -> Result<TransmissionReceipt> {
    let bytes: Vec<u64> = update.layers().iter().map(layer_bytes).collect();
    transmit_bytes(&bytes, channels, rng)
}
