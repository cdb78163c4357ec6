//! Transmit power, PA consumption, network consumption and gains.

use nalgebra::DMatrix;

use crate::channel::ChannelRealization;
use crate::precoding::{AntennaPowerVector, PrecoderSet};
use crate::scenario::{SystemConfig, TargetProfile};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PaParams {
    pub max_power: f64,
    pub max_efficiency: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkParams {
    pub pa: PaParams,
    /// Fixed consumption of an active AP.
    pub p_fix: f64,
    /// Circuit consumption per active antenna.
    pub p_circuit: f64,
}

impl From<&SystemConfig> for NetworkParams {
    fn from(cfg: &SystemConfig) -> Self {
        Self {
            pa: PaParams {
                max_power: cfg.pa_max_power,
                max_efficiency: cfg.pa_max_efficiency,
            },
            p_fix: cfg.p_fix,
            p_circuit: cfg.p_circuit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConsumptionReport {
    pub p_tx: f64,
    pub p_pas: f64,
    pub p_net: f64,
    pub active_ap_count: usize,
    /// Active antennas per AP (M_a,l).
    pub active_antenna_counts: Vec<usize>,
    /// Per-user rate per subcarrier in bits per channel use.
    pub rates: Vec<f64>,
    pub gain_net: Option<f64>,
    pub gain_pas: Option<f64>,
}

impl ConsumptionReport {
    pub fn with_rates(mut self, targets: &TargetProfile) -> Self {
        self.rates = achievable_rates(targets);
        self
    }

    /// Attaches gains against a baseline evaluated on the same realization.
    pub fn with_gain(mut self, baseline: &ConsumptionReport) -> Result<Self> {
        let (net, pas) = gain(&self, baseline)?;
        self.gain_net = Some(net);
        self.gain_pas = Some(pas);
        Ok(self)
    }
}

pub fn total_transmit_power(p: &AntennaPowerVector) -> f64 {
    p.p.iter().sum()
}

/// `(√p_max / η_max) Σ_n √p_n` over active antennas.
pub fn pa_consumed_power(p: &AntennaPowerVector, pa: &PaParams) -> f64 {
    let sum: f64 = p
        .p
        .iter()
        .zip(&p.active_mask)
        .filter(|(_, &a)| a)
        .map(|(x, _)| x.sqrt())
        .sum();
    pa.max_power.sqrt() / pa.max_efficiency * sum
}

/// Network consumption; an AP is active when any of its antennas is.
pub fn network_power(
    p: &AntennaPowerVector,
    antennas: &[usize],
    params: &NetworkParams,
) -> Result<ConsumptionReport> {
    let total: usize = antennas.iter().sum();
    if total != p.len() {
        return Err(Error::Dimension(format!(
            "partition covers {total} antennas, power vector has {}",
            p.len()
        )));
    }
    let mut counts = Vec::with_capacity(antennas.len());
    let mut start = 0;
    for &m in antennas {
        counts.push(p.active_mask[start..start + m].iter().filter(|&&a| a).count());
        start += m;
    }
    let p_pas = pa_consumed_power(p, &params.pa);
    let active_ap_count = counts.iter().filter(|&&c| c > 0).count();
    let overhead: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| params.p_fix + params.p_circuit * c as f64)
        .sum();
    Ok(ConsumptionReport {
        p_tx: total_transmit_power(p),
        p_pas,
        p_net: p_pas + overhead,
        active_ap_count,
        active_antenna_counts: counts,
        ..Default::default()
    })
}

/// `log2(1 + γ_k / Q)` per user, per subcarrier.
pub fn achievable_rates(targets: &TargetProfile) -> Vec<f64> {
    targets.d_tilde_gamma.iter().map(|g| (1.0 + g).log2()).collect()
}

/// Rate summed over the band, `Q log2(1 + γ_k / Q)`.
pub fn band_rates(targets: &TargetProfile) -> Vec<f64> {
    let q = targets.subcarriers() as f64;
    achievable_rates(targets).into_iter().map(|r| q * r).collect()
}

/// `K×Q` post-precoding SINR, `|[HW]_kk|² / (σ² + Σ_{j≠k} |[HW]_kj|²)`.
pub fn effective_snr(ch: &ChannelRealization, ws: &PrecoderSet, noise_power: f64) -> DMatrix<f64> {
    let k = ch.users();
    let mut snr = DMatrix::zeros(k, ch.subcarriers());
    for (q, (h, w)) in ch.aggregated_all().iter().zip(&ws.w).enumerate() {
        let e = h * w;
        for u in 0..k {
            let signal = e[(u, u)].norm_sqr();
            let interference: f64 = (0..e.ncols()).filter(|&j| j != u).map(|j| e[(u, j)].norm_sqr()).sum();
            snr[(u, q)] = signal / (noise_power + interference);
        }
    }
    snr
}

/// `(P_net(baseline) / P_net(candidate), P_PAs(baseline) / P_PAs(candidate))`.
pub fn gain(report: &ConsumptionReport, baseline: &ConsumptionReport) -> Result<(f64, f64)> {
    if !(report.p_net > 0.0 && report.p_pas > 0.0) {
        return Err(Error::InvalidArgument("candidate consumption is zero".into()));
    }
    Ok((baseline.p_net / report.p_net, baseline.p_pas / report.p_pas))
}
