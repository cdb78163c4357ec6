//! Deterministic equivalents of the per-AP transmit powers.
//!
//! Under a uniform power `p_l` on every antenna of AP `l`, the per-antenna
//! power fixed point concentrates, as antennas and users grow, around a
//! deterministic map of the large-scale weights `D_l` and the correlation
//! spectra `ξ_{l,m}`. Evaluating it takes three steps:
//!
//! 1. the coupled scalars `b_l` (Picard iteration, unique non-negative root),
//! 2. their derivatives `ḃ_l` from the `L×L` linear system `(I − A) ḃ = r`,
//! 3. `p̄_l = Q p_l^{1/2} c_l ḃ_l M_l^{-2} Σ_m ξ_{l,m} / (1 + c_l b_l ξ_{l,m})²`.
//!
//! Only diagonals and eigenvalues are touched, never full matrices. The
//! returned powers are per antenna of AP `l`, summed over the `Q`-subcarrier
//! band: the unscaled expression is the per-subcarrier value and subcarriers
//! are identically distributed.

use nalgebra::{DMatrix, DVector};

use crate::channel::ChannelRealization;
use crate::precoding::{
    rel_change, solve_with_masking, weighted_precoder, AntennaPowerVector, FixedPointOptions, FixedPointReport, PrecoderKind,
    PrecoderSet,
};
use crate::scenario::{CorrelationSet, TargetProfile};
use crate::{Error, Result};

const B_TOLERANCE: f64 = 1e-12;
const B_MAX_ITERATIONS: usize = 10_000;
/// Acceptance bound on the relative residual of the returned `b` and `ḃ`.
pub const RESIDUAL_BOUND: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct RmtInput {
    /// `d_norm[l][k]`, diagonal of `D_l = σ^{-2} D̃_γ^{-1} D_{β,l}`.
    pub d_norm: Vec<Vec<f64>>,
    /// Correlation eigenvalues `ξ_{l,m}` of every AP.
    pub xi: Vec<Vec<f64>>,
    /// `c_l = K / M_l`.
    pub c: Vec<f64>,
    pub q_count: usize,
}

impl RmtInput {
    pub fn new(d_norm: Vec<Vec<f64>>, xi: Vec<Vec<f64>>, q_count: usize) -> Result<Self> {
        if d_norm.is_empty() || d_norm.len() != xi.len() {
            return Err(Error::Dimension(format!(
                "{} weight vectors for {} correlation spectra",
                d_norm.len(),
                xi.len()
            )));
        }
        let k = d_norm[0].len();
        if k == 0 || d_norm.iter().any(|d| d.len() != k) {
            return Err(Error::Dimension("every AP needs one weight per user".into()));
        }
        if d_norm.iter().flatten().any(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(Error::InvalidArgument("large-scale weights must be positive".into()));
        }
        if xi.iter().any(|x| x.is_empty()) || xi.iter().flatten().any(|&x| !(x >= 0.0)) {
            return Err(Error::InvalidArgument("eigenvalues must be non-negative".into()));
        }
        if q_count == 0 {
            return Err(Error::InvalidArgument("subcarrier count is zero".into()));
        }
        let c = xi.iter().map(|x| k as f64 / x.len() as f64).collect();
        Ok(Self {
            d_norm,
            xi,
            c,
            q_count,
        })
    }

    /// Builds the input from second-order statistics only.
    pub fn from_statistics(
        beta: &DMatrix<f64>,
        corr: &CorrelationSet,
        targets: &TargetProfile,
        noise_power: f64,
    ) -> Result<Self> {
        let (k, l) = beta.shape();
        if targets.gamma.len() != k || corr.c_ap.len() != l {
            return Err(Error::Dimension("statistics do not agree on K and L".into()));
        }
        if !(noise_power > 0.0) {
            return Err(Error::InvalidArgument("noise power must be positive".into()));
        }
        let d_norm = (0..l)
            .map(|ap| {
                (0..k)
                    .map(|u| beta[(u, ap)] / (noise_power * targets.d_tilde_gamma[u]))
                    .collect()
            })
            .collect();
        let xi = corr
            .eigenvalues
            .iter()
            .map(|e| e.iter().copied().collect())
            .collect();
        Self::new(d_norm, xi, targets.subcarriers())
    }

    pub fn users(&self) -> usize {
        self.d_norm[0].len()
    }

    pub fn aps(&self) -> usize {
        self.d_norm.len()
    }

    pub fn antennas(&self) -> Vec<usize> {
        self.xi.iter().map(Vec::len).collect()
    }

    fn check_powers(&self, p_ap: &[f64]) -> Result<Vec<f64>> {
        if p_ap.len() != self.aps() {
            return Err(Error::Dimension(format!(
                "{} AP powers for {} APs",
                p_ap.len(),
                self.aps()
            )));
        }
        if p_ap.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(Error::InvalidArgument("AP powers must be finite and non-negative".into()));
        }
        if p_ap.iter().all(|&p| p == 0.0) {
            return Err(Error::EmptyActiveSet);
        }
        Ok(p_ap.iter().map(|p| p.sqrt()).collect())
    }

    /// `(1/M_l) Σ_m ξ / (1 + c_l ξ b_l)`.
    fn resolvent_mean(&self, l: usize, b: f64) -> f64 {
        let c = self.c[l];
        let xi = &self.xi[l];
        xi.iter().map(|&x| x / (1.0 + c * x * b)).sum::<f64>() / xi.len() as f64
    }

    /// Diagonal of `B = Σ_l (1/M_l) Σ_m ξ/(1 + c_l ξ b_l) p_l^{1/2} D_l`.
    fn b_diag(&self, sqrt_p: &[f64], b: &[f64]) -> Vec<f64> {
        let mut diag = vec![0.0; self.users()];
        for l in 0..self.aps() {
            if sqrt_p[l] == 0.0 {
                continue;
            }
            let w = self.resolvent_mean(l, b[l]) * sqrt_p[l];
            for (acc, d) in diag.iter_mut().zip(&self.d_norm[l]) {
                *acc += w * d;
            }
        }
        diag
    }

    /// Right-hand side of the `b` equations.
    fn b_image(&self, sqrt_p: &[f64], b: &[f64]) -> Vec<f64> {
        let diag = self.b_diag(sqrt_p, b);
        let k = self.users() as f64;
        (0..self.aps())
            .map(|l| {
                if sqrt_p[l] == 0.0 {
                    return 0.0;
                }
                sqrt_p[l] * self.d_norm[l].iter().zip(&diag).map(|(d, g)| d / g).sum::<f64>() / k
            })
            .collect()
    }
}

/// The unique non-negative solution of the coupled `b_l` equations. APs with
/// zero power get `b_l = 0`.
pub fn solve_b(input: &RmtInput, p_ap: &[f64]) -> Result<Vec<f64>> {
    let sqrt_p = input.check_powers(p_ap)?;
    let mut b: Vec<f64> = sqrt_p.iter().map(|&s| if s > 0.0 { 1.0 } else { 0.0 }).collect();
    let mut change = f64::INFINITY;
    for _ in 0..B_MAX_ITERATIONS {
        let next = input.b_image(&sqrt_p, &b);
        change = rel_change(&b, &next);
        b = next;
        if !b.iter().all(|x| x.is_finite()) {
            break;
        }
        if change <= B_TOLERANCE {
            let residual = rel_change(&b, &input.b_image(&sqrt_p, &b));
            if residual <= RESIDUAL_BOUND {
                return Ok(b);
            }
        }
    }
    Err(Error::NoConvergence {
        what: "b fixed point",
        iterations: B_MAX_ITERATIONS,
        residual: change,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmtAuxiliaries {
    pub b: Vec<f64>,
    pub b_dot: Vec<f64>,
    /// The coupling matrix `A`.
    pub a_matrix: DMatrix<f64>,
    /// Diagonal of `B`.
    pub b_diag: Vec<f64>,
}

/// Solves `(I − A) ḃ = r` at a converged `b`.
pub fn solve_b_dot(input: &RmtInput, p_ap: &[f64], b: &[f64]) -> Result<RmtAuxiliaries> {
    let sqrt_p = input.check_powers(p_ap)?;
    let (l_count, k) = (input.aps(), input.users() as f64);
    if b.len() != l_count {
        return Err(Error::Dimension("one b per AP expected".into()));
    }
    let diag = input.b_diag(&sqrt_p, b);
    if diag.iter().any(|&g| !(g > 0.0)) {
        return Err(Error::InvalidArgument("B is not strictly positive".into()));
    }
    let inv_sq: Vec<f64> = diag.iter().map(|g| 1.0 / (g * g)).collect();
    // D'_l = dprime[l] · D_l
    let dprime: Vec<f64> = (0..l_count)
        .map(|l| {
            let c = input.c[l];
            let xi = &input.xi[l];
            xi.iter()
                .map(|&x| c * x * x / (1.0 + c * x * b[l]).powi(2))
                .sum::<f64>()
                / xi.len() as f64
        })
        .collect();
    let weighted = |l: usize, lp: usize| -> f64 {
        input.d_norm[l]
            .iter()
            .zip(&input.d_norm[lp])
            .zip(&inv_sq)
            .map(|((a, b), w)| a * b * w)
            .sum()
    };
    let a_matrix = DMatrix::from_fn(l_count, l_count, |l, lp| {
        sqrt_p[l] * sqrt_p[lp] * dprime[lp] * weighted(l, lp) / k
    });
    let rhs = DVector::from_fn(l_count, |l, _| {
        sqrt_p[l] * input.d_norm[l].iter().zip(&inv_sq).map(|(d, w)| d * w).sum::<f64>() / k
    });
    let system = DMatrix::identity(l_count, l_count) - &a_matrix;
    let b_dot = system
        .clone()
        .lu()
        .solve(&rhs)
        .filter(|x| x.iter().all(|v| v.is_finite()))
        .ok_or(Error::SingularCoupling)?;
    let residual = (&system * &b_dot - &rhs).amax() / rhs.amax().max(f64::MIN_POSITIVE);
    if residual > RESIDUAL_BOUND {
        return Err(Error::SingularCoupling);
    }
    Ok(RmtAuxiliaries {
        b: b.to_vec(),
        b_dot: b_dot.iter().copied().collect(),
        a_matrix,
        b_diag: diag,
    })
}

/// Deterministic-equivalent per-antenna band power of every AP under the
/// block-uniform allocation `p_ap`.
pub fn pbar_map(input: &RmtInput, p_ap: &[f64]) -> Result<Vec<f64>> {
    let b = solve_b(input, p_ap)?;
    let aux = solve_b_dot(input, p_ap, &b)?;
    Ok(pbar_from_aux(input, p_ap, &aux))
}

fn pbar_from_aux(input: &RmtInput, p_ap: &[f64], aux: &RmtAuxiliaries) -> Vec<f64> {
    (0..input.aps())
        .map(|l| {
            if p_ap[l] == 0.0 {
                return 0.0;
            }
            let (c, b) = (input.c[l], aux.b[l]);
            let xi = &input.xi[l];
            let m = xi.len() as f64;
            let shape: f64 = xi.iter().map(|&x| x / (1.0 + c * b * x).powi(2)).sum();
            input.q_count as f64 * p_ap[l].sqrt() * c * aux.b_dot[l] * shape / (m * m)
        })
        .collect()
}

/// Per-AP powers and the APs the CU keeps switched on.
#[derive(Debug, Clone, PartialEq)]
pub struct ApPowerVector {
    /// Per-antenna band power of every AP.
    pub p_ap: Vec<f64>,
    pub active_set: Vec<usize>,
}

impl ApPowerVector {
    /// Uniform per-AP powers spread onto the antennas; inactive APs get zero.
    pub fn expand(&self, antennas: &[usize]) -> AntennaPowerVector {
        let mut p = Vec::with_capacity(antennas.iter().sum());
        for (l, &m) in antennas.iter().enumerate() {
            let v = if self.active_set.contains(&l) { self.p_ap[l] } else { 0.0 };
            p.extend(std::iter::repeat(v).take(m));
        }
        AntennaPowerVector::new(p)
    }
}

/// Evaluation budget of the per-AP iteration. The map is L-dimensional and
/// cheap, while APs on the verge of switching off decay slowly.
pub const PBAR_MAX_ITERATIONS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmtOptions {
    pub fixed_point: FixedPointOptions,
    /// ε relative to the largest AP power.
    pub activation_threshold_rel: f64,
}

impl Default for RmtOptions {
    fn default() -> Self {
        Self {
            fixed_point: FixedPointOptions {
                max_iterations: PBAR_MAX_ITERATIONS,
                ..FixedPointOptions::default()
            },
            activation_threshold_rel: 1e-6,
        }
    }
}

/// Iterates `p ← p̄(p)` from 1 W per AP, then selects the active APs.
pub fn solve_pbar(input: &RmtInput, opts: &RmtOptions) -> Result<(ApPowerVector, FixedPointReport)> {
    let antennas = input.antennas();
    let total: usize = antennas.iter().sum();
    if input.users() >= total {
        return Err(Error::InsufficientAntennas {
            active: total,
            users: input.users(),
        });
    }
    let fp = &opts.fixed_point;
    let objective = |p: &[f64]| -> f64 {
        p.iter().zip(&antennas).map(|(x, &m)| m as f64 * x.max(0.0).sqrt()).sum()
    };
    let guard = |p: &[f64]| {
        let max = p.iter().copied().fold(0.0, f64::max);
        let active: usize = p
            .iter()
            .zip(&antennas)
            .filter(|(&x, _)| x > fp.mask_rel * max)
            .map(|(_, &m)| m)
            .sum();
        if active <= input.users() {
            return Err(Error::InsufficientAntennas { active, users: input.users() });
        }
        Ok(())
    };
    let (p, report) = solve_with_masking(
        vec![1.0; input.aps()],
        fp,
        |p| pbar_map(input, p),
        objective,
        guard,
        "per-AP power fixed point",
    )?;
    if !report.converged {
        return Err(Error::NoConvergence {
            what: "per-AP power fixed point",
            iterations: report.iterations,
            residual: report.final_residual,
        });
    }
    let active_set = select_active_aps(&p, &antennas, input.users(), opts.activation_threshold_rel)?;
    Ok((
        ApPowerVector {
            p_ap: p,
            active_set,
        },
        report,
    ))
}

/// `{l : p̄_l > ε}` with `ε = threshold_rel · max_l p̄_l`; the active APs must
/// carry more antennas than there are users.
pub fn select_active_aps(
    p_ap: &[f64],
    antennas: &[usize],
    users: usize,
    threshold_rel: f64,
) -> Result<Vec<usize>> {
    let max = p_ap.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(Error::EmptyActiveSet);
    }
    let eps = threshold_rel * max;
    let active: Vec<usize> = (0..p_ap.len()).filter(|&l| p_ap[l] > eps).collect();
    let count: usize = active.iter().map(|&l| antennas[l]).sum();
    if count <= users {
        return Err(Error::InsufficientAntennas {
            active: count,
            users,
        });
    }
    Ok(active)
}

/// Consumption-optimal precoder structure driven by the statistical AP
/// powers: uniform power on the antennas of active APs, zero rows elsewhere.
pub fn rmt_induced_precoder(
    ch: &ChannelRealization,
    targets: &TargetProfile,
    noise_power: f64,
    p_ap: &ApPowerVector,
) -> Result<PrecoderSet> {
    if p_ap.p_ap.len() != ch.aps() {
        return Err(Error::Dimension("one power per AP expected".into()));
    }
    let p = p_ap.expand(ch.antennas());
    weighted_precoder(ch, targets, noise_power, &p, PrecoderKind::RmtInduced)
}
