//! Zero-forcing precoders: the conventional minimum transmit power solution
//! and the one minimising power-amplifier consumption.
//!
//! With per-antenna band powers `p` the consumption-optimal precoder is
//!
//! ```text
//! W_q = D_p^{1/2} H_q^H (H_q D_p^{1/2} H_q^H)^{-1} D̃_γ^{1/2} σ
//! ```
//!
//! and `p` must reproduce itself through `p_n = Σ_q [W_q W_q^H]_{nn}`. In the
//! normalised domain that map is `F(p)_n = p_n Σ_q ‖G_q^{-1} h̃_{q,n}‖²` with
//! `G_q = H̃_q D_p^{1/2} H̃_q^H`. Iterating `F` is a majorise-minimise scheme
//! for `Σ_n √p_n`, so the objective never increases along the iterates.

use rayon::prelude::*;

use crate::channel::{ChannelRealization, NormalizedChannel};
use crate::linalg::{weighted_gram, weighted_zf};
use crate::scenario::TargetProfile;
use crate::{CMatrix, Error, Result, C64};

/// Powers below this fraction of the largest are reported as exactly zero.
pub const MASK_REL: f64 = 1e-9;

/// Lower clamp applied during iteration, relative to the largest power.
pub const FLOOR_REL: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PrecoderKind {
    Conventional,
    ConsumedPowerOptimal,
    RmtInduced,
}

impl PrecoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Conventional => "conventional",
            Self::ConsumedPowerOptimal => "optimal",
            Self::RmtInduced => "rmt",
        }
    }
}

#[derive(Debug, Clone)]
pub struct PrecoderSet {
    pub kind: PrecoderKind,
    /// One `N×K` matrix per subcarrier.
    pub w: Vec<CMatrix>,
}

/// Per-antenna transmit power, summed over the band.
#[derive(Debug, Clone, PartialEq)]
pub struct AntennaPowerVector {
    pub p: Vec<f64>,
    pub active_mask: Vec<bool>,
}

impl AntennaPowerVector {
    /// Entries at or below `MASK_REL · max(p)` are marked inactive.
    pub fn new(p: Vec<f64>) -> Self {
        let max = p.iter().copied().fold(0.0, f64::max);
        let active_mask = p.iter().map(|&x| x > MASK_REL * max && x > 0.0).collect();
        Self { p, active_mask }
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.active_mask.iter().filter(|&&a| a).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointOptions {
    /// Stop when `max|F(p) − p| / max(p)` drops to this value.
    pub tolerance: f64,
    /// Budget of fixed-point map evaluations.
    pub max_iterations: usize,
    /// Initial damping factor θ in `(0, 1]` of the plain Picard mode.
    pub damping: f64,
    pub floor_rel: f64,
    pub mask_rel: f64,
    /// Squared extrapolation between Picard steps.
    pub accelerate: bool,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 1000,
            damping: 1.0,
            floor_rel: FLOOR_REL,
            mask_rel: MASK_REL,
            accelerate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointReport {
    pub iterations: usize,
    /// `max|F(p) − p| / max(p)` at the returned point.
    pub final_residual: f64,
    pub converged: bool,
    /// `Σ_n √p_n` after every iterate, starting with the initial point.
    pub objective_trace: Vec<f64>,
    /// Damping factor in use when the iteration stopped.
    pub damping: f64,
}

/// Diagonal of `D̃_γ^{1/2} σ`.
pub fn zf_targets(targets: &TargetProfile, noise_power: f64) -> Vec<f64> {
    let sigma = noise_power.sqrt();
    targets.d_tilde_gamma.iter().map(|g| sigma * g.sqrt()).collect()
}

fn check_targets(ch: &ChannelRealization, targets: &TargetProfile, noise_power: f64) -> Result<()> {
    if targets.gamma.len() != ch.users() {
        return Err(Error::Dimension(format!(
            "{} targets for {} users",
            targets.gamma.len(),
            ch.users()
        )));
    }
    if !(noise_power > 0.0) {
        return Err(Error::InvalidArgument("noise power must be positive".into()));
    }
    Ok(())
}

/// Conventional per-subcarrier ZF, `W_q = H_q^H (H_q H_q^H)^{-1} D̃_γ^{1/2} σ`.
pub fn zf_precoder(
    ch: &ChannelRealization,
    targets: &TargetProfile,
    noise_power: f64,
) -> Result<PrecoderSet> {
    check_targets(ch, targets, noise_power)?;
    let t = zf_targets(targets, noise_power);
    let ones = vec![1.0; ch.total_antennas()];
    let w = (0..ch.subcarriers())
        .map(|q| weighted_zf(ch.aggregated(q), &ones, &t).ok_or(Error::Singular { q }))
        .collect::<Result<Vec<_>>>()?;
    Ok(PrecoderSet {
        kind: PrecoderKind::Conventional,
        w,
    })
}

/// Consumption-optimal precoder structure for given antenna powers. Inactive
/// antennas get exactly zero rows.
pub fn optimal_precoder(
    ch: &ChannelRealization,
    targets: &TargetProfile,
    noise_power: f64,
    p: &AntennaPowerVector,
) -> Result<PrecoderSet> {
    weighted_precoder(ch, targets, noise_power, p, PrecoderKind::ConsumedPowerOptimal)
}

pub(crate) fn weighted_precoder(
    ch: &ChannelRealization,
    targets: &TargetProfile,
    noise_power: f64,
    p: &AntennaPowerVector,
    kind: PrecoderKind,
) -> Result<PrecoderSet> {
    check_targets(ch, targets, noise_power)?;
    if p.len() != ch.total_antennas() {
        return Err(Error::Dimension(format!(
            "{} antenna powers for {} antennas",
            p.len(),
            ch.total_antennas()
        )));
    }
    let active = p.active_count();
    if active < ch.users() {
        return Err(Error::InsufficientAntennas {
            active,
            users: ch.users(),
        });
    }
    // D_p^{1/2} = diag(√p), so the Gram weights are p^{1/2}.
    let s: Vec<f64> = p
        .p
        .iter()
        .zip(&p.active_mask)
        .map(|(&x, &a)| if a { x.sqrt() } else { 0.0 })
        .collect();
    let t = zf_targets(targets, noise_power);
    let w = (0..ch.subcarriers())
        .map(|q| weighted_zf(ch.aggregated(q), &s, &t).ok_or(Error::Singular { q }))
        .collect::<Result<Vec<_>>>()?;
    Ok(PrecoderSet { kind, w })
}

/// `p_n = Σ_q [W_q W_q^H]_{nn}`.
pub fn per_antenna_powers(ws: &PrecoderSet) -> AntennaPowerVector {
    let n = ws.w.first().map_or(0, |w| w.nrows());
    let mut p = vec![0.0; n];
    for w in &ws.w {
        for (acc, row) in p.iter_mut().zip(w.row_iter()) {
            *acc += row.norm_squared();
        }
    }
    AntennaPowerVector::new(p)
}

/// Largest relative ZF constraint violation over subcarriers,
/// `max_q ‖H_q W_q − D̃_γ^{1/2} σ‖_F / ‖D̃_γ^{1/2} σ‖_F`.
pub fn zf_residual(
    ch: &ChannelRealization,
    ws: &PrecoderSet,
    targets: &TargetProfile,
    noise_power: f64,
) -> f64 {
    let t = zf_targets(targets, noise_power);
    let t_norm = t.iter().map(|x| x * x).sum::<f64>().sqrt();
    let k = t.len();
    ch.aggregated_all()
        .iter()
        .zip(&ws.w)
        .map(|(h, w)| {
            let mut e = h * w;
            for i in 0..k {
                e[(i, i)] -= C64::new(t[i], 0.0);
            }
            e.norm() / t_norm
        })
        .fold(0.0, f64::max)
}

/// One subcarrier's contribution `‖G^{-1} h̃_n‖²` for every antenna.
fn subcarrier_terms(h: &CMatrix, s: &[f64]) -> Option<Vec<f64>> {
    let (_, chol) = weighted_gram(h, s);
    let y = chol?.solve(h);
    let terms: Vec<f64> = y.column_iter().map(|c| c.norm_squared()).collect();
    terms.iter().all(|x| x.is_finite()).then_some(terms)
}

/// Right-hand side of the per-antenna power fixed point,
/// `F(p)_n = p_n Σ_q ‖G_q^{-1} h̃_{q,n}‖²`.
///
/// Subcarrier terms may be evaluated in parallel; they are summed in
/// subcarrier order so the result does not depend on the worker count.
pub fn power_map(nch: &NormalizedChannel, p: &[f64]) -> Result<Vec<f64>> {
    let n = nch.total_antennas();
    if p.len() != n {
        return Err(Error::Dimension(format!("{} powers for {n} antennas", p.len())));
    }
    let s: Vec<f64> = p.iter().map(|x| x.max(0.0).sqrt()).collect();
    let per_q: Vec<Option<Vec<f64>>> = nch
        .h_tilde
        .par_iter()
        .map(|h| subcarrier_terms(h, &s))
        .collect();
    let mut acc = vec![0.0; n];
    for (q, terms) in per_q.into_iter().enumerate() {
        let terms = terms.ok_or(Error::Singular { q })?;
        for (a, t) in acc.iter_mut().zip(terms) {
            *a += t;
        }
    }
    Ok(acc.iter().zip(p).map(|(a, &x)| a * x.max(0.0)).collect())
}

fn objective(p: &[f64]) -> f64 {
    p.iter().map(|x| x.max(0.0).sqrt()).sum()
}

fn max_of(p: &[f64]) -> f64 {
    p.iter().copied().fold(0.0, f64::max)
}

pub(crate) fn rel_change(a: &[f64], b: &[f64]) -> f64 {
    let scale = max_of(b).max(max_of(a));
    if scale == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

fn apply_floor(p: &mut [f64], floor_rel: f64) {
    let max = max_of(p);
    for x in p.iter_mut() {
        *x = x.max(floor_rel * max);
    }
}

/// Fixed point `p = F(p)` of a power map started from `p`.
///
/// Each cycle takes two steps `p₁ = F(p)`, `p₂ = F(p₁)` and, when
/// acceleration is on, tries the squared extrapolation
/// `x = p − 2αr + α²v` (`r = p₁ − p`, `v = p₂ − 2p₁ + p`,
/// `α = −‖r‖/‖v‖ ≤ −1`). `F(x)` replaces `p₂` only if `objective` does not
/// increase, so the worst case is plain iteration. `guard` rejects iterates
/// that cannot support the users. `iterations` counts evaluations of `F`.
pub(crate) fn accelerated_fixed_point(
    mut p: Vec<f64>,
    opts: &FixedPointOptions,
    map: impl Fn(&[f64]) -> Result<Vec<f64>>,
    objective: impl Fn(&[f64]) -> f64,
    guard: impl Fn(&[f64]) -> Result<()>,
    what: &'static str,
) -> Result<(Vec<f64>, FixedPointReport)> {
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::InvalidArgument("damping must lie in (0, 1]".into()));
    }
    let mut theta = opts.damping;
    let mut trace = vec![objective(&p)];
    let mut residual = f64::INFINITY;
    let mut evals = 0;
    let finite = |x: &[f64]| x.iter().all(|y| y.is_finite());

    let converged = loop {
        apply_floor(&mut p, opts.floor_rel);
        guard(&p)?;
        let p1 = map(&p)?;
        evals += 1;
        if !finite(&p1) {
            return Err(Error::NoConvergence { what, iterations: evals, residual });
        }
        residual = rel_change(&p, &p1);
        if residual <= opts.tolerance || evals >= opts.max_iterations {
            p = p1;
            trace.push(objective(&p));
            break residual <= opts.tolerance;
        }

        if !opts.accelerate {
            let next: Vec<f64> = p
                .iter()
                .zip(&p1)
                .map(|(&old, &new)| (1.0 - theta) * old + theta * new)
                .collect();
            if objective(&next) > objective(&p) * (1.0 + 1e-9) && theta > 0.5 {
                theta = 0.5;
                continue;
            }
            p = next;
            trace.push(objective(&p));
            continue;
        }

        let mut p1f = p1;
        apply_floor(&mut p1f, opts.floor_rel);
        let p2 = match guard(&p1f).and_then(|_| map(&p1f)) {
            Ok(p2) if finite(&p2) => p2,
            _ => {
                p = p1f;
                trace.push(objective(&p));
                continue;
            }
        };
        evals += 1;
        let r: Vec<f64> = p1f.iter().zip(&p).map(|(a, b)| a - b).collect();
        let v: Vec<f64> = p2
            .iter()
            .zip(&p1f)
            .zip(&p)
            .map(|((c, b), a)| c - 2.0 * b + a)
            .collect();
        let norm = |x: &[f64]| x.iter().map(|y| y * y).sum::<f64>().sqrt();
        let (nr, nv) = (norm(&r), norm(&v));
        let mut next = p2;
        // Leave room for the residual evaluation of the next cycle.
        if nv > 0.0 && nr.is_finite() && nv.is_finite() && evals + 1 < opts.max_iterations {
            let alpha = (-nr / nv).min(-1.0);
            let mut x: Vec<f64> = p
                .iter()
                .zip(&r)
                .zip(&v)
                .map(|((a, b), c)| a - 2.0 * alpha * b + alpha * alpha * c)
                .collect();
            apply_floor(&mut x, opts.floor_rel);
            if finite(&x) && guard(&x).is_ok() {
                if let Ok(fx) = map(&x) {
                    evals += 1;
                    if finite(&fx) && objective(&fx) <= objective(&next) {
                        next = fx;
                    }
                }
            }
        }
        p = next;
        trace.push(objective(&p));
    };

    Ok((
        p,
        FixedPointReport {
            iterations: evals,
            final_residual: residual,
            converged,
            objective_trace: trace,
            damping: theta,
        },
    ))
}

/// [`accelerated_fixed_point`] followed by masking entries at or below
/// `mask_rel · max` to exact zeros.
///
/// Zeroing small entries perturbs the Gram matrices by their square roots,
/// so iteration resumes on the reduced support until nothing new is masked.
/// Zeros are fixed points of each coordinate, hence no floor there.
pub(crate) fn solve_with_masking(
    start: Vec<f64>,
    opts: &FixedPointOptions,
    map: impl Fn(&[f64]) -> Result<Vec<f64>>,
    objective: impl Fn(&[f64]) -> f64,
    guard: impl Fn(&[f64]) -> Result<()>,
    what: &'static str,
) -> Result<(Vec<f64>, FixedPointReport)> {
    let (mut p, mut report) = accelerated_fixed_point(start, opts, &map, &objective, &guard, what)?;
    loop {
        let max = max_of(&p);
        let mut masked = false;
        for x in p.iter_mut() {
            if *x != 0.0 && *x <= opts.mask_rel * max {
                *x = 0.0;
                masked = true;
            }
        }
        let budget = opts.max_iterations.saturating_sub(report.iterations);
        if !masked || !report.converged || budget == 0 {
            return Ok((p, report));
        }
        let stage = FixedPointOptions {
            max_iterations: budget,
            floor_rel: 0.0,
            ..*opts
        };
        let (next, rep) = accelerated_fixed_point(p, &stage, &map, &objective, &guard, what)?;
        p = next;
        report.iterations += rep.iterations;
        report.final_residual = rep.final_residual;
        report.converged = rep.converged;
        report.objective_trace.extend(rep.objective_trace.into_iter().skip(1));
    }
}

/// Solves the per-antenna power fixed point started from the conventional ZF
/// powers, with the acceleration of [`FixedPointOptions::accelerate`].
///
/// Non-convergence is not an error: the report carries `converged = false`.
/// At small Q the fixed point is not unique; the one reached from the ZF
/// start is returned.
pub fn solve_antenna_powers(
    nch: &NormalizedChannel,
    opts: &FixedPointOptions,
) -> Result<(AntennaPowerVector, FixedPointReport)> {
    let (n, k) = (nch.total_antennas(), nch.users());
    if n < k {
        return Err(Error::InsufficientAntennas { active: n, users: k });
    }
    // F(1) is exactly the conventional ZF power profile.
    let start = power_map(nch, &vec![1.0; n])?;
    let guard = |p: &[f64]| {
        let max = max_of(p);
        let active = p.iter().filter(|&&x| x > opts.mask_rel * max).count();
        if active < k {
            return Err(Error::InsufficientAntennas { active, users: k });
        }
        Ok(())
    };
    let (p, report) = solve_with_masking(
        start,
        opts,
        |p| power_map(nch, p),
        objective,
        guard,
        "antenna power fixed point",
    )?;
    // Count the start, which costs one evaluation of the map.
    let report = FixedPointReport { iterations: report.iterations + 1, ..report };
    Ok((AntennaPowerVector::new(p), report))
}
