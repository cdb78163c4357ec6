//! Static configuration and second-order channel statistics.
//!
//! AP sites sit at the cell centres of a regular `√G × √G` partition of the
//! square deployment area (`G = grid_points`). With a 1 km side and 16 sites
//! the spacing is 250 m and the coordinates are `{125, 375, 625, 875}²`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Maximum number of redraws when placing a single user.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

/// Eigenvalues of a correlation matrix below this are clamped to zero.
pub const EIGEN_CLAMP: f64 = 1e-12;

/// Noise power of -96 dBm expressed in Watts.
pub const DEFAULT_NOISE_POWER: f64 = 2.511_886_431_509_582e-13;

/// Static system configuration. Powers are in Watts, dB quantities carry a
/// `_db` suffix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    /// Number of APs (L).
    pub aps: usize,
    /// Antennas per AP (M_l), one entry per AP.
    pub antennas: Vec<usize>,
    /// Number of single-antenna users (K).
    pub users: usize,
    /// Number of OFDM subcarriers (Q).
    pub subcarriers: usize,
    /// Noise power per subcarrier, σ².
    pub noise_power: f64,
    /// Range of the uniformly drawn target SNRs.
    pub target_snr_range_db: [f64; 2],
    /// Maximal PA output power.
    pub pa_max_power: f64,
    /// PA efficiency at saturation.
    pub pa_max_efficiency: f64,
    /// Fixed consumption of an active AP.
    pub p_fix: f64,
    /// Circuit consumption per active antenna.
    pub p_circuit: f64,
    /// Exponential correlation coefficient between adjacent antennas.
    pub corr_coeff: f64,
    /// Side of the square deployment area in meters.
    pub area_side: f64,
    /// Number of candidate AP sites; must be a perfect square.
    pub grid_points: usize,
    pub min_user_ap_distance: f64,
    pub shadow_std_db: f64,
    /// An AP is active when its power exceeds this fraction of the largest AP power.
    pub activation_threshold_rel: f64,
    pub rng_seed: u64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            aps: 8,
            antennas: vec![8; 8],
            users: 8,
            subcarriers: 256,
            noise_power: DEFAULT_NOISE_POWER,
            target_snr_range_db: [1.0, 20.0],
            pa_max_power: 3.0,
            pa_max_efficiency: 0.34,
            p_fix: 15.0,
            p_circuit: 0.7,
            corr_coeff: 0.7,
            area_side: 1000.0,
            grid_points: 16,
            min_user_ap_distance: 10.0,
            shadow_std_db: 4.0,
            activation_threshold_rel: 1e-6,
            rng_seed: 0,
        }
    }
}

impl SystemConfig {
    /// Returns a copy with `aps` APs of `antennas_per_ap` antennas each.
    pub fn with_aps(&self, aps: usize, antennas_per_ap: usize) -> Self {
        Self {
            aps,
            antennas: vec![antennas_per_ap; aps],
            ..self.clone()
        }
    }

    pub fn with_users(&self, users: usize) -> Self {
        Self {
            users,
            ..self.clone()
        }
    }

    pub fn with_subcarriers(&self, subcarriers: usize) -> Self {
        Self {
            subcarriers,
            ..self.clone()
        }
    }

    /// Total antenna count N.
    pub fn total_antennas(&self) -> usize {
        self.antennas.iter().sum()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.aps == 0 || self.users == 0 || self.subcarriers == 0 {
            return fail("aps, users and subcarriers must be at least 1".into());
        }
        if self.antennas.len() != self.aps {
            return fail(format!(
                "antennas lists {} entries for {} APs",
                self.antennas.len(),
                self.aps
            ));
        }
        if self.antennas.iter().any(|&m| m == 0) {
            return fail("every AP needs at least one antenna".into());
        }
        if self.total_antennas() < self.users {
            return fail(format!(
                "{} antennas cannot zero-force {} users",
                self.total_antennas(),
                self.users
            ));
        }
        if i64::try_from(self.rng_seed).is_err() {
            return fail("rng_seed must fit in a signed 64-bit TOML integer".into());
        }
        if !(self.noise_power > 0.0) {
            return fail("noise_power must be positive".into());
        }
        if !(self.pa_max_efficiency > 0.0 && self.pa_max_efficiency <= 1.0) {
            return fail("pa_max_efficiency must lie in (0, 1]".into());
        }
        if !(self.pa_max_power > 0.0) {
            return fail("pa_max_power must be positive".into());
        }
        if !(0.0..1.0).contains(&self.corr_coeff) {
            return fail("corr_coeff must lie in [0, 1)".into());
        }
        let [lo, hi] = self.target_snr_range_db;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return fail("target_snr_range_db must be an ordered finite pair".into());
        }
        if !(self.area_side > 0.0) || self.min_user_ap_distance < 0.0 || self.shadow_std_db < 0.0 {
            return fail("geometry parameters must be non-negative".into());
        }
        if self.p_fix < 0.0 || self.p_circuit < 0.0 || self.activation_threshold_rel < 0.0 {
            return fail("consumption constants must be non-negative".into());
        }
        Ok(())
    }
}

/// Random stream for realization `index` of a run seeded with `seed`.
///
/// Streams are independent per index so realizations can be evaluated in
/// any order or in parallel and still match a serial run.
pub fn realization_rng(seed: u64, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub ap_positions: Vec<[f64; 2]>,
    pub user_positions: Vec<[f64; 2]>,
}

impl Geometry {
    pub fn distance(&self, user: usize, ap: usize) -> f64 {
        distance(self.user_positions[user], self.ap_positions[ap])
    }
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Candidate AP sites: centres of a regular partition of the square area.
pub fn grid_sites(area_side: f64, grid_points: usize) -> Result<Vec<[f64; 2]>> {
    let side = (grid_points as f64).sqrt().round() as usize;
    if side == 0 || side * side != grid_points {
        return Err(Error::Config(format!(
            "grid_points = {grid_points} is not a perfect square"
        )));
    }
    let spacing = area_side / side as f64;
    let mut sites = Vec::with_capacity(grid_points);
    for row in 0..side {
        for col in 0..side {
            sites.push([
                (col as f64 + 0.5) * spacing,
                (row as f64 + 0.5) * spacing,
            ]);
        }
    }
    Ok(sites)
}

/// Places the APs on distinct random grid sites and drops users uniformly,
/// redrawing any user closer than `min_user_ap_distance` to an AP.
pub fn generate_geometry<R: Rng + ?Sized>(cfg: &SystemConfig, rng: &mut R) -> Result<Geometry> {
    let sites = grid_sites(cfg.area_side, cfg.grid_points)?;
    if cfg.aps > sites.len() {
        return Err(Error::Config(format!(
            "{} APs do not fit on {} grid sites",
            cfg.aps,
            sites.len()
        )));
    }
    let ap_positions: Vec<[f64; 2]> = index::sample(rng, sites.len(), cfg.aps)
        .into_iter()
        .map(|i| sites[i])
        .collect();

    let mut user_positions = Vec::with_capacity(cfg.users);
    for user in 0..cfg.users {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let candidate = [
                rng.gen::<f64>() * cfg.area_side,
                rng.gen::<f64>() * cfg.area_side,
            ];
            if ap_positions
                .iter()
                .all(|&ap| distance(candidate, ap) >= cfg.min_user_ap_distance)
            {
                placed = Some(candidate);
                break;
            }
        }
        match placed {
            Some(pos) => user_positions.push(pos),
            None => {
                return Err(Error::Placement {
                    user,
                    attempts: MAX_PLACEMENT_ATTEMPTS,
                })
            }
        }
    }
    Ok(Geometry {
        ap_positions,
        user_positions,
    })
}

/// Distance-dependent path loss in dB, without shadowing.
pub fn pathloss_db(distance_m: f64) -> f64 {
    -30.5 - 37.6 * distance_m.log10()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LargeScale {
    /// K×L linear large-scale fading coefficients.
    pub beta: DMatrix<f64>,
    /// K×L shadow fading draws in dB.
    pub shadow_db: DMatrix<f64>,
}

pub fn compute_lsf<R: Rng + ?Sized>(
    geom: &Geometry,
    cfg: &SystemConfig,
    rng: &mut R,
) -> Result<LargeScale> {
    let users = geom.user_positions.len();
    let aps = geom.ap_positions.len();
    let shadow = Normal::new(0.0, cfg.shadow_std_db)
        .map_err(|e| Error::Config(format!("shadow_std_db: {e}")))?;
    let mut beta = DMatrix::zeros(users, aps);
    let mut shadow_db = DMatrix::zeros(users, aps);
    for k in 0..users {
        for l in 0..aps {
            let d = geom.distance(k, l);
            if !(d > 0.0) {
                return Err(Error::ZeroDistance { user: k, ap: l });
            }
            let f = shadow.sample(rng);
            shadow_db[(k, l)] = f;
            beta[(k, l)] = 10f64.powf((pathloss_db(d) + f) / 10.0);
        }
    }
    Ok(LargeScale { beta, shadow_db })
}

/// `[C]_{i,j} = rho^|i-j|`.
pub fn exponential_correlation(m: usize, rho: f64) -> Result<DMatrix<f64>> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!(
            "correlation coefficient {rho} outside [0, 1)"
        )));
    }
    Ok(DMatrix::from_fn(m, m, |i, j| rho.powi(i.abs_diff(j) as i32)))
}

/// Per-AP antenna correlation matrices with their spectra and square roots.
#[derive(Debug, Clone)]
pub struct CorrelationSet {
    pub c_ap: Vec<DMatrix<f64>>,
    /// Eigenvalues ξ_{l,m}, clamped to be non-negative.
    pub eigenvalues: Vec<DVector<f64>>,
    /// Hermitian square roots C_{AP,l}^{1/2}.
    pub sqrt: Vec<DMatrix<f64>>,
}

impl CorrelationSet {
    pub fn exponential(antennas: &[usize], rho: f64) -> Result<Self> {
        let mats = antennas
            .iter()
            .map(|&m| exponential_correlation(m, rho))
            .collect::<Result<Vec<_>>>()?;
        Self::from_matrices(mats)
    }

    pub fn identity(antennas: &[usize]) -> Self {
        Self::from_matrices(antennas.iter().map(|&m| DMatrix::identity(m, m)).collect())
            .expect("identity is a valid correlation matrix")
    }

    /// Validates symmetry, unit diagonal and positive semi-definiteness.
    pub fn from_matrices(c_ap: Vec<DMatrix<f64>>) -> Result<Self> {
        let mut eigenvalues = Vec::with_capacity(c_ap.len());
        let mut sqrt = Vec::with_capacity(c_ap.len());
        for (ap, c) in c_ap.iter().enumerate() {
            let bad = |reason: String| Error::Correlation { ap, reason };
            if !c.is_square() || c.nrows() == 0 {
                return Err(bad("not a non-empty square matrix".into()));
            }
            let asym = (c - c.transpose()).amax();
            if asym > 1e-12 * c.amax().max(1.0) {
                return Err(bad(format!("not symmetric (deviation {asym:e})")));
            }
            if c.diagonal().iter().any(|&d| (d - 1.0).abs() > 1e-12) {
                return Err(bad("diagonal is not all ones".into()));
            }
            let eig = SymmetricEigen::new(c.clone());
            let max = eig.eigenvalues.amax();
            let min = eig.eigenvalues.min();
            if min < -1e-10 * max.max(1.0) {
                return Err(bad(format!("negative eigenvalue {min:e}")));
            }
            let xi = eig.eigenvalues.map(|v| if v < EIGEN_CLAMP { 0.0 } else { v });
            let root = &eig.eigenvectors
                * DMatrix::from_diagonal(&xi.map(f64::sqrt))
                * eig.eigenvectors.transpose();
            eigenvalues.push(xi);
            sqrt.push(root);
        }
        Ok(Self {
            c_ap,
            eigenvalues,
            sqrt,
        })
    }

    pub fn antennas(&self) -> Vec<usize> {
        self.c_ap.iter().map(|c| c.nrows()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetProfile {
    /// Linear target SNRs γ_k.
    pub gamma: Vec<f64>,
    /// γ_k / Q, the per-subcarrier share of each target.
    pub d_tilde_gamma: Vec<f64>,
}

impl TargetProfile {
    pub fn from_linear(gamma: Vec<f64>, subcarriers: usize) -> Result<Self> {
        if subcarriers == 0 {
            return Err(Error::InvalidArgument("subcarrier count is zero".into()));
        }
        if gamma.iter().any(|&g| !(g > 0.0 && g.is_finite())) {
            return Err(Error::InvalidArgument("target SNRs must be positive".into()));
        }
        let d_tilde_gamma = gamma.iter().map(|g| g / subcarriers as f64).collect();
        Ok(Self {
            gamma,
            d_tilde_gamma,
        })
    }

    pub fn subcarriers(&self) -> usize {
        (self.gamma[0] / self.d_tilde_gamma[0]).round() as usize
    }

    /// Same targets re-split over a different number of subcarriers.
    pub fn with_subcarriers(&self, subcarriers: usize) -> Result<Self> {
        Self::from_linear(self.gamma.clone(), subcarriers)
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn draw_targets<R: Rng + ?Sized>(cfg: &SystemConfig, rng: &mut R) -> Result<TargetProfile> {
    let [lo, hi] = cfg.target_snr_range_db;
    let gamma = (0..cfg.users)
        .map(|_| {
            let u = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            db_to_linear(u)
        })
        .collect();
    TargetProfile::from_linear(gamma, cfg.subcarriers)
}

/// Everything the CU knows from second-order statistics for one drop.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: SystemConfig,
    pub geometry: Geometry,
    pub large_scale: LargeScale,
    pub correlation: CorrelationSet,
    pub targets: TargetProfile,
}

impl Scenario {
    /// Draws geometry, large-scale fading and targets, in that order.
    pub fn draw<R: Rng + ?Sized>(cfg: &SystemConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let geometry = generate_geometry(cfg, rng)?;
        let large_scale = compute_lsf(&geometry, cfg, rng)?;
        let targets = draw_targets(cfg, rng)?;
        let correlation = CorrelationSet::exponential(&cfg.antennas, cfg.corr_coeff)?;
        Ok(Self {
            config: cfg.clone(),
            geometry,
            large_scale,
            correlation,
            targets,
        })
    }
}
