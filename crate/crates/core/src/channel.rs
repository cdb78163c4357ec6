//! Per-AP Kronecker channel synthesis.
//!
//! The channel of AP `l` at subcarrier `q` is
//! `H_{l,q} = D_{β,l}^{1/2} G_{l,q} C_{AP,l}^{1/2}` with i.i.d. CN(0, 1)
//! small-scale fading, drawn independently per AP and per subcarrier. The
//! aggregated `K×N` matrix concatenates the AP blocks in AP order.
//!
//! # Binary dump layout
//!
//! All integers are little-endian `u32`:
//!
//! ```text
//! magic "CFCH" | version (1) | K | L | Q | M_0 .. M_{L-1}
//! for q in 0..Q, for l in 0..L: K×M_l entries row-major, each (re: f32, im: f32)
//! ```

use std::io::{Read, Write};
use std::ops::Range;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::scenario::{CorrelationSet, TargetProfile};
use crate::{CMatrix, Error, Result, C64};

/// Smallest-to-largest singular value ratio below which `H_q` is treated as
/// rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Bounded redraws of a rank-deficient subcarrier before giving up.
const MAX_RANK_REDRAWS: usize = 100;

const MAGIC: &[u8; 4] = b"CFCH";
const DUMP_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct ChannelRealization {
    antennas: Vec<usize>,
    offsets: Vec<usize>,
    h: Vec<CMatrix>,
    beta: Option<DMatrix<f64>>,
    redraws: usize,
}

fn offsets_of(antennas: &[usize]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(antennas.len() + 1);
    let mut acc = 0;
    offsets.push(0);
    for &m in antennas {
        acc += m;
        offsets.push(acc);
    }
    offsets
}

impl ChannelRealization {
    /// Wraps already aggregated `K×N` matrices, one per subcarrier.
    pub fn from_matrices(antennas: Vec<usize>, h: Vec<CMatrix>) -> Result<Self> {
        let n: usize = antennas.iter().sum();
        let Some(first) = h.first() else {
            return Err(Error::Dimension("no subcarriers".into()));
        };
        let k = first.nrows();
        if h.iter().any(|m| m.nrows() != k || m.ncols() != n) {
            return Err(Error::Dimension(format!(
                "every subcarrier matrix must be {k}×{n}"
            )));
        }
        Ok(Self {
            offsets: offsets_of(&antennas),
            antennas,
            h,
            beta: None,
            redraws: 0,
        })
    }

    /// Builds the channel from explicit small-scale fading `fading[q][l]`
    /// (each `K×M_l`).
    pub fn from_kronecker(
        beta: &DMatrix<f64>,
        corr: &CorrelationSet,
        fading: &[Vec<CMatrix>],
    ) -> Result<Self> {
        let antennas = corr.antennas();
        let k = beta.nrows();
        if beta.ncols() != antennas.len() {
            return Err(Error::Dimension(format!(
                "beta has {} AP columns, correlation set has {} APs",
                beta.ncols(),
                antennas.len()
            )));
        }
        let h = fading
            .iter()
            .map(|blocks| kronecker_subcarrier(beta, corr, blocks))
            .collect::<Result<Vec<_>>>()?;
        let mut ch = Self::from_matrices(antennas, h)?;
        if ch.users() != k {
            return Err(Error::Dimension("fading rows differ from user count".into()));
        }
        ch.beta = Some(beta.clone());
        Ok(ch)
    }

    pub fn users(&self) -> usize {
        self.h[0].nrows()
    }

    pub fn subcarriers(&self) -> usize {
        self.h.len()
    }

    pub fn total_antennas(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn antennas(&self) -> &[usize] {
        &self.antennas
    }

    pub fn aps(&self) -> usize {
        self.antennas.len()
    }

    /// Column range of AP `l` inside the aggregated matrix.
    pub fn ap_range(&self, l: usize) -> Range<usize> {
        self.offsets[l]..self.offsets[l + 1]
    }

    pub fn aggregated(&self, q: usize) -> &CMatrix {
        &self.h[q]
    }

    pub fn aggregated_all(&self) -> &[CMatrix] {
        &self.h
    }

    pub fn per_ap(&self, q: usize, l: usize) -> CMatrix {
        let r = self.ap_range(l);
        self.h[q].columns(r.start, r.len()).into_owned()
    }

    pub fn beta(&self) -> Option<&DMatrix<f64>> {
        self.beta.as_ref()
    }

    /// Number of rank-deficient subcarriers that were redrawn.
    pub fn redraws(&self) -> usize {
        self.redraws
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MAGIC)?;
        let header = [
            DUMP_VERSION,
            self.users() as u32,
            self.aps() as u32,
            self.subcarriers() as u32,
        ];
        for v in header.iter().chain(self.antennas.iter().map(|&m| m as u32).collect::<Vec<_>>().iter()) {
            out.write_all(&v.to_le_bytes())?;
        }
        for q in 0..self.subcarriers() {
            for l in 0..self.aps() {
                let block = self.per_ap(q, l);
                for i in 0..block.nrows() {
                    for j in 0..block.ncols() {
                        let z = block[(i, j)];
                        out.write_all(&(z.re as f32).to_le_bytes())?;
                        out.write_all(&(z.im as f32).to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let mut word = || -> Result<u32> {
            let mut b = [0u8; 4];
            input.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        };
        let version = word()?;
        if version != DUMP_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let (k, l, q) = (word()? as usize, word()? as usize, word()? as usize);
        if k == 0 || l == 0 || q == 0 {
            return Err(Error::Format("zero dimension in header".into()));
        }
        let antennas = (0..l).map(|_| word().map(|m| m as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = antennas.iter().sum();
        let mut h = Vec::with_capacity(q);
        for _ in 0..q {
            let mut m = CMatrix::zeros(k, n);
            let mut col0 = 0;
            for &ml in &antennas {
                for i in 0..k {
                    for j in 0..ml {
                        let re = f32::from_le_bytes(word()?.to_le_bytes());
                        let im = f32::from_le_bytes(word()?.to_le_bytes());
                        m[(i, col0 + j)] = C64::new(re as f64, im as f64);
                    }
                }
                col0 += ml;
            }
            h.push(m);
        }
        Self::from_matrices(antennas, h)
    }
}

fn kronecker_subcarrier(
    beta: &DMatrix<f64>,
    corr: &CorrelationSet,
    blocks: &[CMatrix],
) -> Result<CMatrix> {
    let k = beta.nrows();
    if blocks.len() != corr.sqrt.len() {
        return Err(Error::Dimension("one fading block per AP expected".into()));
    }
    let n: usize = corr.antennas().iter().sum();
    let mut h = CMatrix::zeros(k, n);
    let mut col0 = 0;
    for (l, (g, root)) in blocks.iter().zip(&corr.sqrt).enumerate() {
        let m = root.nrows();
        if g.nrows() != k || g.ncols() != m {
            return Err(Error::Dimension(format!("fading block of AP {l} must be {k}×{m}")));
        }
        let root_c = root.map(|v| C64::new(v, 0.0));
        let mut block = g * root_c;
        for (i, mut row) in block.row_iter_mut().enumerate() {
            row *= C64::new(beta[(i, l)].sqrt(), 0.0);
        }
        h.columns_mut(col0, m).copy_from(&block);
        col0 += m;
    }
    Ok(h)
}

/// `rows×cols` matrix of i.i.d. CN(0, 1) entries.
pub fn standard_complex_gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> CMatrix {
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    let mut m = CMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            m[(i, j)] = C64::new(re * scale, im * scale);
        }
    }
    m
}

/// `σ_min(H) > RANK_TOLERANCE · σ_max(H)`.
pub fn has_full_row_rank(h: &CMatrix) -> bool {
    if h.nrows() > h.ncols() {
        return false;
    }
    let sv = h.clone().svd(false, false).singular_values;
    let max = sv.max();
    max > 0.0 && sv.min() > RANK_TOLERANCE * max
}

/// Draws `q_count` independent subcarriers of the per-AP Kronecker channel.
/// Rank-deficient subcarriers are redrawn and counted.
pub fn draw_channel<R: Rng + ?Sized>(
    beta: &DMatrix<f64>,
    corr: &CorrelationSet,
    q_count: usize,
    rng: &mut R,
) -> Result<ChannelRealization> {
    let k = beta.nrows();
    let antennas = corr.antennas();
    if beta.ncols() != antennas.len() {
        return Err(Error::Dimension("beta columns must match the AP count".into()));
    }
    let mut h = Vec::with_capacity(q_count);
    let mut redraws = 0;
    for _ in 0..q_count {
        let mut attempt = 0;
        loop {
            let blocks: Vec<CMatrix> = antennas
                .iter()
                .map(|&m| standard_complex_gaussian(k, m, rng))
                .collect();
            let hq = kronecker_subcarrier(beta, corr, &blocks)?;
            if has_full_row_rank(&hq) {
                h.push(hq);
                break;
            }
            redraws += 1;
            attempt += 1;
            if attempt >= MAX_RANK_REDRAWS {
                return Err(Error::Singular { q: h.len() });
            }
        }
    }
    let mut ch = ChannelRealization::from_matrices(antennas, h)?;
    ch.beta = Some(beta.clone());
    ch.redraws = redraws;
    Ok(ch)
}

/// Channel normalised by the noise level and the per-subcarrier targets.
#[derive(Debug, Clone)]
pub struct NormalizedChannel {
    /// `H̃_q = σ^{-1} D̃_γ^{-1/2} H_q`.
    pub h_tilde: Vec<CMatrix>,
    /// `d_norm[l][k] = β_{k,l} / (σ² γ_k / Q)`, empty when the realization
    /// carries no large-scale coefficients.
    pub d_norm: Vec<Vec<f64>>,
    pub antennas: Vec<usize>,
}

impl NormalizedChannel {
    pub fn users(&self) -> usize {
        self.h_tilde[0].nrows()
    }

    pub fn total_antennas(&self) -> usize {
        self.h_tilde[0].ncols()
    }

    pub fn subcarriers(&self) -> usize {
        self.h_tilde.len()
    }
}

pub fn normalize(
    ch: &ChannelRealization,
    targets: &TargetProfile,
    noise_power: f64,
) -> Result<NormalizedChannel> {
    if !(noise_power > 0.0) {
        return Err(Error::InvalidArgument("noise power must be positive".into()));
    }
    let k = ch.users();
    if targets.gamma.len() != k {
        return Err(Error::Dimension(format!(
            "{} targets for {k} users",
            targets.gamma.len()
        )));
    }
    if targets.d_tilde_gamma.iter().any(|&g| !(g > 0.0)) {
        return Err(Error::InvalidArgument("target SNRs must be positive".into()));
    }
    let sigma = noise_power.sqrt();
    let row_scale: Vec<f64> = targets
        .d_tilde_gamma
        .iter()
        .map(|&g| 1.0 / (sigma * g.sqrt()))
        .collect();
    let h_tilde = ch
        .aggregated_all()
        .iter()
        .map(|h| {
            let mut m = h.clone();
            for (mut row, &s) in m.row_iter_mut().zip(&row_scale) {
                row *= C64::new(s, 0.0);
            }
            m
        })
        .collect();
    let d_norm = match ch.beta() {
        Some(beta) => (0..ch.aps())
            .map(|l| {
                (0..k)
                    .map(|u| beta[(u, l)] / (noise_power * targets.d_tilde_gamma[u]))
                    .collect()
            })
            .collect(),
        None => Vec::new(),
    };
    Ok(NormalizedChannel {
        h_tilde,
        d_norm,
        antennas: ch.antennas().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{realization_rng, CorrelationSet};
    use approx::assert_relative_eq;

    #[test]
    fn identity_statistics_give_unit_variance() {
        let beta = DMatrix::from_element(4, 1, 1.0);
        let corr = CorrelationSet::identity(&[4]);
        let ch = draw_channel(&beta, &corr, 625, &mut realization_rng(1, 0)).unwrap();
        let n = (625 * 16) as f64;
        let var: f64 = ch.aggregated_all().iter().flat_map(|h| h.iter()).map(|z| z.norm_sqr()).sum::<f64>() / n;
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn beta_scales_row_power() {
        let beta = DMatrix::from_element(3, 2, 4.0);
        let corr = CorrelationSet::identity(&[2, 3]);
        let ch = draw_channel(&beta, &corr, 2000, &mut realization_rng(2, 0)).unwrap();
        for k in 0..3 {
            let p: f64 = ch.aggregated_all().iter().map(|h| h.row(k).norm_squared()).sum::<f64>()
                / (2000.0 * 5.0);
            assert!((p - 4.0).abs() < 0.2, "row {k}: {p}");
        }
    }

    #[test]
    fn correlation_shows_in_second_moment() {
        let corr = CorrelationSet::exponential(&[2], 0.7).unwrap();
        let beta = DMatrix::from_element(2, 1, 1.0);
        let ch = draw_channel(&beta, &corr, 5000, &mut realization_rng(3, 0)).unwrap();
        let mut acc = CMatrix::zeros(2, 2);
        for h in ch.aggregated_all() {
            acc += h.adjoint() * h;
        }
        let est = acc / C64::new((5000 * 2) as f64, 0.0);
        for i in 0..2 {
            for j in 0..2 {
                let expected = corr.c_ap[0][(i, j)];
                assert!((est[(i, j)].re - expected).abs() < 0.05 * expected.max(0.7));
                assert!(est[(i, j)].im.abs() < 0.05);
            }
        }
    }

    #[test]
    fn blocks_match_aggregate() {
        let beta = DMatrix::from_fn(3, 2, |i, j| 1.0 + (i + 2 * j) as f64);
        let corr = CorrelationSet::exponential(&[2, 4], 0.5).unwrap();
        let mut rng = realization_rng(5, 0);
        let fading: Vec<Vec<CMatrix>> = (0..3)
            .map(|_| vec![standard_complex_gaussian(3, 2, &mut rng), standard_complex_gaussian(3, 4, &mut rng)])
            .collect();
        let ch = ChannelRealization::from_kronecker(&beta, &corr, &fading).unwrap();
        for q in 0..3 {
            for l in 0..2 {
                let expected = {
                    let mut b = &fading[q][l] * corr.sqrt[l].map(|v| C64::new(v, 0.0));
                    for (i, mut row) in b.row_iter_mut().enumerate() {
                        row *= C64::new(beta[(i, l)].sqrt(), 0.0);
                    }
                    b
                };
                assert_eq!(ch.per_ap(q, l), expected);
                let r = ch.ap_range(l);
                assert_eq!(ch.aggregated(q).columns(r.start, r.len()), expected.columns(0, r.len()));
            }
        }
    }

    #[test]
    fn normalisation_examples() {
        let h = CMatrix::from_row_slice(1, 2, &[C64::new(2.0, 1.0), C64::new(-4.0, 0.5)]);
        let ch = ChannelRealization::from_matrices(vec![2], vec![h.clone()]).unwrap();
        let t = TargetProfile::from_linear(vec![1.0], 1).unwrap();
        let n = normalize(&ch, &t, 1.0).unwrap();
        assert_eq!(n.h_tilde[0], h);
        let t = TargetProfile::from_linear(vec![4.0], 1).unwrap();
        let n = normalize(&ch, &t, 1.0).unwrap();
        assert!((&n.h_tilde[0] - &h / C64::new(2.0, 0.0)).camax() < 1e-15);
        assert!(normalize(&ch, &t, 0.0).is_err());
    }

    #[test]
    fn normalised_weights_recover_beta() {
        let beta = DMatrix::from_fn(3, 2, |i, j| 1e-11 * (1.0 + i as f64 + 3.0 * j as f64));
        let corr = CorrelationSet::identity(&[2, 2]);
        let ch = draw_channel(&beta, &corr, 4, &mut realization_rng(0, 0)).unwrap();
        let t = TargetProfile::from_linear(vec![3.0, 10.0, 50.0], 4).unwrap();
        let sigma2 = 2.5e-13;
        let n = normalize(&ch, &t, sigma2).unwrap();
        for l in 0..2 {
            for k in 0..3 {
                assert_relative_eq!(n.d_norm[l][k] * sigma2 * t.d_tilde_gamma[k], beta[(k, l)], max_relative = 1e-15);
            }
        }
        for q in 0..4 {
            for k in 0..3 {
                let s = 1.0 / (sigma2.sqrt() * t.d_tilde_gamma[k].sqrt());
                let diff = (n.h_tilde[q].row(k) - ch.aggregated(q).row(k) * C64::new(s, 0.0)).camax();
                assert!(diff <= 1e-12 * n.h_tilde[q].row(k).camax());
            }
        }
    }

    #[test]
    fn rank_check() {
        let h = CMatrix::from_row_slice(2, 2, &[C64::new(1.0, 0.0), C64::new(2.0, 0.0), C64::new(2.0, 0.0), C64::new(4.0, 0.0)]);
        assert!(!has_full_row_rank(&h));
        assert!(has_full_row_rank(&CMatrix::identity(2, 3)));
        assert!(!has_full_row_rank(&CMatrix::identity(3, 2)));
    }

    #[test]
    fn dump_round_trip_is_f32_exact() {
        let beta = DMatrix::from_element(2, 2, 1.0);
        let corr = CorrelationSet::exponential(&[3, 1], 0.7).unwrap();
        let ch = draw_channel(&beta, &corr, 3, &mut realization_rng(7, 0)).unwrap();
        let mut buf = Vec::new();
        ch.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 4 * (4 + 2) + 3 * 2 * 4 * 8);
        let back = ChannelRealization::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.antennas(), ch.antennas());
        for q in 0..3 {
            for (a, b) in back.aggregated(q).iter().zip(ch.aggregated(q).iter()) {
                assert_eq!(a.re, b.re as f32 as f64);
                assert_eq!(a.im, b.im as f32 as f64);
            }
        }
        assert!(ChannelRealization::read_from(&buf[..10]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(ChannelRealization::read_from(bad.as_slice()), Err(Error::Format(_))));
    }
}
