//! Bit-depth adaptive discrete logistic mixture likelihood and quantized
//! CDF construction for the range coder.
//!
//! A pixel of bit depth b takes integer values in [0, 2^b - 1], normalized
//! to [0, 1] with bin width delta = 1/(2^b - 1). Each channel's PMF is a
//! K-component logistic mixture differenced at half-bin offsets; the first
//! and last bins absorb the tails, so the PMF sums to one over the alphabet.
//! A base PMF evaluated at a larger depth B can be masked and renormalized
//! to a smaller support 2^b, which never increases any surviving symbol's
//! code length.
//!
//! Channel order is fixed (r, g1, g2, b); later channels' mixture means are
//! shifted by linear functions of earlier decoded channels.

use crate::error::{Error, Result};
use crate::raw::RggbPatch;

/// CDF precision in bits; a container-format constant.
pub const CDF_PRECISION: u8 = 16;

/// Scale floor applied by parameter heads.
pub const S_MIN: f64 = 1e-6;

/// Channel indices in coding order.
pub const CH_R: usize = 0;
pub const CH_G1: usize = 1;
pub const CH_G2: usize = 2;
pub const CH_B: usize = 3;

/// Quantization bin width for bit depth b >= 1.
pub fn bin_width(b: u8) -> f64 {
    debug_assert!(b >= 1);
    1.0 / (((1u32 << b) - 1) as f64)
}

/// Normalize an integer sample at bit depth b to [0, 1]. Depth-0 channels
/// are constant zero.
pub fn normalize_sample(v: u16, b: u8) -> f64 {
    if b == 0 {
        0.0
    } else {
        f64::from(v) * bin_width(b)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// sigma(hi) - sigma(lo) for hi >= lo, evaluated without catastrophic
/// cancellation in either tail.
pub fn logistic_cdf_diff(lo: f64, hi: f64) -> f64 {
    debug_assert!(hi >= lo);
    let gap = -(lo - hi).exp_m1(); // 1 - e^{lo-hi}
    if lo >= 0.0 {
        let a = (-lo).exp();
        let b = (-hi).exp();
        a * gap / ((1.0 + a) * (1.0 + b))
    } else if hi <= 0.0 {
        let a = hi.exp();
        let b = lo.exp();
        a * gap / ((1.0 + a) * (1.0 + b))
    } else {
        gap / ((1.0 + (-hi).exp()) * (1.0 + lo.exp()))
    }
}

/// Probability of integer x under one logistic component at bit depth b,
/// with the outermost bins clipped to the tails.
fn component_bin_prob(x: u32, b: u8, mu: f64, s: f64) -> f64 {
    let top = (1u32 << b) - 1;
    let delta = bin_width(b);
    let center = f64::from(x) * delta;
    if x == 0 {
        sigmoid((center + delta / 2.0 - mu) / s)
    } else if x == top {
        sigmoid(-(center - delta / 2.0 - mu) / s)
    } else {
        let lo = (center - delta / 2.0 - mu) / s;
        let hi = (center + delta / 2.0 - mu) / s;
        logistic_cdf_diff(lo, hi)
    }
}

/// Mixture PMF at a single integer x in [0, 2^b - 1].
pub fn logistic_mixture_pmf(x: u32, b: u8, pi: &[f64], mu: &[f64], s: &[f64]) -> f64 {
    debug_assert!(b >= 1, "b = 0 must use the degenerate single-symbol PMF");
    debug_assert!(x < (1u32 << b));
    let mut p = 0.0;
    for k in 0..pi.len() {
        p += pi[k] * component_bin_prob(x, b, mu[k], s[k]);
    }
    p
}

/// Full-alphabet mixture PMF at bit depth b.
pub fn mixture_pmf_vec(b: u8, pi: &[f64], mu: &[f64], s: &[f64]) -> Vec<f64> {
    let n = 1usize << b;
    (0..n as u32)
        .map(|x| logistic_mixture_pmf(x, b, pi, mu, s))
        .collect()
}

/// Mixture CDF at the lower edge of bin x, for x in [0, 2^b]. The edge
/// clipping makes F(0) = 0 and F(2^b) = 1 exactly.
pub fn mixture_lower_cdf(x: u32, b: u8, pi: &[f64], mu: &[f64], s: &[f64]) -> f64 {
    let n = 1u32 << b;
    if x == 0 {
        return 0.0;
    }
    if x >= n {
        return 1.0;
    }
    let delta = bin_width(b);
    let edge = f64::from(x) * delta - delta / 2.0;
    let mut f = 0.0;
    for k in 0..pi.len() {
        f += pi[k] * sigmoid((edge - mu[k]) / s[k]);
    }
    f
}

/// PMF over a pixel alphabet, optionally carrying its quantized CDF.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelPmf {
    probs: Vec<f64>,
}

impl PixelPmf {
    pub fn new(probs: Vec<f64>) -> Self {
        Self { probs }
    }

    pub fn alphabet_size(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn quantize(&self, precision: u8) -> Result<CdfTable> {
        build_cdf_table(&self.probs, precision)
    }
}

/// Mask a base PMF to the support [0, 2^b) and renormalize.
pub fn renormalize_pmf(base: &[f64], b: u8) -> Result<PixelPmf> {
    let n = 1usize << b;
    if n > base.len() {
        return Err(Error::Config(format!(
            "target depth {b} exceeds base alphabet {}",
            base.len()
        )));
    }
    let z: f64 = base[..n].iter().sum();
    if z <= 0.0 {
        return Err(Error::DegenerateSupport);
    }
    Ok(PixelPmf::new(base[..n].iter().map(|&p| p / z).collect()))
}

/// Shift mixture means for `channel` by the already-decoded channels.
/// Observed values are normalized to [0, 1]; the four coupling slots are
/// used positionally: g1 <- r via the r slot, g2 <- g1 via the g1 slot,
/// b <- r via the g2 slot plus the mean of both greens via the b slot.
pub fn autoregressive_means(
    channel: usize,
    base_mu: &[f64],
    couplings: &PixelCouplings<'_>,
    observed: [f64; 3],
) -> Vec<f64> {
    let [x_r, x_g1, x_g2] = observed;
    base_mu
        .iter()
        .enumerate()
        .map(|(k, &mu)| match channel {
            CH_R => mu,
            CH_G1 => mu + couplings.r[k] * x_r,
            CH_G2 => mu + couplings.g1[k] * x_g1,
            CH_B => mu + couplings.g2[k] * x_r + couplings.b[k] * (x_g1 + x_g2) / 2.0,
            _ => unreachable!("channel index out of range"),
        })
        .collect()
}

/// The four coupling slots of one pixel, one coefficient per component.
#[derive(Debug, Clone, Copy)]
pub struct PixelCouplings<'a> {
    pub r: &'a [f64],
    pub g1: &'a [f64],
    pub g2: &'a [f64],
    pub b: &'a [f64],
}

/// Per-pixel, per-channel mixture parameters for a whole patch, laid out
/// as [(pixel, channel, component)].
#[derive(Debug, Clone)]
pub struct MixtureParams {
    components: usize,
    pixels: usize,
    pi: Vec<f64>,
    mu: Vec<f64>,
    s: Vec<f64>,
    beta: Vec<f64>,
}

impl MixtureParams {
    pub fn new(
        components: usize,
        pixels: usize,
        pi: Vec<f64>,
        mu: Vec<f64>,
        s: Vec<f64>,
        beta: Vec<f64>,
    ) -> Result<Self> {
        let n = components * pixels * 4;
        if pi.len() != n || mu.len() != n || s.len() != n || beta.len() != n {
            return Err(Error::Config(format!(
                "mixture parameter arrays must hold {n} entries"
            )));
        }
        let params = Self {
            components,
            pixels,
            pi,
            mu,
            s,
            beta,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        for j in 0..self.pixels {
            for c in 0..4 {
                let sum: f64 = self.pi(j, c).iter().sum();
                if (sum - 1.0).abs() > 1e-6 {
                    return Err(Error::Config(format!(
                        "mixture weights at pixel {j} channel {c} sum to {sum}"
                    )));
                }
            }
        }
        if self.s.iter().any(|&s| s < S_MIN) {
            return Err(Error::Config("mixture scale below floor".into()));
        }
        Ok(())
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn pixels(&self) -> usize {
        self.pixels
    }

    fn slot(&self, pixel: usize, channel: usize) -> std::ops::Range<usize> {
        let start = (pixel * 4 + channel) * self.components;
        start..start + self.components
    }

    pub fn pi(&self, pixel: usize, channel: usize) -> &[f64] {
        &self.pi[self.slot(pixel, channel)]
    }

    pub fn mu(&self, pixel: usize, channel: usize) -> &[f64] {
        &self.mu[self.slot(pixel, channel)]
    }

    pub fn s(&self, pixel: usize, channel: usize) -> &[f64] {
        &self.s[self.slot(pixel, channel)]
    }

    pub fn beta(&self, pixel: usize, channel: usize) -> &[f64] {
        &self.beta[self.slot(pixel, channel)]
    }

    pub fn couplings(&self, pixel: usize) -> PixelCouplings<'_> {
        PixelCouplings {
            r: self.beta(pixel, CH_R),
            g1: self.beta(pixel, CH_G1),
            g2: self.beta(pixel, CH_G2),
            b: self.beta(pixel, CH_B),
        }
    }

    /// Shifted means for one pixel and channel given normalized observed
    /// values of the earlier channels.
    pub fn shifted_mu(&self, pixel: usize, channel: usize, observed: [f64; 3]) -> Vec<f64> {
        autoregressive_means(
            channel,
            self.mu(pixel, channel),
            &self.couplings(pixel),
            observed,
        )
    }
}

/// Total log2 probability of a patch under the channel-autoregressive
/// mixture model. Padded pixels are excluded; depth-0 channels contribute
/// zero bits.
pub fn joint_pixel_logprob(
    patch: &RggbPatch,
    params: &MixtureParams,
    depths: [u8; 4],
) -> Result<f64> {
    let p = patch.patch_size();
    if params.pixels() != p * p {
        return Err(Error::Config(format!(
            "params cover {} pixels, patch has {}",
            params.pixels(),
            p * p
        )));
    }
    let mut total = 0.0;
    for j in 0..p * p {
        if patch.pad_mask()[j] {
            continue;
        }
        let mut observed = [0.0f64; 3];
        for c in 0..4 {
            let v = patch.channel(c)[j];
            let b = depths[c];
            if u32::from(v) >= 1u32 << b {
                return Err(Error::Support(format!(
                    "sample {v} at pixel {j} channel {c} exceeds depth {b}"
                )));
            }
            if b > 0 {
                let mu = params.shifted_mu(j, c, observed);
                let prob =
                    logistic_mixture_pmf(u32::from(v), b, params.pi(j, c), &mu, params.s(j, c));
                total += prob.max(f64::MIN_POSITIVE).log2();
            }
            if c < 3 {
                observed[c] = normalize_sample(v, b);
            }
        }
    }
    Ok(total)
}

/// Integer CDF with total 2^precision and every symbol count >= 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdfTable {
    cum: Vec<u32>,
    precision: u8,
}

impl CdfTable {
    pub fn alphabet_size(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn precision(&self) -> u8 {
        self.precision
    }

    pub fn total(&self) -> u32 {
        1u32 << self.precision
    }

    pub fn bounds(&self, symbol: usize) -> (u32, u32) {
        (self.cum[symbol], self.cum[symbol + 1])
    }

    pub fn cum(&self) -> &[u32] {
        &self.cum
    }

    /// Symbol s with cum[s] <= value < cum[s+1].
    pub fn find(&self, value: u32) -> usize {
        debug_assert!(value < self.total());
        let mut lo = 0usize;
        let mut hi = self.alphabet_size();
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.cum[mid] <= value {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }
}

/// Deterministically quantize a PMF to an integer CDF: round-half-even on
/// scaled probabilities, floor every symbol at one count, then a
/// largest-remainder repair to land exactly on 2^precision.
pub fn build_cdf_table(pmf: &[f64], precision: u8) -> Result<CdfTable> {
    let alphabet = pmf.len();
    let total = 1u64 << precision;
    if alphabet == 0 {
        return Err(Error::Config("empty PMF".into()));
    }
    if alphabet as u64 > total {
        return Err(Error::Precision {
            alphabet,
            precision,
        });
    }
    let scaled: Vec<f64> = pmf.iter().map(|&p| p.max(0.0) * total as f64).collect();
    let mut counts: Vec<u64> = scaled
        .iter()
        .map(|&sc| (sc.round_ties_even() as u64).max(1))
        .collect();
    let mut have: i64 = counts.iter().map(|&c| c as i64).sum();
    let want = total as i64;

    if have != want {
        // Residual of the rounded count against the real-valued target;
        // most-underrepresented first for additions, reversed for removals.
        let mut order: Vec<usize> = (0..alphabet).collect();
        order.sort_by(|&a, &b| {
            let ra = scaled[a] - counts[a] as f64;
            let rb = scaled[b] - counts[b] as f64;
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        if have < want {
            let mut i = 0;
            while have < want {
                counts[order[i % alphabet]] += 1;
                have += 1;
                i += 1;
            }
        } else {
            let mut i = 0;
            while have > want {
                let idx = order[alphabet - 1 - (i % alphabet)];
                if counts[idx] > 1 {
                    counts[idx] -= 1;
                    have -= 1;
                }
                i += 1;
            }
        }
    }

    let mut cum = Vec::with_capacity(alphabet + 1);
    let mut acc = 0u64;
    cum.push(0u32);
    for &c in &counts {
        acc += c;
        cum.push(acc as u32);
    }
    debug_assert_eq!(acc, total);
    Ok(CdfTable { cum, precision })
}

/// Lazily evaluated quantized CDF over a pixel alphabet. Equivalent to a
/// quantized table but computed pointwise, so alphabets up to 2^16 never
/// materialize. cum(x) = x + round_ties_even(G(x) * (2^16 - A)) with G the
/// mixture CDF at bin lower edges, renormalized to the coded support when
/// the conditioning depth exceeds it (support masking).
#[derive(Debug, Clone)]
pub struct LazyMixtureCdf {
    pi: Vec<f64>,
    mu: Vec<f64>,
    s: Vec<f64>,
    base_depth: u8,
    coded_depth: u8,
    mass: f64,
    uniform_fallback: bool,
}

impl LazyMixtureCdf {
    /// `base_depth` is the depth the mixture is evaluated at; `coded_depth`
    /// (<= base) is the transmitted alphabet. If the surviving mass
    /// underflows, coding falls back to a uniform staircase; both sides
    /// compute the same branch deterministically.
    pub fn new(
        pi: Vec<f64>,
        mu: Vec<f64>,
        s: Vec<f64>,
        base_depth: u8,
        coded_depth: u8,
    ) -> Result<Self> {
        if coded_depth > base_depth || base_depth == 0 || base_depth > 16 {
            return Err(Error::Config(format!(
                "invalid depth pair base={base_depth} coded={coded_depth}"
            )));
        }
        let mass = if coded_depth == base_depth {
            1.0
        } else {
            mixture_lower_cdf(1u32 << coded_depth, base_depth, &pi, &mu, &s)
        };
        let uniform_fallback = !(mass > 1e-300);
        Ok(Self {
            pi,
            mu,
            s,
            base_depth,
            coded_depth,
            mass,
            uniform_fallback,
        })
    }

    pub fn alphabet_size(&self) -> u32 {
        1u32 << self.coded_depth
    }

    fn g(&self, x: u32) -> f64 {
        let n = self.alphabet_size();
        if x == 0 {
            return 0.0;
        }
        if x >= n {
            return 1.0;
        }
        if self.uniform_fallback {
            return f64::from(x) / f64::from(n);
        }
        mixture_lower_cdf(x, self.base_depth, &self.pi, &self.mu, &self.s) / self.mass
    }

    /// Quantized cumulative count at symbol boundary x in [0, A].
    pub fn cum(&self, x: u32) -> u32 {
        let span = (1u64 << CDF_PRECISION) - u64::from(self.alphabet_size());
        x + (self.g(x) * span as f64).round_ties_even() as u32
    }

    pub fn bounds(&self, symbol: u32) -> (u32, u32) {
        (self.cum(symbol), self.cum(symbol + 1))
    }

    /// Symbol s with cum(s) <= value < cum(s+1), by bisection.
    pub fn find(&self, value: u32) -> u32 {
        let mut lo = 0u32;
        let mut hi = self.alphabet_size();
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if self.cum(mid) <= value {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }
}
