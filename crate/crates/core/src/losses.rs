//! Objective terms: windowed normalized cross-correlation, cycle L1,
//! binary cross-entropy on logits, and the combined generator objective.
//!
//! Every reduction is a mean, so `lambda_adv` does not depend on patch size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;
use crate::volio::{voxel_count, Dims, Volume};
use crate::warp::{warp_backward, warp_forward};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Odd NCC window edge in voxels.
    pub ncc_window: usize,
    pub lambda_adv: f64,
    /// Per-voxel variance floor inside each NCC window.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            ncc_window: 9,
            lambda_adv: 0.1,
            epsilon: 1e-5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ncc_window < 3 || self.ncc_window % 2 == 0 {
            return Err(Error::Config(format!(
                "ncc_window must be odd and >= 3, got {}",
                self.ncc_window
            )));
        }
        if !(self.lambda_adv >= 0.0 && self.lambda_adv.is_finite()) {
            return Err(Error::Config(format!(
                "lambda_adv must be finite and >= 0, got {}",
                self.lambda_adv
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config("epsilon must be finite and > 0".into()));
        }
        Ok(())
    }
}

/// Sum over the window `[i - r, i + r]` clipped to the grid, for every voxel.
pub fn box_sum<T: Real>(data: &[T], dims: Dims, r: usize) -> Vec<T> {
    let mut cur = data.to_vec();
    let mut prefix = Vec::new();
    for axis in 0..3 {
        let n = dims[axis];
        let inner: usize = dims[..axis].iter().product();
        let outer: usize = dims[axis + 1..].iter().product();
        let mut next = vec![T::zero(); cur.len()];
        prefix.resize(n + 1, T::zero());
        for o in 0..outer {
            for x in 0..inner {
                let at = |m: usize| (o * n + m) * inner + x;
                prefix[0] = T::zero();
                for m in 0..n {
                    prefix[m + 1] = prefix[m] + cur[at(m)];
                }
                for m in 0..n {
                    let lo = m.saturating_sub(r);
                    let hi = (m + r + 1).min(n);
                    next[at(m)] = prefix[hi] - prefix[lo];
                }
            }
        }
        cur = next;
    }
    cur
}

fn window_counts(dims: Dims, r: usize) -> Vec<usize> {
    let len = |m: usize, n: usize| (m + r + 1).min(n) - m.saturating_sub(r);
    let mut out = Vec::with_capacity(voxel_count(dims));
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                out.push(len(i, dims[0]) * len(j, dims[1]) * len(k, dims[2]));
            }
        }
    }
    out
}

struct WindowStats<T> {
    counts: Vec<usize>,
    sa: Vec<T>,
    sb: Vec<T>,
    saa: Vec<T>,
    sbb: Vec<T>,
    sab: Vec<T>,
}

impl<T: Real> WindowStats<T> {
    fn new(a: &[T], b: &[T], dims: Dims, r: usize) -> Self {
        let sq = |x: &[T]| x.iter().map(|&v| v * v).collect::<Vec<_>>();
        let ab: Vec<T> = a.iter().zip(b).map(|(&x, &y)| x * y).collect();
        Self {
            counts: window_counts(dims, r),
            sa: box_sum(a, dims, r),
            sb: box_sum(b, dims, r),
            saa: box_sum(&sq(a), dims, r),
            sbb: box_sum(&sq(b), dims, r),
            sab: box_sum(&ab, dims, r),
        }
    }
}

fn check_len<T>(a: &[T], b: &[T], dims: Dims) -> Result<()> {
    let n = voxel_count(dims);
    if a.len() != n || b.len() != n {
        return Err(Error::Shape(format!(
            "NCC inputs hold {} and {} values, dims {dims:?} need {n}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Mean over voxels of the signed correlation inside a `ncc_window`-wide
/// cube centred at each voxel (clipped at the borders). Window variances
/// below `epsilon` are raised to `epsilon`, so a constant window scores 0.
pub fn ncc_local<T: Real>(a: &[T], b: &[T], dims: Dims, config: &LossConfig) -> Result<T> {
    Ok(ncc_local_impl(a, b, dims, config, false)?.0)
}

/// [`ncc_local`] with its gradients `(value, d/da, d/db)`.
pub fn ncc_local_grad<T: Real>(
    a: &[T],
    b: &[T],
    dims: Dims,
    config: &LossConfig,
) -> Result<(T, Vec<T>, Vec<T>)> {
    let (v, ga, gb) = ncc_local_impl(a, b, dims, config, true)?;
    Ok((v, ga.unwrap(), gb.unwrap()))
}

#[allow(clippy::type_complexity)]
fn ncc_local_impl<T: Real>(
    a: &[T],
    b: &[T],
    dims: Dims,
    config: &LossConfig,
    want_grad: bool,
) -> Result<(T, Option<Vec<T>>, Option<Vec<T>>)> {
    config.validate()?;
    check_len(a, b, dims)?;
    let r = config.ncc_window / 2;
    let st = WindowStats::new(a, b, dims, r);
    let n_vox = a.len();
    let inv_total = T::one() / T::lit(n_vox as f64);
    let eps = T::lit(config.epsilon);
    let mut total = T::zero();
    let (mut c_a, mut c_b, mut c_aa, mut c_bb, mut c_ab) = if want_grad {
        let z = || vec![T::zero(); n_vox];
        (z(), z(), z(), z(), z())
    } else {
        Default::default()
    };
    for v in 0..n_vox {
        let n = T::lit(st.counts[v] as f64);
        let (sa, sb) = (st.sa[v], st.sb[v]);
        let cross = st.sab[v] - sa * sb / n;
        let va = st.saa[v] - sa * sa / n;
        let vb = st.sbb[v] - sb * sb / n;
        let floor = n * eps;
        let (va_f, vb_f) = (va.max(floor), vb.max(floor));
        let denom = (va_f * vb_f).sqrt();
        let cc = cross / denom;
        total += cc;
        if want_grad {
            let d_cross = inv_total / denom;
            let d_va = if va > floor {
                -T::lit(0.5) * cc / va_f * inv_total
            } else {
                T::zero()
            };
            let d_vb = if vb > floor {
                -T::lit(0.5) * cc / vb_f * inv_total
            } else {
                T::zero()
            };
            c_ab[v] = d_cross;
            c_aa[v] = d_va;
            c_bb[v] = d_vb;
            let two = T::lit(2.0);
            c_a[v] = -d_cross * sb / n - two * d_va * sa / n;
            c_b[v] = -d_cross * sa / n - two * d_vb * sb / n;
        }
    }
    let value = total * inv_total;
    if !want_grad {
        return Ok((value, None, None));
    }
    let (b_a, b_b, b_aa, b_bb, b_ab) = (
        box_sum(&c_a, dims, r),
        box_sum(&c_b, dims, r),
        box_sum(&c_aa, dims, r),
        box_sum(&c_bb, dims, r),
        box_sum(&c_ab, dims, r),
    );
    let two = T::lit(2.0);
    let ga = (0..n_vox)
        .map(|p| b_a[p] + two * a[p] * b_aa[p] + b[p] * b_ab[p])
        .collect();
    let gb = (0..n_vox)
        .map(|p| b_b[p] + two * b[p] * b_bb[p] + a[p] * b_ab[p])
        .collect();
    Ok((value, Some(ga), Some(gb)))
}

/// [`ncc_local`] on two volumes, evaluated in double precision.
pub fn ncc_volumes(a: &Volume, b: &Volume, config: &LossConfig) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::DimsMismatch {
            left: a.dims(),
            right: b.dims(),
        });
    }
    let to64 = |v: &Volume| v.data().iter().map(|&x| x as f64).collect::<Vec<_>>();
    ncc_local(&to64(a), &to64(b), a.dims(), config)
}

/// Cycle-consistency term and its flow gradients.
#[derive(Debug, Clone)]
pub struct CycleLoss<T> {
    pub value: T,
    pub grad_flow_st: Vec<T>,
    pub grad_flow_ts: Vec<T>,
}

fn check_flows<T>(source: &[T], target: &[T], dims: Dims, st: &[T], ts: &[T]) -> Result<()> {
    let n = voxel_count(dims);
    if source.len() != n || target.len() != n || st.len() != 3 * n || ts.len() != 3 * n {
        return Err(Error::Shape(format!(
            "images need {n} values and flows {} for dims {dims:?}",
            3 * n
        )));
    }
    Ok(())
}

/// `mean|(T∘φ_TS)∘φ_ST − T| + mean|(S∘φ_ST)∘φ_TS − S|`.
pub fn cycle_loss<T: Real>(
    source: &[T],
    target: &[T],
    dims: Dims,
    flow_st: &[T],
    flow_ts: &[T],
) -> Result<CycleLoss<T>> {
    check_flows(source, target, dims, flow_st, flow_ts)?;
    let n = voxel_count(dims);
    let inv = T::one() / T::lit(n as f64);
    let mut value = T::zero();
    let mut g_st = vec![T::zero(); 3 * n];
    let mut g_ts = vec![T::zero(); 3 * n];

    // (image warped by `first`) warped by `second`, compared to image
    let mut round_trip = |image: &[T], first: &[T], second: &[T], g_first: &mut [T], g_second: &mut [T]| {
        let once = warp_forward(image, 1, dims, first);
        let twice = warp_forward(&once, 1, dims, second);
        let mut d = vec![T::zero(); n];
        for p in 0..n {
            let r = twice[p] - image[p];
            value += r.abs() * inv;
            d[p] = if r > T::zero() {
                inv
            } else if r < T::zero() {
                -inv
            } else {
                T::zero()
            };
        }
        let (d_once, d_second) = warp_backward(&once, 1, dims, second, &d);
        let (_, d_first) = warp_backward(image, 1, dims, first, &d_once);
        g_second.iter_mut().zip(&d_second).for_each(|(g, &v)| *g += v);
        g_first.iter_mut().zip(&d_first).for_each(|(g, &v)| *g += v);
    };
    round_trip(target, flow_ts, flow_st, &mut g_ts, &mut g_st);
    round_trip(source, flow_st, flow_ts, &mut g_st, &mut g_ts);
    Ok(CycleLoss {
        value,
        grad_flow_st: g_st,
        grad_flow_ts: g_ts,
    })
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `-[y ln σ(x) + (1 - y) ln(1 - σ(x))]` in overflow-free form.
#[inline]
pub fn bce_with_logits<T: Real>(logit: T, label: T) -> T {
    logit.max(T::zero()) - logit * label + (-logit.abs()).exp().ln_1p()
}

/// Derivative of [`bce_with_logits`] with respect to the logit.
#[inline]
pub fn bce_with_logits_grad<T: Real>(logit: T, label: T) -> T {
    sigmoid(logit) - label
}

/// Discriminator objective: BCE against label 1 for real pairs and label 0
/// for generated pairs, averaged over every logit in the batch.
pub fn discriminator_loss<T: Real>(real: &[T], fake: &[T]) -> Result<T> {
    Ok(discriminator_loss_grad(real, fake)?.0)
}

/// [`discriminator_loss`] with gradients for the real and fake logits.
pub fn discriminator_loss_grad<T: Real>(real: &[T], fake: &[T]) -> Result<(T, Vec<T>, Vec<T>)> {
    let total = real.len() + fake.len();
    if real.is_empty() || fake.is_empty() {
        return Err(Error::Validation(
            "discriminator loss needs at least one real and one fake logit".into(),
        ));
    }
    let inv = T::one() / T::lit(total as f64);
    let mut loss = T::zero();
    let g_real = real
        .iter()
        .map(|&x| {
            loss += bce_with_logits(x, T::one());
            bce_with_logits_grad(x, T::one()) * inv
        })
        .collect();
    let g_fake = fake
        .iter()
        .map(|&x| {
            loss += bce_with_logits(x, T::zero());
            bce_with_logits_grad(x, T::zero()) * inv
        })
        .collect();
    Ok((loss * inv, g_real, g_fake))
}

/// Separately reported terms of the generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    /// `-ncc(S∘φ_ST, T) - ncc(T∘φ_TS, S)`
    pub similarity: f64,
    pub cycle: f64,
    /// `BCE(d_T(fake), 1) + BCE(d_S(fake), 1)`, unweighted.
    pub adversarial: f64,
    /// `lambda_adv * adversarial`
    pub adversarial_weighted: f64,
    pub total: f64,
}

impl LossComponents {
    pub fn is_finite(&self) -> bool {
        [
            self.similarity,
            self.cycle,
            self.adversarial,
            self.adversarial_weighted,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Element-wise mean of several samples' components.
    pub fn mean(items: &[LossComponents]) -> LossComponents {
        let inv = 1.0 / items.len().max(1) as f64;
        let sum = |f: fn(&LossComponents) -> f64| items.iter().map(f).sum::<f64>() * inv;
        LossComponents {
            similarity: sum(|c| c.similarity),
            cycle: sum(|c| c.cycle),
            adversarial: sum(|c| c.adversarial),
            adversarial_weighted: sum(|c| c.adversarial_weighted),
            total: sum(|c| c.total),
        }
    }
}

/// Generator objective for one patch pair with its gradients.
#[derive(Debug, Clone)]
pub struct GeneratorLoss<T> {
    pub components: LossComponents,
    pub grad_flow_st: Vec<T>,
    pub grad_flow_ts: Vec<T>,
    /// Gradient of the total with respect to each `d_S` logit on `T∘φ_TS`.
    pub grad_d_s_logits: Vec<T>,
    /// Gradient of the total with respect to each `d_T` logit on `S∘φ_ST`.
    pub grad_d_t_logits: Vec<T>,
}

/// Patch pair and predicted flows, all on a shared grid.
#[derive(Debug, Clone, Copy)]
pub struct PairFlows<'a, T> {
    pub source: &'a [T],
    pub target: &'a [T],
    pub dims: Dims,
    pub flow_st: &'a [T],
    pub flow_ts: &'a [T],
}

/// Generator objective:
/// `-ncc(S∘φ_ST, T) - ncc(T∘φ_TS, S) + cycle + λ (BCE(d_T(S∘φ_ST), 1) + BCE(d_S(T∘φ_TS), 1))`.
///
/// `d_s_fake` / `d_t_fake` are the discriminators' logits on the warped
/// patches; each BCE is averaged over its logits.
pub fn generator_loss<T: Real>(
    pair: PairFlows<'_, T>,
    d_s_fake: &[T],
    d_t_fake: &[T],
    config: &LossConfig,
) -> Result<GeneratorLoss<T>> {
    config.validate()?;
    let PairFlows {
        source,
        target,
        dims,
        flow_st,
        flow_ts,
    } = pair;
    check_flows(source, target, dims, flow_st, flow_ts)?;
    let warped_s = warp_forward(source, 1, dims, flow_st);
    let warped_t = warp_forward(target, 1, dims, flow_ts);
    let (ncc_st, d_ws, _) = ncc_local_grad(&warped_s, target, dims, config)?;
    let (ncc_ts, d_wt, _) = ncc_local_grad(&warped_t, source, dims, config)?;
    let similarity = -(ncc_st + ncc_ts);

    let cycle = cycle_loss(source, target, dims, flow_st, flow_ts)?;

    let neg: Vec<T> = d_ws.iter().map(|&g| -g).collect();
    let (_, mut g_st) = warp_backward(source, 1, dims, flow_st, &neg);
    let neg: Vec<T> = d_wt.iter().map(|&g| -g).collect();
    let (_, mut g_ts) = warp_backward(target, 1, dims, flow_ts, &neg);
    g_st.iter_mut().zip(&cycle.grad_flow_st).for_each(|(g, &v)| *g += v);
    g_ts.iter_mut().zip(&cycle.grad_flow_ts).for_each(|(g, &v)| *g += v);

    let lambda = T::lit(config.lambda_adv);
    let mean_bce = |logits: &[T]| -> (T, Vec<T>) {
        if logits.is_empty() {
            return (T::zero(), Vec::new());
        }
        let inv = T::one() / T::lit(logits.len() as f64);
        let value = logits.iter().map(|&x| bce_with_logits(x, T::one())).sum::<T>() * inv;
        let grad = logits
            .iter()
            .map(|&x| lambda * bce_with_logits_grad(x, T::one()) * inv)
            .collect();
        (value, grad)
    };
    let (adv_t, grad_t) = mean_bce(d_t_fake);
    let (adv_s, grad_s) = mean_bce(d_s_fake);
    let adversarial = adv_t + adv_s;
    let adversarial_weighted = lambda * adversarial;
    let total = similarity + cycle.value + adversarial_weighted;
    let f = |v: T| v.to_f64_lossy();
    Ok(GeneratorLoss {
        components: LossComponents {
            similarity: f(similarity),
            cycle: f(cycle.value),
            adversarial: f(adversarial),
            adversarial_weighted: f(adversarial_weighted),
            total: f(total),
        },
        grad_flow_st: g_st,
        grad_flow_ts: g_ts,
        grad_d_s_logits: grad_s,
        grad_d_t_logits: grad_t,
    })
}
