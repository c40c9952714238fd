//! Training losses: tree distribution matching (count + entropic optimal
//! transport + total variation over unit-normalized density maps), the
//! hierarchical cross-domain feature alignment over attention score maps,
//! and the adversarial generator/discriminator pair.

use ndarray::Array2;
use ndgrad::sinkhorn::{grid_cost_matrix, sinkhorn_cost};
use ndgrad::{Element, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::ScoreMapSet;

/// Guard below which a density map counts as empty: the normalized OT and TV
/// terms are skipped (returned as zero with a flag) because they divide by
/// the mass.
pub const EMPTY_MASS_GUARD: f64 = 1e-8;

const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("density map shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("score map sets cover different scales: {0:?} vs {1:?}")]
    ScaleSetMismatch(Vec<usize>, Vec<usize>),
    #[error("non-finite loss input")]
    NonFinite,
}

/// Weights of the distribution-matching terms.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TdmWeights {
    pub phi1: f64,
    pub phi2: f64,
    pub phi3: f64,
}

impl Default for TdmWeights {
    fn default() -> Self {
        TdmWeights { phi1: 1.0, phi2: 0.1, phi3: 0.01 }
    }
}

/// Weights of the alignment terms (source vs target side).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct HcdfaWeights {
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for HcdfaWeights {
    fn default() -> Self {
        HcdfaWeights { beta1: 0.3, beta2: 0.7 }
    }
}

/// Entropic optimal transport configuration. The cost is the squared
/// Euclidean distance between pixel centers with both axes normalized to
/// `[0, 1]`. `pool_factor > 1` sum-pools both maps into coarser bins before
/// the transport problem (mass preserving) to keep the `n^2` solve tractable
/// on large maps; 1 solves the exact pixel-grid problem.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OtConfig {
    pub epsilon: f64,
    pub iterations: usize,
    pub pool_factor: usize,
}

impl Default for OtConfig {
    fn default() -> Self {
        OtConfig { epsilon: 1e-2, iterations: 100, pool_factor: 1 }
    }
}

/// `|  ||S||_1 - ||G||_1 |`: absolute difference of the two map integrals.
pub fn count_loss<T: Element>(s: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>, LossError> {
    if s.shape() != g.shape() {
        return Err(LossError::ShapeMismatch(s.shape(), g.shape()));
    }
    Ok(s.sum_all().sub(&g.sum_all()).abs())
}

/// Sum-pool an `[h, w]` map into `[h/f, w/f]` bins (trailing partial bins are
/// not supported; callers keep sizes divisible).
fn sum_pool<T: Element>(map: &Tensor<T>, f: usize) -> Tensor<T> {
    if f <= 1 {
        return map.clone();
    }
    let sh = map.shape();
    let (h, w) = (sh[0], sh[1]);
    assert!(h % f == 0 && w % f == 0, "pool factor must divide map size");
    map.reshape(&[h / f, f, w / f, f])
        .sum_axis(3)
        .sum_axis(1)
}

/// Entropic OT cost between the unit-normalized maps, differentiable in `S`
/// (and `G`) through the Sinkhorn iterations. Returns `(loss, skipped)`:
/// when either map is empty the loss is zero and `skipped` is true.
pub fn ot_loss<T: Element>(
    s: &Tensor<T>,
    g: &Tensor<T>,
    cfg: &OtConfig,
) -> Result<(Tensor<T>, bool), LossError> {
    if s.shape() != g.shape() {
        return Err(LossError::ShapeMismatch(s.shape(), g.shape()));
    }
    if !s.data().iter().all(|v| v.is_finite()) || !g.data().iter().all(|v| v.is_finite()) {
        return Err(LossError::NonFinite);
    }
    let s_sum = s.sum_all();
    let g_sum = g.sum_all();
    if s_sum.value().to_f64() <= EMPTY_MASS_GUARD || g_sum.value().to_f64() <= EMPTY_MASS_GUARD {
        return Ok((Tensor::scalar(T::zero()), true));
    }
    let sp = sum_pool(s, cfg.pool_factor);
    let gp = sum_pool(g, cfg.pool_factor);
    let sh = sp.shape();
    let (h, w) = (sh[0], sh[1]);
    let n = h * w;
    let a = sp.reshape(&[n]).div(&s_sum.reshape(&[1]).broadcast_to(n));
    let b = gp.reshape(&[n]).div(&g_sum.reshape(&[1]).broadcast_to(n));
    let cost: std::rc::Rc<Array2<T>> = std::rc::Rc::new(grid_cost_matrix(h, w));
    Ok((
        sinkhorn_cost(&a, &b, cost, cfg.epsilon, cfg.iterations),
        false,
    ))
}

/// Half the L1 distance between the unit-normalized maps; zero-with-flag on
/// empty maps, mirroring [`ot_loss`].
pub fn tv_loss<T: Element>(
    s: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, bool), LossError> {
    if s.shape() != g.shape() {
        return Err(LossError::ShapeMismatch(s.shape(), g.shape()));
    }
    let s_sum = s.sum_all();
    let g_sum = g.sum_all();
    if s_sum.value().to_f64() <= EMPTY_MASS_GUARD || g_sum.value().to_f64() <= EMPTY_MASS_GUARD {
        return Ok((Tensor::scalar(T::zero()), true));
    }
    let n = s.len();
    let a = s.reshape(&[n]).div(&s_sum.reshape(&[1]).broadcast_to(n));
    let b = g.reshape(&[n]).div(&g_sum.reshape(&[1]).broadcast_to(n));
    Ok((a.sub(&b).abs().sum_all().mul_scalar(0.5), false))
}

/// Plain mean-squared-error over raw maps; the `w/ L2` ablation swaps this in
/// for the distribution-matching objective.
pub fn l2_loss<T: Element>(s: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>, LossError> {
    if s.shape() != g.shape() {
        return Err(LossError::ShapeMismatch(s.shape(), g.shape()));
    }
    Ok(s.sub(g).square().mean_all())
}

/// The three (prediction, ground truth) pairs entering the distribution
/// matching loss: source, target and source-target subnets, the latter two
/// supervised by the target ground truth.
pub struct LossBatch<T: Element> {
    pub pairs: [(Tensor<T>, Tensor<T>); 3],
}

impl<T: Element> LossBatch<T> {
    pub fn new(
        t_s: Tensor<T>,
        gt_s: Tensor<T>,
        t_t: Tensor<T>,
        t_st: Tensor<T>,
        gt_t: Tensor<T>,
    ) -> Self {
        LossBatch {
            pairs: [(t_s, gt_s), (t_t, gt_t.clone()), (t_st, gt_t)],
        }
    }
}

/// Per-term values of one distribution-matching evaluation, for logging.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct TdmBreakdown {
    pub count: f64,
    pub ot: f64,
    pub tv: f64,
    pub ot_skipped: usize,
    pub per_subnet: [f64; 3],
}

/// Distribution matching over the three subnets:
/// `sum_k phi1*count + phi2*ot + phi3*tv`.
pub fn tdm_loss<T: Element>(
    batch: &LossBatch<T>,
    w: &TdmWeights,
    ot: &OtConfig,
) -> Result<(Tensor<T>, TdmBreakdown), LossError> {
    let mut breakdown = TdmBreakdown::default();
    let mut total: Option<Tensor<T>> = None;
    for (k, (s, g)) in batch.pairs.iter().enumerate() {
        let c = count_loss(s, g)?;
        let (o, o_skip) = ot_loss(s, g, ot)?;
        let (t, _) = tv_loss(s, g)?;
        if o_skip {
            breakdown.ot_skipped += 1;
        }
        breakdown.count += c.value().to_f64();
        breakdown.ot += o.value().to_f64();
        breakdown.tv += t.value().to_f64();
        let term = c
            .mul_scalar(w.phi1)
            .add(&o.mul_scalar(w.phi2))
            .add(&t.mul_scalar(w.phi3));
        breakdown.per_subnet[k] = term.value().to_f64();
        total = Some(match total {
            Some(acc) => acc.add(&term),
            None => term,
        });
    }
    Ok((total.unwrap(), breakdown))
}

/// Head-averaged mean-squared distance between two score maps.
fn score_mse<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, LossError> {
    if a.shape() != b.shape() {
        return Err(LossError::ShapeMismatch(a.shape(), b.shape()));
    }
    let am = a.mean_axis(0);
    let bm = b.mean_axis(0);
    Ok(am.sub(&bm).square().mean_all())
}

/// Alignment loss `beta1 * L_DS + beta2 * L_DT` summed over decoder scales:
/// squared differences between the cross-domain score maps and each
/// self-domain set. Gradients flow into all three subnets.
pub fn hcdfa_loss<T: Element>(
    cd: &ScoreMapSet<T>,
    sd_s: &ScoreMapSet<T>,
    sd_t: &ScoreMapSet<T>,
    w: &HcdfaWeights,
) -> Result<(Tensor<T>, f64, f64), LossError> {
    if cd.scales() != sd_s.scales() || cd.scales() != sd_t.scales() {
        return Err(LossError::ScaleSetMismatch(cd.scales(), sd_s.scales()));
    }
    let mut l_ds: Option<Tensor<T>> = None;
    let mut l_dt: Option<Tensor<T>> = None;
    for scale in cd.scales() {
        let ds = score_mse(&cd.maps[&scale], &sd_s.maps[&scale])?;
        let dt = score_mse(&cd.maps[&scale], &sd_t.maps[&scale])?;
        l_ds = Some(match l_ds {
            Some(acc) => acc.add(&ds),
            None => ds,
        });
        l_dt = Some(match l_dt {
            Some(acc) => acc.add(&dt),
            None => dt,
        });
    }
    let l_ds = l_ds.unwrap();
    let l_dt = l_dt.unwrap();
    let total = l_ds.mul_scalar(w.beta1).add(&l_dt.mul_scalar(w.beta2));
    Ok((total, l_ds.value().to_f64(), l_dt.value().to_f64()))
}

/// Binary cross-entropy of a probability against a hard label, clamped away
/// from 0/1.
pub fn bce<T: Element>(p: &Tensor<T>, label: f64) -> Tensor<T> {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if label >= 0.5 {
        p.ln_floor(1e-30).neg()
    } else {
        p.neg().add_scalar(1.0).ln_floor(1e-30).neg()
    }
}

/// Adversarial objective: the discriminator minimizes BCE against the true
/// domain labels (source = 1, target = 0); the generator carries its
/// supervised terms plus the lambda-weighted inverted-label BCE
/// (non-saturating form of the minimax game).
pub fn adversarial_losses<T: Element>(
    d_prob_s: &Tensor<T>,
    d_prob_t: &Tensor<T>,
    tdm_s: &Tensor<T>,
    tdm_t: &Tensor<T>,
    lambda: f64,
) -> Result<(Tensor<T>, Tensor<T>), LossError> {
    for t in [d_prob_s, d_prob_t, tdm_s, tdm_t] {
        if !t.data().iter().all(|v| v.is_finite()) {
            return Err(LossError::NonFinite);
        }
    }
    let disc = bce(d_prob_s, 1.0).add(&bce(d_prob_t, 0.0));
    let gen_adv = bce(d_prob_s, 0.0).add(&bce(d_prob_t, 1.0)).mul_scalar(lambda);
    let gen = tdm_s.add(tdm_t).add(&gen_adv);
    Ok((gen, disc))
}

/// Final objective: unweighted sum of the three components (the adversarial
/// term already carries lambda; the supervised terms are counted once, in
/// the TDM component).
pub fn total_loss<T: Element>(
    tdm: &Tensor<T>,
    hcdfa: &Tensor<T>,
    adv_gen: &Tensor<T>,
) -> Tensor<T> {
    tdm.add(hcdfa).add(adv_gen)
}

// Tensor helper local to the losses: broadcast a [1] scalar tensor to [n].
trait BroadcastScalar<T: Element> {
    fn broadcast_to(&self, n: usize) -> Tensor<T>;
}

impl<T: Element> BroadcastScalar<T> for Tensor<T> {
    fn broadcast_to(&self, n: usize) -> Tensor<T> {
        assert_eq!(self.len(), 1);
        let parts: Vec<Tensor<T>> = vec![self.clone(); n];
        Tensor::concat(0, &parts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn t(values: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::param(ArrayD::from_shape_vec(IxDyn(shape), values.to_vec()).unwrap())
    }

    fn rand_map(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f64, hi: f64) -> Tensor<f64> {
        let mut a = ArrayD::<f64>::zeros(IxDyn(&[h, w]));
        for v in a.iter_mut() {
            *v = rng.gen_range(lo..hi);
        }
        Tensor::param(a)
    }

    #[test]
    fn count_loss_examples() {
        let s = t(&[1.0, 2.0, 2.0], &[3]);
        assert_eq!(count_loss(&s, &s).unwrap().value(), 0.0);
        let s5 = t(&[2.0, 3.0], &[2]);
        let g3 = t(&[1.0, 2.0], &[2]);
        assert_eq!(count_loss(&s5, &g3).unwrap().value(), 2.0);
        // scaling S by 2 when sums were equal leaves |2*sum - sum| = sum
        let s2 = t(&[2.0, 4.0], &[2]);
        let g = t(&[3.0, 3.0], &[2]);
        assert_eq!(count_loss(&s2, &g).unwrap().value(), 6.0 - 6.0);
        let s2x = t(&[4.0, 8.0], &[2]);
        assert_eq!(count_loss(&s2x, &g).unwrap().value(), 6.0);
    }

    #[test]
    fn ot_loss_identical_dirac_is_zero() {
        let mut s = vec![0.0; 64];
        s[21] = 1.0;
        let a = t(&s, &[8, 8]);
        let b = t(&s, &[8, 8]);
        let (l, skipped) = ot_loss(&a, &b, &OtConfig::default()).unwrap();
        assert!(!skipped);
        assert!(l.value().abs() < 1e-6, "got {}", l.value());
    }

    #[test]
    fn ot_loss_two_diracs_squared_distance() {
        // 16x16 grid: (8, 4) to (8, 12) is 8/16 = 0.5 apart in x
        let mut sv = vec![0.0; 256];
        let mut gv = vec![0.0; 256];
        sv[8 * 16 + 4] = 1.0;
        gv[8 * 16 + 12] = 1.0;
        let s = t(&sv, &[16, 16]);
        let g = t(&gv, &[16, 16]);
        let cfg = OtConfig { epsilon: 1e-3, iterations: 100, pool_factor: 1 };
        let (l, _) = ot_loss(&s, &g, &cfg).unwrap();
        assert!((l.value() - 0.25).abs() < 0.25 * 0.02, "got {}", l.value());
    }

    #[test]
    fn ot_epsilon_refinement_error_shrinks() {
        let mut sv = vec![0.0; 256];
        let mut gv = vec![0.0; 256];
        sv[8 * 16 + 4] = 1.0;
        gv[8 * 16 + 12] = 1.0;
        let s = t(&sv, &[16, 16]);
        let g = t(&gv, &[16, 16]);
        let run = |eps: f64| {
            let cfg = OtConfig { epsilon: eps, iterations: 200, pool_factor: 1 };
            (ot_loss(&s, &g, &cfg).unwrap().0.value() - 0.25).abs()
        };
        let coarse = run(1e-2);
        let fine = run(1e-3);
        assert!(fine <= coarse + 1e-12, "fine {fine} vs coarse {coarse}");
    }

    #[test]
    fn ot_shift_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = rand_map(&mut rng, 16, 16, 0.1, 1.0);
        // shift the map content by 4 pixels (wrap-free: embed a bump)
        let mut smooth = ArrayD::<f64>::zeros(IxDyn(&[16, 16]));
        for y in 0..16 {
            for x in 0..16 {
                let d = ((y as f64 - 8.0).powi(2) + (x as f64 - 5.0).powi(2)) / 8.0;
                smooth[[y, x]] = (-d).exp();
            }
        }
        let mut shifted = ArrayD::<f64>::zeros(IxDyn(&[16, 16]));
        for y in 0..16 {
            for x in 0..16 {
                let d = ((y as f64 - 8.0).powi(2) + (x as f64 - 9.0).powi(2)) / 8.0;
                shifted[[y, x]] = (-d).exp();
            }
        }
        let a = Tensor::param(smooth);
        let b = Tensor::param(shifted);
        let cfg = OtConfig::default();
        let same = ot_loss(&a, &a, &cfg).unwrap().0.value();
        let moved = ot_loss(&a, &b, &cfg).unwrap().0.value();
        assert!(same <= moved, "same {same} moved {moved}");
        let _ = base;
    }

    #[test]
    fn ot_pooling_preserves_guard_and_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = rand_map(&mut rng, 16, 16, 0.0, 1.0);
        let g = rand_map(&mut rng, 16, 16, 0.0, 1.0);
        let cfg = OtConfig { epsilon: 1e-2, iterations: 50, pool_factor: 4 };
        let (l, skipped) = ot_loss(&s, &g, &cfg).unwrap();
        assert!(!skipped);
        assert!(l.value().is_finite() && l.value() >= 0.0);
    }

    #[test]
    fn empty_map_guard_flags() {
        let z = t(&[0.0; 16], &[4, 4]);
        let mut gv = vec![0.0; 16];
        gv[3] = 2.0;
        let g = t(&gv, &[4, 4]);
        let (l, skipped) = ot_loss(&z, &g, &OtConfig::default()).unwrap();
        assert!(skipped);
        assert_eq!(l.value(), 0.0);
        let (l, skipped) = tv_loss(&z, &g).unwrap();
        assert!(skipped);
        assert_eq!(l.value(), 0.0);
        // count loss still applies
        assert_eq!(count_loss(&z, &g).unwrap().value(), 2.0);
    }

    #[test]
    fn tv_loss_examples() {
        let s = t(&[0.3, 0.7], &[2]);
        assert_eq!(tv_loss(&s, &s).unwrap().0.value(), 0.0);
        let a = t(&[2.0, 0.0], &[2]);
        let b = t(&[0.0, 1.0], &[2]);
        assert!((tv_loss(&a, &b).unwrap().0.value() - 1.0).abs() < 1e-12);
        // range bound on non-negative inputs
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let x = rand_map(&mut rng, 4, 4, 0.0, 2.0);
            let y = rand_map(&mut rng, 4, 4, 0.0, 2.0);
            let v = tv_loss(&x, &y).unwrap().0.value();
            assert!((0.0..=1.0 + 1e-9).contains(&v));
        }
    }

    fn toy_batch(rng: &mut ChaCha8Rng, equal: bool) -> LossBatch<f64> {
        let gt_s = rand_map(rng, 8, 8, 0.1, 1.0);
        let gt_t = rand_map(rng, 8, 8, 0.1, 1.0);
        if equal {
            LossBatch::new(
                Tensor::param(gt_s.to_array()),
                gt_s,
                Tensor::param(gt_t.to_array()),
                Tensor::param(gt_t.to_array()),
                gt_t,
            )
        } else {
            let t_s = rand_map(rng, 8, 8, 0.1, 1.0);
            let t_t = rand_map(rng, 8, 8, 0.1, 1.0);
            let t_st = rand_map(rng, 8, 8, 0.1, 1.0);
            LossBatch::new(t_s, gt_s, t_t, t_st, gt_t)
        }
    }

    #[test]
    fn tdm_zero_at_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch = toy_batch(&mut rng, true);
        // epsilon well below the squared bin spacing so the entropic plan at
        // identical marginals is effectively diagonal
        let ot = OtConfig { epsilon: 1e-3, iterations: 100, pool_factor: 1 };
        let (l, _) = tdm_loss(&batch, &TdmWeights::default(), &ot).unwrap();
        assert!(l.value().abs() < 1e-5, "got {}", l.value());
    }

    #[test]
    fn tdm_weight_degeneracy_and_breakdown() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let batch = toy_batch(&mut rng, false);
        let w = TdmWeights { phi1: 1.0, phi2: 0.0, phi3: 0.0 };
        let (l, _) = tdm_loss(&batch, &w, &OtConfig::default()).unwrap();
        let mut count_sum = 0.0;
        for (s, g) in &batch.pairs {
            count_sum += count_loss(s, g).unwrap().value();
        }
        assert!((l.value() - count_sum).abs() < 1e-12);

        let w = TdmWeights::default();
        let (l, br) = tdm_loss(&batch, &w, &OtConfig::default()).unwrap();
        let resum: f64 = br.per_subnet.iter().sum();
        assert!((l.value() - resum).abs() < 1e-7);
    }

    fn score_set(rng: &mut ChaCha8Rng, heads: usize, n: usize) -> ScoreMapSet<f64> {
        let mut maps = BTreeMap::new();
        for scale in [2usize, 3, 4] {
            // random row-stochastic maps
            let mut a = ArrayD::<f64>::zeros(IxDyn(&[heads, n, n]));
            for e in 0..heads {
                for i in 0..n {
                    let mut row: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
                    let s: f64 = row.iter().sum();
                    for v in row.iter_mut() {
                        *v /= s;
                    }
                    for (j, v) in row.iter().enumerate() {
                        a[[e, i, j]] = *v;
                    }
                }
            }
            maps.insert(scale, Tensor::param(a));
        }
        ScoreMapSet { maps }
    }

    #[test]
    fn hcdfa_zero_when_equal_and_ignores_source_at_beta1_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cd = score_set(&mut rng, 2, 9);
        let cd_copy = ScoreMapSet {
            maps: cd.maps.iter().map(|(k, v)| (*k, Tensor::param(v.to_array()))).collect(),
        };
        let cd_copy2 = ScoreMapSet {
            maps: cd.maps.iter().map(|(k, v)| (*k, Tensor::param(v.to_array()))).collect(),
        };
        let (l, _, _) = hcdfa_loss(&cd, &cd_copy, &cd_copy2, &HcdfaWeights::default()).unwrap();
        assert_eq!(l.value(), 0.0);

        let sd_s1 = score_set(&mut rng, 2, 9);
        let sd_s2 = score_set(&mut rng, 2, 9);
        let sd_t = score_set(&mut rng, 2, 9);
        let sd_t_copy = ScoreMapSet {
            maps: sd_t.maps.iter().map(|(k, v)| (*k, Tensor::param(v.to_array()))).collect(),
        };
        let w = HcdfaWeights { beta1: 0.0, beta2: 0.7 };
        let (a, _, _) = hcdfa_loss(&cd, &sd_s1, &sd_t, &w).unwrap();
        let (b, _, _) = hcdfa_loss(&cd, &sd_s2, &sd_t_copy, &w).unwrap();
        assert!((a.value() - b.value()).abs() < 1e-12);
    }

    #[test]
    fn hcdfa_head_count_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let one_head = score_set(&mut rng, 1, 8);
        let replicate = |set: &ScoreMapSet<f64>, e: usize| ScoreMapSet {
            maps: set
                .maps
                .iter()
                .map(|(k, v)| {
                    let reps: Vec<Tensor<f64>> = vec![v.clone(); e];
                    (*k, Tensor::concat(0, &reps))
                })
                .collect(),
        };
        let sd_s = score_set(&mut rng, 1, 8);
        let sd_t = score_set(&mut rng, 1, 8);
        let w = HcdfaWeights::default();
        let (l1, _, _) = hcdfa_loss(&one_head, &sd_s, &sd_t, &w).unwrap();
        let (l4, _, _) = hcdfa_loss(
            &replicate(&one_head, 4),
            &replicate(&sd_s, 4),
            &replicate(&sd_t, 4),
            &w,
        )
        .unwrap();
        assert!((l1.value() - l4.value()).abs() < 1e-6);
    }

    #[test]
    fn hcdfa_rejects_scale_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cd = score_set(&mut rng, 1, 4);
        let mut partial = score_set(&mut rng, 1, 4);
        partial.maps.remove(&3);
        let sd_t = score_set(&mut rng, 1, 4);
        assert!(matches!(
            hcdfa_loss(&cd, &partial, &sd_t, &HcdfaWeights::default()),
            Err(LossError::ScaleSetMismatch(..))
        ));
    }

    #[test]
    fn adversarial_examples() {
        let near_one = Tensor::<f64>::scalar(1.0 - 1e-7);
        let near_zero = Tensor::<f64>::scalar(1e-7);
        let z = Tensor::<f64>::scalar(0.0);
        let (_, disc) = adversarial_losses(&near_one, &near_zero, &z, &z, 1.0).unwrap();
        assert!(disc.value() < 1e-5, "got {}", disc.value());

        let half = Tensor::<f64>::scalar(0.5);
        let (_, disc) = adversarial_losses(&half, &half, &z, &z, 1.0).unwrap();
        assert!((disc.value() - 2.0 * (2.0f64).ln()).abs() < 1e-6);

        let tdm_s = Tensor::<f64>::scalar(1.25);
        let tdm_t = Tensor::<f64>::scalar(0.5);
        let (gen, _) = adversarial_losses(&half, &half, &tdm_s, &tdm_t, 0.0).unwrap();
        assert_eq!(gen.value(), 1.75);
    }

    #[test]
    fn total_loss_examples() {
        let a = Tensor::<f64>::scalar(1.0);
        let b = Tensor::<f64>::scalar(2.0);
        let c = Tensor::<f64>::scalar(3.0);
        assert_eq!(total_loss(&a, &b, &c).value(), 6.0);
        let z = Tensor::<f64>::scalar(0.0);
        assert_eq!(total_loss(&a, &z, &c).value(), 4.0);
    }

    #[test]
    fn total_loss_gradient_is_sum_of_component_gradients() {
        let x = Tensor::<f64>::param(ArrayD::from_elem(IxDyn(&[1]), 0.8));
        // components: x^2, 2x, -x => total grad 2x + 2 - 1
        let total = total_loss(&x.square(), &x.mul_scalar(2.0), &x.neg());
        total.backward();
        let g = x.take_grad().unwrap()[[0]];
        assert!((g - (2.0 * 0.8 + 2.0 - 1.0)).abs() < 1e-12);
    }

    /// Central-difference gradient of a scalar loss w.r.t. every entry of `s`.
    fn fd_check(f: &dyn Fn(&Tensor<f64>) -> Tensor<f64>, s0: &ndarray::ArrayD<f64>, tol: f64) {
        let s = Tensor::param(s0.clone());
        let l = f(&s);
        l.backward();
        let g = s.take_grad().unwrap();
        let h = 1e-5;
        for idx in 0..s0.len() {
            let mut plus = s0.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            let mut minus = s0.clone();
            minus.as_slice_mut().unwrap()[idx] -= h;
            let fp = f(&Tensor::param(plus)).value();
            let fm = f(&Tensor::param(minus)).value();
            let fd = (fp - fm) / (2.0 * h);
            let an = g.as_slice().unwrap()[idx];
            let denom = fd.abs().max(an.abs()).max(1e-4);
            assert!((fd - an).abs() / denom < tol, "idx {idx}: fd {fd} an {an}");
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s0 = ArrayD::<f64>::zeros(IxDyn(&[8, 8]));
        for v in s0.iter_mut() {
            *v = rng.gen_range(0.1..1.0);
        }
        let g = rand_map(&mut rng, 8, 8, 0.1, 1.0).detach();
        let ot = OtConfig { epsilon: 1e-2, iterations: 60, pool_factor: 1 };
        fd_check(&|s| count_loss(s, &g).unwrap(), &s0, 1e-3);
        fd_check(&|s| ot_loss(s, &g, &ot).unwrap().0, &s0, 1e-3);
        fd_check(&|s| tv_loss(s, &g).unwrap().0, &s0, 1e-3);
    }
}
