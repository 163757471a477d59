//! Random-effects pooling of study-level CATE estimates and prediction
//! intervals for the effect in a new setting.
//!
//! For one profile with estimates `tau_s` and within-study variances `v_s`,
//! the between-study variance `theta2` is estimated by restricted maximum
//! likelihood (DerSimonian-Laird is available as a cross-check). Pooling uses
//! weights `1 / (v_s + theta2)`, and the prediction interval is
//! `tau_pooled ± t_{K-2, 1-alpha/2} * sqrt(var_pooled + theta2)`.

use crate::error::{Error, Result};
use crate::model::{PooledCate, PredictionInterval, StudyCateEstimate};
use crate::scalar::{sample_variance, Scalar};
use crate::special::t_quantile;

/// Absolute tolerance on the REML maximizer.
pub const REML_TOL: f64 = 1e-10;
const REML_GRID: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct MetaInput<T> {
    profile_id: u32,
    estimates: Vec<StudyCateEstimate<T>>,
}

impl<T: Scalar> MetaInput<T> {
    pub fn new(profile_id: u32, estimates: Vec<StudyCateEstimate<T>>) -> Result<Self> {
        if estimates.len() < 2 {
            return Err(Error::InsufficientStudies {
                required: 2,
                found: estimates.len(),
            });
        }
        for e in &estimates {
            if e.profile_id != profile_id {
                return Err(Error::Input(format!(
                    "estimate for profile {} mixed into profile {profile_id}",
                    e.profile_id
                )));
            }
            if !e.se2.is_finite() || e.se2 < T::zero() || !e.tau_hat.is_finite() {
                return Err(Error::Profile {
                    profile_id,
                    reason: format!("study {}: invalid estimate", e.study_id),
                });
            }
        }
        Ok(Self {
            profile_id,
            estimates,
        })
    }

    /// Builds an input from parallel slices; study ids are `1..=K`.
    pub fn from_slices(profile_id: u32, tau_hat: &[T], se2: &[T]) -> Result<Self> {
        if tau_hat.len() != se2.len() {
            return Err(Error::Input("tau_hat and se2 lengths differ".into()));
        }
        let estimates = tau_hat
            .iter()
            .zip(se2)
            .enumerate()
            .map(|(i, (&t, &v))| StudyCateEstimate::new(i as u32 + 1, profile_id, t, v))
            .collect::<Result<Vec<_>>>()?;
        Self::new(profile_id, estimates)
    }

    pub fn profile_id(&self) -> u32 {
        self.profile_id
    }

    pub fn k(&self) -> usize {
        self.estimates.len()
    }

    pub fn estimates(&self) -> &[StudyCateEstimate<T>] {
        &self.estimates
    }

    fn tau(&self) -> impl Iterator<Item = T> + '_ {
        self.estimates.iter().map(|e| e.tau_hat)
    }

    fn variances(&self) -> impl Iterator<Item = T> + '_ {
        self.estimates.iter().map(|e| e.se2)
    }
}

fn check_theta2<T: Scalar>(theta2: T) -> Result<()> {
    if !(theta2 >= T::zero()) || !theta2.is_finite() {
        return Err(Error::Domain(format!("theta2 must be finite and >= 0, got {theta2}")));
    }
    Ok(())
}

/// Restricted log-likelihood of `theta2`, up to an additive constant.
pub fn restricted_log_likelihood<T: Scalar>(theta2: T, input: &MetaInput<T>) -> Result<T> {
    check_theta2(theta2)?;
    let half = T::lit(0.5);
    let mut sum_w = T::zero();
    let mut sum_wt = T::zero();
    let mut sum_log = T::zero();
    for e in input.estimates() {
        let total = e.se2 + theta2;
        if total <= T::zero() {
            return Err(Error::DegenerateVariance(format!(
                "study {} has zero total variance",
                e.study_id
            )));
        }
        sum_w += T::one() / total;
        sum_wt += e.tau_hat / total;
        sum_log += total.ln();
    }
    let mu = sum_wt / sum_w;
    let resid: T = input
        .estimates()
        .iter()
        .map(|e| {
            let d = e.tau_hat - mu;
            d * d / (e.se2 + theta2)
        })
        .sum();
    Ok(-half * sum_log - half * sum_w.ln() - half * resid)
}

/// REML estimate of the between-study variance.
pub fn reml_theta2<T: Scalar>(input: &MetaInput<T>) -> Result<T> {
    let taus: Vec<T> = input.tau().collect();
    if taus.iter().all(|&t| t == taus[0]) {
        return Ok(T::zero());
    }
    let min_v = input.variances().fold(T::infinity(), T::min);
    let max_v = input.variances().fold(T::zero(), T::max);
    let mut upper = T::lit(10.0) * sample_variance(&taus) + max_v;
    // with an exact (zero-variance) study the objective is only defined for
    // theta2 > 0; its limit at 0 is approached from a tiny positive floor
    let lower = if min_v > T::zero() {
        T::zero()
    } else {
        T::lit(1e-12) * upper
    };
    let objective = |t: T| restricted_log_likelihood(t, input).unwrap_or(T::neg_infinity());
    for attempt in 0..2 {
        let arg = maximize_on_interval(&objective, lower, upper);
        let at_upper = arg >= upper * (T::one() - T::lit(1e-6));
        if !at_upper {
            return Ok(if arg <= lower { T::zero() } else { arg });
        }
        if attempt == 0 {
            upper = upper * T::lit(2.0);
        }
    }
    Err(Error::Optimization(format!(
        "REML maximizer for profile {} sits on the search bound {upper}",
        input.profile_id()
    )))
}

/// Grid bracketing followed by Brent refinement; the lower end is compared
/// explicitly so boundary maxima are returned exactly.
fn maximize_on_interval<T: Scalar>(f: &impl Fn(T) -> T, lo: T, hi: T) -> T {
    let n = REML_GRID;
    let step = (hi - lo) / T::from_usize_lossy(n);
    let grid: Vec<T> = (0..=n).map(|i| lo + step * T::from_usize_lossy(i)).collect();
    let values: Vec<T> = grid.iter().map(|&x| f(x)).collect();
    let mut best = 0;
    for i in 1..=n {
        if values[i] > values[best] {
            best = i;
        }
    }
    let a = grid[best.saturating_sub(1)];
    let b = grid[(best + 1).min(n)];
    let (x, fx) = brent_max(f, a, b, T::lit(REML_TOL));
    let f_lo = f(lo);
    if f_lo >= fx {
        lo
    } else {
        x
    }
}

/// Brent's parabolic/golden-section search for a maximum on `[a, b]`.
fn brent_max<T: Scalar>(f: &impl Fn(T) -> T, mut a: T, mut b: T, abs_tol: T) -> (T, T) {
    let golden = T::lit(0.381_966_011_250_105_1);
    let rel = T::epsilon().sqrt();
    let half = T::lit(0.5);
    let two = T::lit(2.0);
    let g = |x: T| -f(x);
    let mut x = a + golden * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = g(x);
    let (mut fw, mut fv) = (fx, fx);
    let mut d = T::zero();
    let mut e = T::zero();
    for _ in 0..200 {
        let m = half * (a + b);
        let tol1 = rel * x.abs() + abs_tol;
        let tol2 = two * tol1;
        if (x - m).abs() <= tol2 - half * (b - a) {
            break;
        }
        let mut golden_step = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = two * (q - r);
            if q > T::zero() {
                p = -p;
            }
            q = q.abs();
            let e_old = e;
            e = d;
            if p.abs() < (half * q * e_old).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if m >= x { tol1 } else { -tol1 };
                }
                golden_step = false;
            }
        }
        if golden_step {
            e = if x >= m { a - x } else { b - x };
            d = golden * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else if d > T::zero() {
            x + tol1
        } else {
            x - tol1
        };
        let fu = g(u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, -fx)
}

/// DerSimonian-Laird moment estimate of the between-study variance.
pub fn dl_theta2<T: Scalar>(input: &MetaInput<T>) -> Result<T> {
    if let Some(e) = input.estimates().iter().find(|e| e.se2 == T::zero()) {
        return Err(Error::DegenerateVariance(format!(
            "study {} has zero variance (infinite weight)",
            e.study_id
        )));
    }
    let w: Vec<T> = input.variances().map(|v| T::one() / v).collect();
    let sum_w: T = w.iter().copied().sum();
    let sum_w2: T = w.iter().map(|&x| x * x).sum();
    let mean = input.tau().zip(&w).map(|(t, &wi)| wi * t).sum::<T>() / sum_w;
    let q: T = input
        .tau()
        .zip(&w)
        .map(|(t, &wi)| wi * (t - mean) * (t - mean))
        .sum();
    let k1 = T::from_usize_lossy(input.k() - 1);
    let denom = sum_w - sum_w2 / sum_w;
    Ok(((q - k1) / denom).max(T::zero()))
}

/// Inverse-variance weighted pooling at a given `theta2`.
pub fn pool_cate<T: Scalar>(input: &MetaInput<T>, theta2: T) -> Result<PooledCate<T>> {
    check_theta2(theta2)?;
    let exact: Vec<&StudyCateEstimate<T>> = input
        .estimates()
        .iter()
        .filter(|e| e.se2 + theta2 == T::zero())
        .collect();
    if !exact.is_empty() {
        let value = exact[0].tau_hat;
        if exact.iter().any(|e| e.tau_hat != value) {
            return Err(Error::DegenerateVariance(format!(
                "profile {}: zero-variance studies disagree",
                input.profile_id()
            )));
        }
        let weights = input
            .variances()
            .map(|v| T::one() / (v + theta2))
            .collect();
        return Ok(PooledCate {
            profile_id: input.profile_id(),
            tau_pooled: value,
            var_pooled: T::zero(),
            theta2,
            k_studies: input.k(),
            weights,
        });
    }
    let weights: Vec<T> = input.variances().map(|v| T::one() / (v + theta2)).collect();
    let sum_w: T = weights.iter().copied().sum();
    let first = input.estimates()[0].tau_hat;
    // a convex combination of equal values is that value, without rounding
    let tau_pooled = if input.tau().all(|t| t == first) {
        first
    } else {
        input.tau().zip(&weights).map(|(t, &w)| w * t).sum::<T>() / sum_w
    };
    Ok(PooledCate {
        profile_id: input.profile_id(),
        tau_pooled,
        var_pooled: T::one() / sum_w,
        theta2,
        k_studies: input.k(),
        weights,
    })
}

/// Prediction interval for the CATE in a new setting, with `K - 2` degrees
/// of freedom.
pub fn prediction_interval<T: Scalar>(
    pooled: &PooledCate<T>,
    alpha: T,
) -> Result<PredictionInterval<T>> {
    if pooled.k_studies < 3 {
        return Err(Error::InsufficientStudies {
            required: 3,
            found: pooled.k_studies,
        });
    }
    if !(alpha > T::zero() && alpha < T::one()) {
        return Err(Error::Domain(format!("alpha must be in (0, 1), got {alpha}")));
    }
    let df = pooled.k_studies - 2;
    let t = t_quantile(df, T::one() - alpha * T::lit(0.5))?;
    let half_width = t * (pooled.var_pooled + pooled.theta2).sqrt();
    Ok(PredictionInterval {
        profile_id: pooled.profile_id,
        center: pooled.tau_pooled,
        lower: pooled.tau_pooled - half_width,
        upper: pooled.tau_pooled + half_width,
        level: T::one() - alpha,
        df,
    })
}

/// REML pooling plus, when `K >= 3`, the prediction interval.
pub fn meta_analyze<T: Scalar>(
    input: &MetaInput<T>,
    alpha: T,
) -> Result<(PooledCate<T>, Option<PredictionInterval<T>>)> {
    let theta2 = reml_theta2(input)?;
    let pooled = pool_cate(input, theta2)?;
    let pi = if pooled.k_studies >= 3 {
        Some(prediction_interval(&pooled, alpha)?)
    } else {
        None
    };
    Ok((pooled, pi))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(tau: &[f64], v: &[f64]) -> MetaInput<f64> {
        MetaInput::from_slices(1, tau, v).unwrap()
    }

    #[test]
    fn rll_hand_value() {
        let val = restricted_log_likelihood(0.0, &input(&[1.0, 1.0], &[1.0, 1.0])).unwrap();
        assert!((val + 0.5 * 2f64.ln()).abs() < 1e-15);
        assert!((val + 0.346_573_590_279_972_6).abs() < 1e-12);
    }

    #[test]
    fn rll_rejects_negative_theta2() {
        assert!(matches!(
            restricted_log_likelihood(-1e-3, &input(&[0.0, 1.0], &[1.0, 1.0])),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn rll_decreases_for_large_theta2() {
        let inp = input(&[0.0, 1.0, 3.0], &[0.2, 0.5, 1.0]);
        let mut prev = restricted_log_likelihood(100.0, &inp).unwrap();
        for t in [1e3, 1e4, 1e6, 1e9] {
            let cur = restricted_log_likelihood(t, &inp).unwrap();
            assert!(cur < prev);
            prev = cur;
        }
    }

    #[test]
    fn reml_zero_for_identical_estimates() {
        assert_eq!(reml_theta2(&input(&[2.5, 2.5, 2.5], &[0.1, 1.0, 3.0])).unwrap(), 0.0);
    }

    #[test]
    fn reml_closed_form_equal_variances() {
        // with equal v the REML estimate is s^2 - v when positive
        let inp = input(&[0.0, 1.0, 2.0], &[0.5, 0.5, 0.5]);
        let est = reml_theta2(&inp).unwrap();
        assert!((est - 0.5).abs() < 1e-7, "{est}");
    }

    #[test]
    fn reml_handles_exact_study() {
        let inp = input(&[1.0, 2.0, 4.0], &[0.0, 0.3, 0.3]);
        let est = reml_theta2(&inp).unwrap();
        assert!(est >= 0.0 && est.is_finite());
    }

    #[test]
    fn dl_hand_values() {
        assert_eq!(dl_theta2(&input(&[0.0, 2.0], &[1.0, 1.0])).unwrap(), 1.0);
        assert_eq!(dl_theta2(&input(&[0.0, 1.0, 2.0], &[0.5, 0.5, 0.5])).unwrap(), 0.5);
        assert_eq!(dl_theta2(&input(&[3.0, 3.0, 3.0], &[0.5, 1.0, 2.0])).unwrap(), 0.0);
        assert!(dl_theta2(&input(&[0.0, 1.0], &[0.0, 1.0])).is_err());
    }

    #[test]
    fn pooling_hand_values() {
        let p = pool_cate(&input(&[0.0, 2.0], &[1.0, 1.0]), 1.0).unwrap();
        assert_eq!(p.weights, vec![0.5, 0.5]);
        assert_eq!((p.tau_pooled, p.var_pooled), (1.0, 1.0));

        let p = pool_cate(&input(&[3.0, 0.0, 1.0], &[1e-8, 1.0, 1.0]), 0.0).unwrap();
        assert!((p.tau_pooled - 3.0).abs() < 1e-4);

        let p = pool_cate(&input(&[3.0, 0.0, 1.0], &[0.1, 1.0, 5.0]), 1e12).unwrap();
        assert!((p.tau_pooled - 4.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn pooling_degenerate_variance() {
        let p = pool_cate(&input(&[2.0, 2.0], &[0.0, 0.0]), 0.0).unwrap();
        assert_eq!((p.tau_pooled, p.var_pooled), (2.0, 0.0));
        assert!(matches!(
            pool_cate(&input(&[1.0, 2.0], &[0.0, 0.0]), 0.0),
            Err(Error::DegenerateVariance(_))
        ));
    }

    #[test]
    fn interval_hand_values() {
        let pooled: PooledCate<f64> = PooledCate {
            profile_id: 3,
            tau_pooled: 1.0,
            var_pooled: 1.0,
            theta2: 1.0,
            k_studies: 4,
            weights: vec![1.0; 4],
        };
        let pi = prediction_interval(&pooled, 0.05).unwrap();
        assert!((pi.lower + 5.0853).abs() < 1e-3);
        assert!((pi.upper - 7.0853).abs() < 1e-3);
        assert_eq!(pi.df, 2);
        assert!(((pi.upper - pi.center) - (pi.center - pi.lower)).abs() < 1e-10);

        let point = PooledCate {
            var_pooled: 0.0,
            theta2: 0.0,
            ..pooled.clone()
        };
        let pi = prediction_interval(&point, 0.05).unwrap();
        assert_eq!((pi.lower, pi.upper), (1.0, 1.0));

        let k3 = prediction_interval(&PooledCate { k_studies: 3, ..pooled.clone() }, 0.05).unwrap();
        let k30 = prediction_interval(&PooledCate { k_studies: 30, ..pooled.clone() }, 0.05).unwrap();
        assert!(k3.width() > k30.width());

        assert!(matches!(
            prediction_interval(&PooledCate { k_studies: 2, ..pooled }, 0.05),
            Err(Error::InsufficientStudies { required: 3, found: 2 })
        ));
    }

    #[test]
    fn meta_input_requires_two_studies() {
        assert!(MetaInput::from_slices(1, &[1.0f64], &[1.0]).is_err());
    }
}
