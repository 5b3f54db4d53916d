//! Closed-form evaluators for the per-transfer unlinkability bounds and
//! their collusion-aware variants, plus the availability-factor estimate
//! that bridges them to empirical traces.
//!
//! The deterministic cap `kappa / (kappa + h)` always applies to honest
//! senders; the mixing bound tightens it with the non-owner mass injected by
//! pre-round spray and gained through randomized lags, holding with
//! probability `1 - eta`.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BoundsError {
    #[error("observation count s={s} exceeds buffer size B={b}")]
    DrawsExceedBuffer { s: u32, b: u32 },
    #[error("owner count O={o} exceeds buffer size B={b}")]
    OwnerExceedsBuffer { o: u32, b: u32 },
}

/// Inputs shared by the bound evaluators; mirrors the reporting CSV row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundInputs {
    pub kappa: u32,
    pub k_beta: u32,
    pub k_u: u32,
    /// expected spray receipts per node
    pub mu: f64,
    /// average overlay degree
    pub m: f64,
    pub t_lag: u32,
    /// availability factor in [0, 1]
    pub q: f64,
    pub epsilon: f64,
    /// observations from the same sender
    pub s_u: u32,
    /// serving-buffer extrema across those observations
    pub b_star: u32,
    pub o_star: u32,
    /// coalition recognition strength and origin fraction
    pub phi: f64,
    pub rho: f64,
    /// realized non-owner mass
    pub x_u: f64,
}

impl BoundInputs {
    pub fn h_u(&self) -> u32 {
        self.k_beta.saturating_sub(self.k_u)
    }

    pub fn p_lead(&self) -> f64 {
        p_lead(self.t_lag)
    }
}

/// `Pr[l_v < l_u] = (T - 1) / (2T)` for i.i.d. uniform lags.
pub fn p_lead(t_lag: u32) -> f64 {
    assert!(t_lag >= 1);
    (t_lag as f64 - 1.0) / (2.0 * t_lag as f64)
}

/// Per-transfer attribution cap: `kappa / (kappa + max(0, k_beta - K_u))`.
pub fn per_transfer_bound(kappa: u32, k_beta: u32, k_u: u32) -> f64 {
    assert!(kappa >= 1);
    let h = k_beta.saturating_sub(k_u) as f64;
    kappa as f64 / (kappa as f64 + h)
}

/// High-probability mixing bound and its failure probability `eta`.
///
/// `bound = min{ kappa/(kappa+h), kappa/(kappa + (1-eps)(mu + m p_lead q)) }`,
/// `eta = exp(-eps^2 mu / 2) + exp(-eps^2 m p_lead q / 2)`.
/// With `q = 0` the mixing term vanishes and the deterministic cap is the
/// conservative fallback. `eta` can exceed 1 for small masses; callers use
/// [`eta_valid`] to flag vacuous rows.
pub fn mixing_bound(inputs: &BoundInputs) -> (f64, f64) {
    let kappa = inputs.kappa as f64;
    let h = inputs.h_u() as f64;
    let lead_mass = inputs.m * inputs.p_lead() * inputs.q;
    let mass = (1.0 - inputs.epsilon) * (inputs.mu + lead_mass);
    let cap = kappa / (kappa + h);
    let mixed = kappa / (kappa + mass);
    let eta = (-inputs.epsilon.powi(2) * inputs.mu / 2.0).exp()
        + (-inputs.epsilon.powi(2) * lead_mass / 2.0).exp();
    (cap.min(mixed), eta)
}

/// A failure probability of 1 or more makes the mixing bound vacuous.
pub fn eta_valid(eta: f64) -> bool {
    eta < 1.0
}

/// Exact probability that at least one owner chunk appears in `s` draws
/// without replacement from a buffer of `b` chunks containing `o` owner
/// chunks: `1 - C(b-o, s) / C(b, s)`.
pub fn multi_obs_exact(b_star: u32, o_star: u32, s_u: u32) -> Result<f64, BoundsError> {
    if o_star > b_star {
        return Err(BoundsError::OwnerExceedsBuffer { o: o_star, b: b_star });
    }
    if s_u > b_star {
        return Err(BoundsError::DrawsExceedBuffer { s: s_u, b: b_star });
    }
    // prod_{i=0..s-1} (b - o - i) / (b - i), zero once draws exhaust b - o
    let mut miss_all = 1.0f64;
    for i in 0..s_u {
        let denom = (b_star - i) as f64;
        let numer = (b_star - o_star).saturating_sub(i) as f64;
        miss_all *= numer / denom;
    }
    Ok(1.0 - miss_all)
}

/// Union-bound form: `min{1, s * kappa / (kappa + h)}`.
pub fn multi_obs_union(kappa: u32, h_u: u32, s_u: u32) -> f64 {
    (s_u as f64 * kappa as f64 / (kappa as f64 + h_u as f64)).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollusionBounds {
    /// alliance-filtering per-transfer bound
    pub af: f64,
    /// high-probability mixing variant and its eta
    pub af_mixing: f64,
    pub eta: f64,
    /// repeated-observation union form, clamped at 1
    pub af_multi: f64,
}

/// Collusion-aware bounds. Filtering discounts realized non-owner mass by
/// `(1 - phi rho)`, but never beats the deterministic threshold cap. With
/// `phi = 0` all three reduce to the non-colluding forms.
pub fn collusion_bounds(inputs: &BoundInputs) -> CollusionBounds {
    let kappa = inputs.kappa as f64;
    let h = inputs.h_u() as f64;
    let cap = kappa / (kappa + h);
    let discount = 1.0 - inputs.phi * inputs.rho;

    let af = cap.min(kappa / (kappa + discount * inputs.x_u));

    let lead_mass = inputs.m * inputs.p_lead() * inputs.q;
    let mass = discount * (1.0 - inputs.epsilon) * (inputs.mu + lead_mass);
    let af_mixing = cap.min(kappa / (kappa + mass));
    let eta = (-inputs.epsilon.powi(2) * inputs.mu / 2.0).exp()
        + (-inputs.epsilon.powi(2) * lead_mass / 2.0).exp();

    let af_multi = (inputs.s_u as f64 * af).min(1.0);
    CollusionBounds { af, af_mixing, eta, af_multi }
}

/// Empirical availability factor: the fraction of request instances with at
/// least one non-owner holder available at schedule time. `None` when no
/// requests were processed.
pub fn estimate_q(relay_feasible: u64, requests: u64) -> Option<f64> {
    if requests == 0 {
        None
    } else {
        Some(relay_feasible as f64 / requests as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn base_inputs() -> BoundInputs {
        BoundInputs {
            kappa: 1,
            k_beta: 50,
            k_u: 10,
            mu: 41.0,
            m: 10.0,
            t_lag: 3,
            q: 0.5,
            epsilon: 0.1,
            s_u: 3,
            b_star: 10,
            o_star: 1,
            phi: 0.0,
            rho: 0.0,
            x_u: 40.0,
        }
    }

    #[test]
    fn per_transfer_reference_values() {
        let p = per_transfer_bound(1, 50, 10);
        assert!((p - 1.0 / 41.0).abs() < 1e-12);
        assert_eq!(per_transfer_bound(1, 50, 60), 1.0, "h = 0 when K_u >= k_beta");
        assert!((per_transfer_bound(2, 10, 2) - 0.2).abs() < 1e-12, "kappa=2, h=8");
    }

    #[test]
    fn mixing_reduces_to_cap_at_zero_q_and_mu() {
        let mut inputs = base_inputs();
        inputs.q = 0.0;
        inputs.mu = 0.0;
        let (bound, eta) = mixing_bound(&inputs);
        assert_eq!(bound, per_transfer_bound(1, 50, 10));
        assert!(eta >= 2.0 - 1e-12, "both Chernoff terms are exp(0) = 1");
        assert!(!eta_valid(eta));
    }

    #[test]
    fn mixing_uses_lead_probability() {
        let inputs = BoundInputs { t_lag: 3, ..base_inputs() };
        assert!((inputs.p_lead() - 1.0 / 3.0).abs() < 1e-12);
        let (bound, _) = mixing_bound(&inputs);
        let mass = 0.9 * (41.0 + 10.0 * (1.0 / 3.0) * 0.5);
        let expected = (1.0f64 / 41.0).min(1.0 / (1.0 + mass));
        assert!((bound - expected).abs() < 1e-12);
    }

    #[test]
    fn mixing_epsilon_to_zero_limit() {
        let mut inputs = base_inputs();
        inputs.epsilon = 1e-12;
        let (bound, eta) = mixing_bound(&inputs);
        assert!((eta - 2.0).abs() < 1e-6, "eta -> 2 as eps -> 0");
        let mass = 41.0 + 10.0 * (1.0 / 3.0) * 0.5;
        let expected = (1.0f64 / 41.0).min(1.0 / (1.0 + mass));
        assert!((bound - expected).abs() < 1e-6);
    }

    #[test]
    fn multi_obs_exact_reference() {
        // brute-force over all C(10,3) draws with 1 owner chunk: 0.3
        let p = multi_obs_exact(10, 1, 3).unwrap();
        assert!((p - 0.3).abs() < 1e-12);
        assert_eq!(multi_obs_exact(10, 0, 7).unwrap(), 0.0);
        assert_eq!(multi_obs_exact(10, 1, 10).unwrap(), 1.0, "exhaustive draw");
        assert_eq!(
            multi_obs_exact(5, 1, 6).unwrap_err(),
            BoundsError::DrawsExceedBuffer { s: 6, b: 5 }
        );
    }

    #[test]
    fn union_bound_reference() {
        // kappa=1, h=9, s=3 equals the exact value at B=10, O=1
        let union = multi_obs_union(1, 9, 3);
        assert!((union - 0.3).abs() < 1e-12);
        assert_eq!(multi_obs_union(1, 9, 0), 0.0);
        assert_eq!(multi_obs_union(1, 2, 100), 1.0, "clamps at 1");
    }

    #[test]
    fn collusion_reduces_at_phi_zero() {
        let inputs = BoundInputs { phi: 0.0, rho: 0.7, x_u: 40.0, ..base_inputs() };
        let cb = collusion_bounds(&inputs);
        let (mix, eta) = mixing_bound(&inputs);
        assert!((cb.af - (1.0f64 / 41.0).min(1.0 / 41.0)).abs() < 1e-12);
        assert!((cb.af_mixing - mix).abs() < 1e-12);
        assert!((cb.eta - eta).abs() < 1e-12);
        assert!((cb.af_multi - multi_obs_union(1, 40, 3)).abs() < 1e-12);
    }

    #[test]
    fn perfect_collusion_cannot_beat_threshold_cap() {
        let inputs = BoundInputs { phi: 1.0, rho: 1.0, ..base_inputs() };
        let cb = collusion_bounds(&inputs);
        assert!((cb.af - per_transfer_bound(1, 50, 10)).abs() < 1e-12);
        assert!((cb.af_mixing - per_transfer_bound(1, 50, 10)).abs() < 1e-12);
    }

    #[test]
    fn collusion_arithmetic_case() {
        // phi=0.5, rho=0.5, X=40, kappa=1, h=40: min{1/41, 1/31} = 1/41
        let inputs = BoundInputs {
            kappa: 1,
            k_beta: 41,
            k_u: 1,
            phi: 0.5,
            rho: 0.5,
            x_u: 40.0,
            ..base_inputs()
        };
        let cb = collusion_bounds(&inputs);
        assert!((cb.af - 1.0 / 41.0).abs() < 1e-12);
    }

    #[test]
    fn estimate_q_edge_cases() {
        assert_eq!(estimate_q(0, 0), None);
        assert_eq!(estimate_q(5, 5), Some(1.0));
        assert_eq!(estimate_q(0, 7), Some(0.0));
    }

    proptest! {
        #[test]
        fn union_dominates_exact_in_bound_regime(
            h in 1u32..200,
            kappa in 1u32..4,
            extra in 0u32..50,
            o in 0u32..4,
            s in 0u32..30,
        ) {
            // paper ordering regime: O* <= kappa and B* - O* >= h
            let o_star = o.min(kappa);
            let b_star = h + extra + o_star;
            let s_u = s.min(b_star);
            let exact = multi_obs_exact(b_star, o_star, s_u).unwrap();
            let union = multi_obs_union(kappa, h, s_u);
            prop_assert!(union >= exact - 1e-9, "union {union} < exact {exact}");
        }

        #[test]
        fn mixing_never_exceeds_cap(mu in 0.0f64..100.0, q in 0.0f64..1.0, eps in 0.01f64..0.5) {
            let inputs = BoundInputs { mu, q, epsilon: eps, ..base_inputs() };
            let (bound, _) = mixing_bound(&inputs);
            prop_assert!(bound <= per_transfer_bound(1, 50, 10) + 1e-12);
            prop_assert!((0.0..=1.0).contains(&bound));
        }

        #[test]
        fn all_bounds_in_unit_interval(
            kappa in 1u32..5,
            k_beta in 1u32..1000,
            k_u in 1u32..500,
            s in 0u32..50,
            phi in 0.0f64..1.0,
            rho in 0.0f64..1.0,
            x in 0.0f64..500.0,
        ) {
            let inputs = BoundInputs {
                kappa, k_beta, k_u, s_u: s, phi, rho, x_u: x,
                ..base_inputs()
            };
            let p = per_transfer_bound(kappa, k_beta, k_u);
            prop_assert!((0.0..=1.0).contains(&p));
            let cb = collusion_bounds(&inputs);
            prop_assert!((0.0..=1.0).contains(&cb.af));
            prop_assert!((0.0..=1.0).contains(&cb.af_mixing));
            prop_assert!((0.0..=1.0).contains(&cb.af_multi));
        }
    }

    #[test]
    fn exact_matches_enumeration_on_small_grid() {
        // independent oracle: enumerate all C(B, s) subsets by bitmask
        for b in 1u32..=12 {
            for o in 0..=3.min(b) {
                for s in 0..=b {
                    let mut total = 0u64;
                    let mut with_owner = 0u64;
                    for mask in 0u32..(1 << b) {
                        if mask.count_ones() != s {
                            continue;
                        }
                        total += 1;
                        // owner chunks occupy the low `o` bit positions
                        if mask & ((1 << o) - 1) != 0 {
                            with_owner += 1;
                        }
                    }
                    let expected = with_owner as f64 / total as f64;
                    let got = multi_obs_exact(b, o, s).unwrap();
                    assert!(
                        (got - expected).abs() < 1e-9,
                        "B={b} O={o} s={s}: {got} vs {expected}"
                    );
                }
            }
        }
    }
}
