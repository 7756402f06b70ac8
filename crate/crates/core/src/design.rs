//! Well-placement density, budgeted mask sampling, and the straight-through
//! gradient from the flow loss back to the density logits.
//!
//! Candidates are grid columns: a drilled well observes its whole column. The
//! density is `w = softmax(logits)` and column `c` enters a sampled mask with
//! probability `p_c = min(1, s·w_c)`, i.e. when `u_c < p_c` for `u_c ~ U(0, 1)`.

use rand::Rng;

use crate::flow::{Conditioning, ConditioningGrad};
use crate::rng::rng_from_seed;
use crate::{Error, Result, ScalarField2D};

#[derive(Debug, Clone, PartialEq)]
pub struct WellDesignState {
    pub logits: Vec<f64>,
    /// expected number of new wells per sampled mask
    pub budget: usize,
    /// drilled columns in drilling order
    pub drilled: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InclusionProbs {
    pub p: Vec<f64>,
    /// `s·w_c >= 1`: the probability is saturated and passes no gradient
    pub clip_active: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub columns: Vec<bool>,
    /// columns expanded over every row
    pub field: ScalarField2D,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

impl WellDesignState {
    /// Uniform density over `candidates` columns, nothing drilled.
    pub fn uniform(candidates: usize, budget: usize) -> Result<Self> {
        Self::new(vec![0.0; candidates], budget, Vec::new())
    }

    pub fn new(logits: Vec<f64>, budget: usize, drilled: Vec<usize>) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::InvalidParameter("no candidate columns".into()));
        }
        if budget == 0 {
            return Err(Error::InvalidParameter("budget must be at least 1".into()));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("design logits".into()));
        }
        let mut seen = vec![false; logits.len()];
        for &c in &drilled {
            if c >= logits.len() || std::mem::replace(&mut seen[c], true) {
                return Err(Error::InvalidParameter(format!(
                    "drilled column {c} is out of range or repeated"
                )));
            }
        }
        Ok(Self {
            logits,
            budget,
            drilled,
        })
    }

    pub fn candidates(&self) -> usize {
        self.logits.len()
    }

    pub fn density(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    pub fn is_drilled(&self, c: usize) -> bool {
        self.drilled.contains(&c)
    }

    pub fn reset_logits(&mut self) {
        self.logits.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn drill(&mut self, c: usize) -> Result<()> {
        if c >= self.candidates() || self.is_drilled(c) {
            return Err(Error::InvalidParameter(format!("cannot drill column {c}")));
        }
        self.drilled.push(c);
        Ok(())
    }
}

pub fn inclusion_probs(state: &WellDesignState) -> InclusionProbs {
    let s = state.budget as f64;
    let (p, clip_active) = state
        .density()
        .into_iter()
        .map(|w| {
            let raw = s * w;
            if raw >= 1.0 {
                (1.0, true)
            } else {
                (raw, false)
            }
        })
        .unzip();
    InclusionProbs { p, clip_active }
}

impl Mask {
    pub fn from_columns(columns: Vec<bool>, rows: usize) -> Self {
        let cols = columns.len();
        let field = ScalarField2D::from_fn(rows, cols, |_, c| if columns[c] { 1.0 } else { 0.0 });
        Self { columns, field }
    }

    /// Only the listed columns are active.
    pub fn drilled_only(drilled: &[usize], cols: usize, rows: usize) -> Self {
        let mut columns = vec![false; cols];
        for &c in drilled {
            columns[c] = true;
        }
        Self::from_columns(columns, rows)
    }

    pub fn active_count(&self) -> usize {
        self.columns.iter().filter(|&&b| b).count()
    }
}

/// Bernoulli draw per column with the drilled columns forced on.
pub fn sample_mask(probs: &InclusionProbs, drilled: &[usize], rows: usize, rng_seed: u64) -> Mask {
    let mut rng = rng_from_seed(rng_seed);
    let mut columns: Vec<bool> = probs.p.iter().map(|&p| rng.random::<f64>() < p).collect();
    for &c in drilled {
        columns[c] = true;
    }
    Mask::from_columns(columns, rows)
}

/// `masked_obs = M ⊙ y`; the mask itself is the second channel and seismic passes
/// through unmasked.
pub fn apply_mask(
    mask: &Mask,
    y_full: &ScalarField2D,
    seismic: Option<&ScalarField2D>,
) -> Result<Conditioning> {
    mask.field.ensure_same_dims(y_full, "mask vs observation")?;
    let masked = ScalarField2D::from_fn(y_full.rows(), y_full.cols(), |r, c| {
        if mask.columns[c] {
            y_full.get(r, c)
        } else {
            0.0
        }
    });
    Conditioning::new(masked, mask.field.clone(), seismic.cloned())
}

/// Straight-through gradient of the loss with respect to the design logits.
///
/// Each mask column is treated as `m_c = p_c` in the backward pass, so
/// `∂L/∂p_c = Σ_r [∂L/∂obs(r,c)·y(r,c) + ∂L/∂mask(r,c)]`, which then flows through
/// `p = min(1, s·softmax(v))`. Clipped and drilled columns pass no gradient.
pub fn design_gradient(
    state: &WellDesignState,
    grads: &ConditioningGrad,
    y_full: &ScalarField2D,
    probs: &InclusionProbs,
    mask: &Mask,
) -> Result<Vec<f64>> {
    let cols = state.candidates();
    if probs.p.len() != cols || mask.columns.len() != cols || y_full.cols() != cols {
        return Err(Error::DimMismatch(format!(
            "design over {cols} columns, probabilities {}, mask {}, observation {}",
            probs.p.len(),
            mask.columns.len(),
            y_full.cols()
        )));
    }
    grads
        .masked_obs
        .ensure_same_dims(y_full, "observation gradient")?;
    grads.mask.ensure_same_dims(y_full, "mask gradient")?;

    let w = state.density();
    let s = state.budget as f64;
    let mut g_w = vec![0.0; cols];
    for c in 0..cols {
        if probs.clip_active[c] || state.is_drilled(c) {
            continue;
        }
        let mut g_p = 0.0;
        for r in 0..y_full.rows() {
            g_p += grads.masked_obs.get(r, c) * y_full.get(r, c) + grads.mask.get(r, c);
        }
        g_w[c] = s * g_p;
    }
    let weighted: f64 = w.iter().zip(&g_w).map(|(a, b)| a * b).sum();
    Ok(w.iter()
        .zip(&g_w)
        .map(|(wj, gj)| wj * (gj - weighted))
        .collect())
}

/// Highest-density undrilled column, lowest index on ties.
pub fn select_well(state: &WellDesignState) -> Result<usize> {
    let mut best: Option<usize> = None;
    for c in 0..state.candidates() {
        if state.is_drilled(c) {
            continue;
        }
        match best {
            Some(b) if state.logits[c] <= state.logits[b] => {}
            _ => best = Some(c),
        }
    }
    best.ok_or(Error::BudgetExhausted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn state_with_density(w: &[f64], budget: usize) -> WellDesignState {
        WellDesignState::new(w.iter().map(|v| v.ln()).collect(), budget, vec![]).unwrap()
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn inclusion_hand_cases() {
        let p = inclusion_probs(&WellDesignState::uniform(4, 2).unwrap());
        assert!(close(&p.p, &[0.5; 4]));
        assert!(p.clip_active.iter().all(|c| !c));

        let p = inclusion_probs(&state_with_density(&[0.75, 0.25], 1));
        assert!(close(&p.p, &[0.75, 0.25]));

        let p = inclusion_probs(&state_with_density(&[0.8, 0.1, 0.1], 2));
        assert!(close(&p.p, &[1.0, 0.2, 0.2]));
        assert_eq!(p.clip_active, vec![true, false, false]);
    }

    #[test]
    fn degenerate_masks() {
        let probs = InclusionProbs {
            p: vec![1.0, 0.0, 0.0],
            clip_active: vec![true, false, false],
        };
        for seed in 0..20 {
            assert_eq!(
                sample_mask(&probs, &[], 3, seed).columns,
                vec![true, false, false]
            );
        }
        let none = InclusionProbs {
            p: vec![0.0; 3],
            clip_active: vec![false; 3],
        };
        let m = sample_mask(&none, &[2], 4, 1);
        assert_eq!(m.columns, vec![false, false, true]);
        for r in 0..4 {
            assert_eq!(m.field.get(r, 2), 1.0);
            assert_eq!(m.field.get(r, 0), 0.0);
        }
    }

    #[test]
    fn apply_mask_semantics() {
        let y = ScalarField2D::from_fn(3, 4, |r, c| 1.0 + r as f64 + 10.0 * c as f64);
        let all = Mask::from_columns(vec![true; 4], 3);
        assert_eq!(apply_mask(&all, &y, None).unwrap().masked_obs(), &y);
        let none = Mask::from_columns(vec![false; 4], 3);
        let c = apply_mask(&none, &y, None).unwrap();
        assert!(c.masked_obs().as_slice().iter().all(|&v| v == 0.0));
        assert!(c.mask().as_slice().iter().all(|&v| v == 0.0));
        let one = Mask::from_columns(vec![false, false, true, false], 3);
        let c = apply_mask(&one, &y, Some(&y)).unwrap();
        for r in 0..3 {
            for col in 0..4 {
                assert_eq!(c.masked_obs().get(r, col) != 0.0, col == 2);
            }
        }
        assert_eq!(c.seismic(), Some(&y));
        assert!(apply_mask(&one, &ScalarField2D::zeros(3, 5), None).is_err());
    }

    fn cond_grad(rows: usize, cols: usize, obs: impl Fn(usize, usize) -> f64) -> ConditioningGrad {
        ConditioningGrad {
            masked_obs: ScalarField2D::from_fn(rows, cols, obs),
            mask: ScalarField2D::zeros(rows, cols),
            seismic: ScalarField2D::zeros(rows, cols),
        }
    }

    #[test]
    fn zero_and_clipped_gradients() {
        let state = WellDesignState::new(vec![0.3, -0.2, 0.1], 1, vec![]).unwrap();
        let y = ScalarField2D::filled(2, 3, 0.7);
        let probs = inclusion_probs(&state);
        let mask = sample_mask(&probs, &[], 2, 3);
        let g = design_gradient(&state, &cond_grad(2, 3, |_, _| 0.0), &y, &probs, &mask).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));

        let big = WellDesignState::uniform(3, 3).unwrap();
        let probs = inclusion_probs(&big);
        assert!(probs.clip_active.iter().all(|&c| c));
        let g = design_gradient(&big, &cond_grad(2, 3, |_, _| 1.0), &y, &probs, &mask).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn drilled_columns_pass_no_gradient() {
        let state = WellDesignState::new(vec![0.0; 3], 1, vec![1]).unwrap();
        let y = ScalarField2D::filled(1, 3, 1.0);
        let probs = inclusion_probs(&state);
        let mask = sample_mask(&probs, &state.drilled, 1, 0);
        let only_drilled = cond_grad(1, 3, |_, c| if c == 1 { 1.0 } else { 0.0 });
        let g = design_gradient(&state, &only_drilled, &y, &probs, &mask).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn active_count_is_binomial() {
        let probs = InclusionProbs {
            p: vec![0.5; 10],
            clip_active: vec![false; 10],
        };
        let n = 10_000;
        let total: usize = (0..n)
            .map(|seed| sample_mask(&probs, &[], 1, seed).active_count())
            .sum();
        let mean = total as f64 / n as f64;
        // sd of the mean count: sqrt(10 · 0.25 / 1e4)
        assert!(
            (mean - 5.0).abs() < 3.0 * (2.5f64 / n as f64).sqrt(),
            "{mean}"
        );
    }

    /// Loss = masked_obs(0, 0). Its expectation over masks is p_0 · y(0, 0); the
    /// straight-through gradient is compared with central differences of a
    /// common-random-numbers Monte-Carlo estimate of that expectation.
    #[test]
    fn straight_through_matches_expected_loss_differences() {
        let (rows, y00, budget) = (2, 0.8, 1);
        let y = ScalarField2D::from_fn(rows, 2, |r, c| if (r, c) == (0, 0) { y00 } else { 0.3 });
        let logits = vec![0.2, -0.4];
        let state = WellDesignState::new(logits.clone(), budget, vec![]).unwrap();
        let probs = inclusion_probs(&state);
        let mask = sample_mask(&probs, &[], rows, 0);
        let g = cond_grad(rows, 2, |r, c| if (r, c) == (0, 0) { 1.0 } else { 0.0 });
        let st = design_gradient(&state, &g, &y, &probs, &mask).unwrap();

        let n = 100_000u64;
        let expected_loss = |v: &[f64]| {
            let st = WellDesignState::new(v.to_vec(), budget, vec![]).unwrap();
            let pr = inclusion_probs(&st);
            (0..n)
                .map(|seed| {
                    let m = sample_mask(&pr, &[], rows, seed);
                    apply_mask(&m, &y, None).unwrap().masked_obs().get(0, 0)
                })
                .sum::<f64>()
                / n as f64
        };
        let h = 0.1;
        for j in 0..2 {
            let mut up = logits.clone();
            up[j] += h;
            let mut down = logits.clone();
            down[j] -= h;
            let fd = (expected_loss(&up) - expected_loss(&down)) / (2.0 * h);
            assert!(
                (fd - st[j]).abs() < 0.05 * st[j].abs(),
                "logit {j}: fd {fd} vs st {}",
                st[j]
            );
        }
        // and the closed form s · y · ∂w_0/∂v
        let w = softmax(&logits);
        assert!((st[0] - y00 * w[0] * (1.0 - w[0])).abs() < 1e-15);
        assert!((st[1] + y00 * w[0] * w[1]).abs() < 1e-15);
    }

    #[test]
    fn design_gradient_checks_shapes() {
        let state = WellDesignState::uniform(3, 1).unwrap();
        let probs = inclusion_probs(&state);
        let mask = Mask::from_columns(vec![true, false], 2);
        let y = ScalarField2D::zeros(2, 3);
        assert!(design_gradient(&state, &cond_grad(2, 3, |_, _| 0.0), &y, &probs, &mask).is_err());
    }

    #[test]
    fn select_well_cases() {
        let s = state_with_density(&[0.1, 0.9, 0.3], 1);
        assert_eq!(select_well(&s).unwrap(), 1);
        let mut s2 = s.clone();
        s2.drill(1).unwrap();
        assert_eq!(select_well(&s2).unwrap(), 2);
        let tie = WellDesignState::new(vec![1.0, 0.0, 1.0], 1, vec![]).unwrap();
        assert_eq!(select_well(&tie).unwrap(), 0);
        let full = WellDesignState::new(vec![0.0, 0.0], 1, vec![0, 1]).unwrap();
        assert!(matches!(select_well(&full), Err(Error::BudgetExhausted)));
    }

    #[test]
    fn state_validation() {
        assert!(WellDesignState::new(vec![], 1, vec![]).is_err());
        assert!(WellDesignState::new(vec![0.0], 0, vec![]).is_err());
        assert!(WellDesignState::new(vec![0.0, 0.0], 1, vec![1, 1]).is_err());
        assert!(WellDesignState::new(vec![0.0, 0.0], 1, vec![2]).is_err());
        let mut s = WellDesignState::uniform(2, 1).unwrap();
        s.drill(0).unwrap();
        assert!(s.drill(0).is_err());
    }

    proptest! {
        #[test]
        fn probabilities_respect_budget(logits in prop::collection::vec(-4.0f64..4.0, 1..12), s in 1usize..4) {
            let st = WellDesignState::new(logits, s, vec![]).unwrap();
            let w = st.density();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|&v| v > 0.0));
            let p = inclusion_probs(&st);
            prop_assert!(p.p.iter().sum::<f64>() <= s as f64 + 1e-9);
            if p.clip_active.iter().all(|c| !c) {
                prop_assert!((p.p.iter().sum::<f64>() - s as f64).abs() < 1e-9);
            }
        }

        #[test]
        fn selection_is_shift_invariant(logits in prop::collection::vec(-4.0f64..4.0, 2..10), shift in -50.0f64..50.0) {
            let a = WellDesignState::new(logits.clone(), 1, vec![]).unwrap();
            let b = WellDesignState::new(logits.iter().map(|v| v + shift).collect(), 1, vec![]).unwrap();
            // shifting can only break exact ties through rounding; compare densities instead
            let (ia, ib) = (select_well(&a).unwrap(), select_well(&b).unwrap());
            prop_assert!((a.density()[ia] - a.density()[ib]).abs() < 1e-12);
        }

        #[test]
        fn raising_a_logit_never_lowers_its_probability(
            logits in prop::collection::vec(-3.0f64..3.0, 2..8),
            idx in 0usize..8,
            bump in 0.0f64..3.0,
            s in 1usize..3,
        ) {
            let i = idx % logits.len();
            let before = inclusion_probs(&WellDesignState::new(logits.clone(), s, vec![]).unwrap());
            let mut raised = logits;
            raised[i] += bump;
            let after = inclusion_probs(&WellDesignState::new(raised, s, vec![]).unwrap());
            prop_assert!(after.p[i] >= before.p[i] - 1e-15);
        }

        #[test]
        fn drilled_columns_always_present(seed in any::<u64>(), drilled in prop::collection::btree_set(0usize..10, 0..5)) {
            let drilled: Vec<usize> = drilled.into_iter().collect();
            let st = WellDesignState::new(vec![0.0; 10], 1, drilled.clone()).unwrap();
            let m = sample_mask(&inclusion_probs(&st), &st.drilled, 2, seed);
            for c in drilled {
                prop_assert!(m.columns[c]);
            }
        }
    }
}
