//! Emission projection and a linear-chain CRF over the labels `[O, B, I]`.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::Label;
use crate::encoder::INIT_STD;
use crate::error::{Error, Result};
use crate::params::{view, view_mut, Parameters, TensorView, TensorViewMut};

pub const NUM_LABELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct CrfParams {
    /// d_model × 3.
    pub proj_weight: Array2<f64>,
    pub proj_bias: Array1<f64>,
    /// `transitions[[from, to]]`.
    pub transitions: Array2<f64>,
    pub start: Array1<f64>,
    pub end: Array1<f64>,
}

/// Per-word label logits, n × 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Emissions(pub Array2<f64>);

impl Emissions {
    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Gradients of the NLL w.r.t. emissions and the CRF's own scores.
#[derive(Debug, Clone, PartialEq)]
pub struct NllGrad {
    pub emissions: Array2<f64>,
    pub transitions: Array2<f64>,
    pub start: Array1<f64>,
    pub end: Array1<f64>,
}

impl CrfParams {
    pub fn zeros(d_model: usize) -> Self {
        CrfParams {
            proj_weight: Array2::zeros((d_model, NUM_LABELS)),
            proj_bias: Array1::zeros(NUM_LABELS),
            transitions: Array2::zeros((NUM_LABELS, NUM_LABELS)),
            start: Array1::zeros(NUM_LABELS),
            end: Array1::zeros(NUM_LABELS),
        }
    }

    /// Projection ~ N(0, 0.02²); transition, start and end scores zero.
    pub fn init(d_model: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut crf = Self::zeros(d_model);
        crf.proj_weight.mapv_inplace(|_| normal.sample(&mut rng));
        crf
    }

    pub fn d_model(&self) -> usize {
        self.proj_weight.nrows()
    }

    pub fn emissions(&self, hidden: &Array2<f64>) -> Result<Emissions> {
        if hidden.ncols() != self.d_model() {
            return Err(Error::Shape(format!(
                "hidden states have {} columns, projection expects {}",
                hidden.ncols(),
                self.d_model()
            )));
        }
        Ok(Emissions(hidden.dot(&self.proj_weight) + &self.proj_bias))
    }

    fn check_labels(&self, e: &Emissions, labels: &[Label]) -> Result<()> {
        if labels.len() != e.len() || labels.is_empty() {
            return Err(Error::Shape(format!(
                "{} labels for {} emission rows",
                labels.len(),
                e.len()
            )));
        }
        Ok(())
    }

    pub fn path_score(&self, e: &Emissions, labels: &[Label]) -> Result<f64> {
        self.check_labels(e, labels)?;
        let y: Vec<usize> = labels.iter().map(|l| l.index()).collect();
        let mut score = self.start[y[0]] + self.end[y[y.len() - 1]];
        for (i, &label) in y.iter().enumerate() {
            score += e.0[[i, label]];
        }
        for pair in y.windows(2) {
            score += self.transitions[[pair[0], pair[1]]];
        }
        Ok(score)
    }

    /// Forward log-scores: alpha[i][y] = log Σ over prefixes ending in y at i.
    fn forward_scores(&self, e: &Emissions) -> Array2<f64> {
        let n = e.len();
        let mut alpha = Array2::zeros((n, NUM_LABELS));
        for y in 0..NUM_LABELS {
            alpha[[0, y]] = self.start[y] + e.0[[0, y]];
        }
        for i in 1..n {
            for y in 0..NUM_LABELS {
                let prev = alpha.row(i - 1);
                alpha[[i, y]] = e.0[[i, y]]
                    + log_sum_exp((0..NUM_LABELS).map(|x| prev[x] + self.transitions[[x, y]]));
            }
        }
        alpha
    }

    fn backward_scores(&self, e: &Emissions) -> Array2<f64> {
        let n = e.len();
        let mut beta = Array2::zeros((n, NUM_LABELS));
        for y in 0..NUM_LABELS {
            beta[[n - 1, y]] = self.end[y];
        }
        for i in (0..n - 1).rev() {
            for y in 0..NUM_LABELS {
                let next = beta.row(i + 1);
                beta[[i, y]] = log_sum_exp(
                    (0..NUM_LABELS).map(|z| self.transitions[[y, z]] + e.0[[i + 1, z]] + next[z]),
                );
            }
        }
        beta
    }

    /// Log of the sum of exp(path score) over all 3ⁿ label sequences.
    pub fn log_partition(&self, e: &Emissions) -> Result<f64> {
        if e.is_empty() {
            return Err(Error::Shape("log_partition of an empty sequence".into()));
        }
        let alpha = self.forward_scores(e);
        let last = alpha.row(e.len() - 1);
        Ok(log_sum_exp((0..NUM_LABELS).map(|y| last[y] + self.end[y])))
    }

    /// log Z − score(gold).
    pub fn nll(&self, e: &Emissions, labels: &[Label]) -> Result<f64> {
        Ok(self.log_partition(e)? - self.path_score(e, labels)?)
    }

    /// NLL with its gradient: expected feature counts minus gold counts.
    pub fn nll_with_grad(&self, e: &Emissions, labels: &[Label]) -> Result<(f64, NllGrad)> {
        self.check_labels(e, labels)?;
        let n = e.len();
        let alpha = self.forward_scores(e);
        let beta = self.backward_scores(e);
        let last = alpha.row(n - 1);
        let log_z = log_sum_exp((0..NUM_LABELS).map(|y| last[y] + self.end[y]));
        let loss = log_z - self.path_score(e, labels)?;

        let mut d_emissions = (&alpha + &beta - log_z).mapv(f64::exp);
        let mut d_start = d_emissions.row(0).to_owned();
        let mut d_end = d_emissions.row(n - 1).to_owned();
        let mut d_trans = Array2::zeros((NUM_LABELS, NUM_LABELS));
        for i in 0..n - 1 {
            for x in 0..NUM_LABELS {
                for z in 0..NUM_LABELS {
                    d_trans[[x, z]] += (alpha[[i, x]]
                        + self.transitions[[x, z]]
                        + e.0[[i + 1, z]]
                        + beta[[i + 1, z]]
                        - log_z)
                        .exp();
                }
            }
        }
        let y: Vec<usize> = labels.iter().map(|l| l.index()).collect();
        for (i, &label) in y.iter().enumerate() {
            d_emissions[[i, label]] -= 1.0;
        }
        d_start[y[0]] -= 1.0;
        d_end[y[n - 1]] -= 1.0;
        for pair in y.windows(2) {
            d_trans[[pair[0], pair[1]]] -= 1.0;
        }
        Ok((
            loss,
            NllGrad {
                emissions: d_emissions,
                transitions: d_trans,
                start: d_start,
                end: d_end,
            },
        ))
    }

    /// Highest-scoring label sequence. Ties go to the smaller label index
    /// (O < B < I) at every backtracking step.
    pub fn viterbi(&self, e: &Emissions) -> Result<Vec<Label>> {
        let n = e.len();
        if n == 0 {
            return Err(Error::Shape("viterbi over an empty sequence".into()));
        }
        let mut best = Array2::zeros((n, NUM_LABELS));
        let mut back = vec![[0usize; NUM_LABELS]; n];
        for y in 0..NUM_LABELS {
            best[[0, y]] = self.start[y] + e.0[[0, y]];
        }
        for i in 1..n {
            for y in 0..NUM_LABELS {
                let mut arg = 0;
                let mut max = f64::NEG_INFINITY;
                for x in 0..NUM_LABELS {
                    let s = best[[i - 1, x]] + self.transitions[[x, y]];
                    if s > max {
                        max = s;
                        arg = x;
                    }
                }
                best[[i, y]] = max + e.0[[i, y]];
                back[i][y] = arg;
            }
        }
        let mut last = 0;
        let mut max = f64::NEG_INFINITY;
        for y in 0..NUM_LABELS {
            let s = best[[n - 1, y]] + self.end[y];
            if s > max {
                max = s;
                last = y;
            }
        }
        let mut path = vec![last; n];
        for i in (1..n).rev() {
            path[i - 1] = back[i][path[i]];
        }
        Ok(path.into_iter().map(Label::from_index).collect())
    }

    /// Accumulates projection gradients for `hidden` given dL/d(emissions)
    /// and returns dL/d(hidden).
    pub fn emissions_backward(&self, hidden: &Array2<f64>, d_emissions: &Array2<f64>, grads: &mut CrfParams) -> Array2<f64> {
        crate::nn::linear_backward(
            hidden.view(),
            &self.proj_weight,
            d_emissions,
            &mut grads.proj_weight,
            &mut grads.proj_bias,
        )
    }

    pub fn add_score_grads(&self, g: &NllGrad, scale: f64, grads: &mut CrfParams) {
        grads.transitions.scaled_add(scale, &g.transitions);
        grads.start.scaled_add(scale, &g.start);
        grads.end.scaled_add(scale, &g.end);
    }

    /// Marginal label probabilities per position.
    pub fn marginals(&self, e: &Emissions) -> Result<Array2<f64>> {
        let log_z = self.log_partition(e)?;
        let alpha = self.forward_scores(e);
        let beta = self.backward_scores(e);
        let m = (&alpha + &beta - log_z).mapv(f64::exp);
        debug_assert!(m.sum_axis(Axis(1)).iter().all(|s| (s - 1.0).abs() < 1e-9));
        Ok(m)
    }
}

impl Parameters for CrfParams {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        vec![
            view!("proj.weight", self.proj_weight, false),
            view!("proj.bias", self.proj_bias, true),
            view!("transitions", self.transitions, false),
            view!("start", self.start, true),
            view!("end", self.end, true),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>> {
        vec![
            view_mut!("proj.weight", self.proj_weight, false),
            view_mut!("proj.bias", self.proj_bias, true),
            view_mut!("transitions", self.transitions, false),
            view_mut!("start", self.start, true),
            view_mut!("end", self.end, true),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    /// Exhaustive 3ⁿ enumeration oracle: (log Σ exp score, best score, best path).
    fn enumerate(crf: &CrfParams, e: &Emissions) -> (f64, f64, Vec<Label>) {
        let n = e.len();
        let total = 3usize.pow(n as u32);
        let mut scores = Vec::with_capacity(total);
        let mut best = (f64::NEG_INFINITY, Vec::new());
        for code in 0..total {
            // most significant digit = position 0, so iteration is lexicographic
            let labels: Vec<Label> = (0..n)
                .map(|i| Label::from_index(code / 3usize.pow((n - 1 - i) as u32) % 3))
                .collect();
            let mut s = crf.start[labels[0].index()] + crf.end[labels[n - 1].index()];
            for i in 0..n {
                s += e.0[[i, labels[i].index()]];
            }
            for i in 0..n - 1 {
                s += crf.transitions[[labels[i].index(), labels[i + 1].index()]];
            }
            if s > best.0 {
                best = (s, labels);
            }
            scores.push(s);
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        (log_z, best.0, best.1)
    }

    fn random_instance(rng: &mut ChaCha8Rng, n: usize) -> (CrfParams, Emissions) {
        let mut u = || rng.gen_range(-2.0..2.0);
        let mut crf = CrfParams::zeros(2);
        crf.transitions.mapv_inplace(|_| u());
        crf.start.mapv_inplace(|_| u());
        crf.end.mapv_inplace(|_| u());
        let e = Emissions(Array2::from_shape_simple_fn((n, 3), u));
        (crf, e)
    }

    #[test]
    fn emissions_affine() {
        let mut crf = CrfParams::zeros(2);
        crf.proj_bias = array![1.0, 2.0, 3.0];
        let e = crf.emissions(&array![[0.5, -1.0], [0.0, 0.0]]).unwrap();
        assert_eq!(e.0, array![[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]);

        crf.proj_weight = array![[1.0, 2.0, 0.0], [3.0, -1.0, 0.5]];
        crf.proj_bias = array![0.0, 0.0, 1.0];
        let e = crf.emissions(&array![[1.0, 2.0], [-1.0, 0.5]]).unwrap();
        // [1,2]·W = [1+6, 2-2, 0+1] + b ; [-1,0.5]·W = [-1+1.5, -2-0.5, 0.25] + b
        assert_eq!(e.0, array![[7.0, 0.0, 2.0], [0.5, -2.5, 1.25]]);
        assert!(crf.emissions(&array![[1.0, 2.0, 3.0]]).is_err());
    }

    #[test]
    fn path_score_cases() {
        let crf = CrfParams::zeros(2);
        let e = Emissions(array![[0.5, 0.0, 0.0]]);
        assert_eq!(crf.path_score(&e, &[Label::O]).unwrap(), 0.5);
        let zero = Emissions(Array2::zeros((3, 3)));
        assert_eq!(crf.path_score(&zero, &[Label::B, Label::I, Label::O]).unwrap(), 0.0);
        assert!(crf.path_score(&zero, &[Label::O]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (crf, e) = random_instance(&mut rng, 3);
        use Label::*;
        let expected = crf.start[1] + e.0[[0, 1]] + crf.transitions[[1, 2]] + e.0[[1, 2]]
            + crf.transitions[[2, 0]] + e.0[[2, 0]] + crf.end[0];
        assert!((crf.path_score(&e, &[B, I, O]).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn uniform_partition() {
        let crf = CrfParams::zeros(2);
        let one = Emissions(Array2::zeros((1, 3)));
        let two = Emissions(Array2::zeros((2, 3)));
        assert!((crf.log_partition(&one).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert!((crf.log_partition(&two).unwrap() - 9f64.ln()).abs() < 1e-12);
        assert!((crf.nll(&one, &[Label::O]).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert_eq!(crf.viterbi(&two).unwrap(), vec![Label::O, Label::O]);
    }

    #[test]
    fn saturated_gold_has_zero_nll() {
        let crf = CrfParams::zeros(2);
        let e = Emissions(array![[0.0, 100.0, 0.0], [0.0, 0.0, 100.0], [100.0, 0.0, 0.0]]);
        let nll = crf.nll(&e, &[Label::B, Label::I, Label::O]).unwrap();
        assert!(nll >= 0.0 && nll < 1e-40);
    }

    #[test]
    fn stable_for_large_scores() {
        let mut crf = CrfParams::zeros(2);
        crf.transitions.fill(50.0);
        let e = Emissions(Array2::from_elem((4, 3), -50.0));
        let z = crf.log_partition(&e).unwrap();
        assert!(z.is_finite());
        assert!((z - (-200.0 + 150.0 + 81f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn decoupled_positions_take_argmax() {
        let crf = CrfParams::zeros(2);
        let e = Emissions(array![[0.0, 5.0, 0.0], [0.0, 0.0, 3.0], [1.0, 0.0, 0.0], [0.0, 0.0, 2.0]]);
        use Label::*;
        assert_eq!(crf.viterbi(&e).unwrap(), vec![B, I, O, I]);
    }

    #[test]
    fn agrees_with_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..60 {
            let n = 1 + trial % 5;
            let (crf, e) = random_instance(&mut rng, n);
            let (log_z, best, path) = enumerate(&crf, &e);
            let z = crf.log_partition(&e).unwrap();
            assert!((z - log_z).abs() <= 1e-8 * log_z.abs().max(1.0));
            let labels: Vec<Label> = (0..n).map(|_| Label::from_index(rng.gen_range(0..3))).collect();
            let expected_nll = log_z - crf.path_score(&e, &labels).unwrap();
            assert!((crf.nll(&e, &labels).unwrap() - expected_nll).abs() <= 1e-8 * expected_nll.abs().max(1.0));
            let v = crf.viterbi(&e).unwrap();
            assert!((crf.path_score(&e, &v).unwrap() - best).abs() < 1e-12);
            assert_eq!(v, path);
        }
    }

    #[test]
    fn nll_grad_is_marginals_minus_gold() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for n in 1..=4 {
            let (crf, e) = random_instance(&mut rng, n);
            let labels: Vec<Label> = (0..n).map(|_| Label::from_index(rng.gen_range(0..3))).collect();
            let (_, g) = crf.nll_with_grad(&e, &labels).unwrap();
            let mut expected = crf.marginals(&e).unwrap();
            for (i, l) in labels.iter().enumerate() {
                expected[[i, l.index()]] -= 1.0;
            }
            assert!((&g.emissions - &expected).iter().all(|d| d.abs() < 1e-12));

            let h = 1e-6;
            for i in 0..n {
                for y in 0..3 {
                    let mut p = e.clone();
                    p.0[[i, y]] += h;
                    let mut m = e.clone();
                    m.0[[i, y]] -= h;
                    let fd = (crf.nll(&p, &labels).unwrap() - crf.nll(&m, &labels).unwrap()) / (2.0 * h);
                    assert!((fd - g.emissions[[i, y]]).abs() < 1e-6);
                }
            }
            for x in 0..3 {
                for z in 0..3 {
                    let mut p = crf.clone();
                    p.transitions[[x, z]] += h;
                    let mut m = crf.clone();
                    m.transitions[[x, z]] -= h;
                    let fd = (p.nll(&e, &labels).unwrap() - m.nll(&e, &labels).unwrap()) / (2.0 * h);
                    assert!((fd - g.transitions[[x, z]]).abs() < 1e-6);
                }
                let mut p = crf.clone();
                p.start[x] += h;
                let mut m = crf.clone();
                m.start[x] -= h;
                let fd = (p.nll(&e, &labels).unwrap() - m.nll(&e, &labels).unwrap()) / (2.0 * h);
                assert!((fd - g.start[x]).abs() < 1e-6);
                let mut p = crf.clone();
                p.end[x] += h;
                let mut m = crf.clone();
                m.end[x] -= h;
                let fd = (p.nll(&e, &labels).unwrap() - m.nll(&e, &labels).unwrap()) / (2.0 * h);
                assert!((fd - g.end[x]).abs() < 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn nll_nonnegative_and_shift_invariant(seed in 0u64..1000, n in 1usize..7, c in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (crf, e) = random_instance(&mut rng, n);
            let labels: Vec<Label> = (0..n).map(|_| Label::from_index(rng.gen_range(0..3))).collect();
            let nll = crf.nll(&e, &labels).unwrap();
            prop_assert!(nll >= 0.0);
            let shifted = Emissions(&e.0 + c);
            let z = crf.log_partition(&e).unwrap();
            let z2 = crf.log_partition(&shifted).unwrap();
            prop_assert!((z2 - z - n as f64 * c).abs() < 1e-9);
            prop_assert!((crf.nll(&shifted, &labels).unwrap() - nll).abs() < 1e-9);
            prop_assert_eq!(crf.viterbi(&shifted).unwrap(), crf.viterbi(&e).unwrap());
        }
    }
}
