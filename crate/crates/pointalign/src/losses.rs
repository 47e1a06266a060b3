//! Training losses: source-domain cross entropy, twin-classifier
//! discrepancy, RBF-kernel maximum mean discrepancy, and the two composite
//! step objectives.

use crate::tensor::{Element, Tensor, TensorError, TensorResult};

/// Weights of the discrepancy and MMD terms in the composite objectives.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub lambda: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda: 1.0, beta: 1.0 }
    }
}

/// RBF bandwidth selection. Bandwidths are variances (sigma squared).
#[derive(Clone, Debug)]
pub enum Bandwidths {
    /// Median of pairwise squared distances over the joint batch, scaled by
    /// each factor. Falls back to 1.0 when the median is zero.
    Median { factors: Vec<f64> },
    Fixed(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct KernelConfig {
    pub bandwidths: Bandwidths,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            bandwidths: Bandwidths::Median {
                factors: vec![0.5, 1.0, 2.0],
            },
        }
    }
}

/// Mean negative log-probability of the true class. Probabilities are
/// clamped below at 1e-12 before the log.
pub fn cross_entropy<'t, E: Element>(
    probs: Tensor<'t, E>,
    labels: &[usize],
) -> TensorResult<Tensor<'t, E>> {
    probs.nll(labels)
}

/// Mean absolute difference between two classifiers' softmax rows
/// (mean over batch and classes).
pub fn discrepancy<'t, E: Element>(
    p1: Tensor<'t, E>,
    p2: Tensor<'t, E>,
) -> TensorResult<Tensor<'t, E>> {
    Ok(p1.sub(p2)?.abs().mean_all())
}

/// Biased squared-MMD estimator with a multi-bandwidth RBF kernel:
/// `mean(k(s,s)) - 2 mean(k(s,t)) + mean(k(t,t))`. Rows are samples.
pub fn mmd_rbf<'t, E: Element>(
    h_s: Tensor<'t, E>,
    h_t: Tensor<'t, E>,
    kernel: &KernelConfig,
) -> TensorResult<Tensor<'t, E>> {
    let (bs, bt) = (h_s.rows(), h_t.rows());
    if bs == 0 || bt == 0 {
        return Err(TensorError::InvalidShape {
            op: "mmd_rbf",
            shape: format!("[{bs}, ...] vs [{bt}, ...]"),
            detail: "both sample sets must be non-empty".into(),
        });
    }
    let d_ss = h_s.pairwise_sqdist(h_s)?;
    let d_st = h_s.pairwise_sqdist(h_t)?;
    let d_tt = h_t.pairwise_sqdist(h_t)?;

    let bandwidths = match &kernel.bandwidths {
        Bandwidths::Fixed(b) => b.clone(),
        Bandwidths::Median { factors } => {
            let median = joint_median_sqdist(
                &d_ss.value_f64(),
                bs,
                &d_st.value_f64(),
                &d_tt.value_f64(),
                bt,
            );
            let median = if median > 0.0 { median } else { 1.0 };
            factors.iter().map(|f| f * median).collect()
        }
    };

    let k_ss = d_ss.rbf_kernel_sum(&bandwidths).scale(1.0 / (bs * bs) as f64);
    let k_st = d_st.rbf_kernel_sum(&bandwidths).scale(2.0 / (bs * bt) as f64);
    let k_tt = d_tt.rbf_kernel_sum(&bandwidths).scale(1.0 / (bt * bt) as f64);
    k_ss.sub(k_st)?.add(k_tt)
}

/// Median over distinct pairs (i < j) of the joint sample set, assembled
/// from the three pairwise-distance blocks.
fn joint_median_sqdist(d_ss: &[f64], bs: usize, d_st: &[f64], d_tt: &[f64], bt: usize) -> f64 {
    let mut all = Vec::with_capacity(bs * (bs - 1) / 2 + bs * bt + bt * (bt - 1) / 2);
    for i in 0..bs {
        for j in (i + 1)..bs {
            all.push(d_ss[i * bs + j]);
        }
    }
    all.extend_from_slice(d_st);
    for i in 0..bt {
        for j in (i + 1)..bt {
            all.push(d_tt[i * bt + j]);
        }
    }
    if all.is_empty() {
        return 0.0;
    }
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = all.len();
    if n % 2 == 1 {
        all[n / 2]
    } else {
        0.5 * (all[n / 2 - 1] + all[n / 2])
    }
}

/// Classifier-step objective: `l_cls - lambda * l_dis`.
pub fn step1_objective<'t, E: Element>(
    l_cls: Tensor<'t, E>,
    l_dis: Tensor<'t, E>,
    w: &LossWeights,
) -> TensorResult<Tensor<'t, E>> {
    l_cls.sub(l_dis.scale(w.lambda))
}

/// Feature-step objective: `l_cls + lambda * l_dis + beta * l_mmd`.
pub fn step2_objective<'t, E: Element>(
    l_cls: Tensor<'t, E>,
    l_dis: Tensor<'t, E>,
    l_mmd: Tensor<'t, E>,
    w: &LossWeights,
) -> TensorResult<Tensor<'t, E>> {
    l_cls.add(l_dis.scale(w.lambda))?.add(l_mmd.scale(w.beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradcheck, Tape};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
        (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect()
    }

    fn random_dist_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let raw: Vec<f64> = (0..cols).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            out.extend(raw.iter().map(|v| v / s));
        }
        out
    }

    #[test]
    fn cross_entropy_of_confident_correct_prediction_is_near_zero() {
        let tape: Tape<f64> = Tape::new();
        let p = tape.constant(vec![1.0 - 1e-13, 1e-13], &[1, 2]);
        let ce = cross_entropy(p, &[0]).unwrap().value()[0];
        assert!(ce <= 1e-11, "{ce}");
    }

    #[test]
    fn cross_entropy_of_uniform_rows_is_ln_k() {
        for k in [2usize, 3, 10] {
            let tape: Tape<f64> = Tape::new();
            let p = tape.constant(vec![1.0 / k as f64; 2 * k], &[2, k]);
            let ce = cross_entropy(p, &[0, k - 1]).unwrap().value()[0];
            assert!((ce - (k as f64).ln()).abs() <= 1e-12, "K={k}: {ce}");
        }
    }

    #[test]
    fn cross_entropy_uniform_three_classes_value() {
        let tape: Tape<f64> = Tape::new();
        let p = tape.constant(vec![1.0 / 3.0; 3], &[1, 3]);
        let ce = cross_entropy(p, &[1]).unwrap().value()[0];
        assert!((ce - 1.0986122886681098).abs() < 1e-12);
    }

    #[test]
    fn discrepancy_is_zero_for_identical_and_definitional_for_opposites() {
        let tape: Tape<f64> = Tape::new();
        let p = tape.constant(vec![0.3, 0.7, 0.5, 0.5], &[2, 2]);
        assert_eq!(discrepancy(p, p).unwrap().value()[0], 0.0);
        let a = tape.constant(vec![1.0, 0.0], &[1, 2]);
        let b = tape.constant(vec![0.0, 1.0], &[1, 2]);
        assert_eq!(discrepancy(a, b).unwrap().value()[0], 1.0);
    }

    #[test]
    fn discrepancy_is_symmetric_and_bounded_on_random_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let k = rng.random_range(2..8);
            let b = rng.random_range(1..6);
            let tape: Tape<f64> = Tape::new();
            let p1 = tape.constant(random_dist_rows(&mut rng, b, k), &[b, k]);
            let p2 = tape.constant(random_dist_rows(&mut rng, b, k), &[b, k]);
            let d12 = discrepancy(p1, p2).unwrap().value()[0];
            let d21 = discrepancy(p2, p1).unwrap().value()[0];
            assert!((d12 - d21).abs() < 1e-15);
            let bound = 2.0 * (k as f64 - 1.0) / k as f64;
            assert!(d12 >= 0.0 && d12 <= bound + 1e-12, "{d12} vs {bound}");
        }
    }

    #[test]
    fn discrepancy_shape_mismatch_errors() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.constant(vec![0.5; 4], &[2, 2]);
        let b = tape.constant(vec![0.5; 6], &[2, 3]);
        assert!(discrepancy(a, b).is_err());
    }

    #[test]
    fn mmd_vanishes_on_identical_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tape: Tape<f64> = Tape::new();
        let h = tape.constant(random_rows(&mut rng, 12, 6), &[12, 6]);
        let v = mmd_rbf(h, h, &KernelConfig::default()).unwrap().value()[0];
        assert!(v.abs() <= 1e-12, "{v}");
    }

    #[test]
    fn mmd_singletons_match_closed_form() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.constant(vec![0.2, -0.4, 1.0], &[1, 3]);
        let b = tape.constant(vec![-0.3, 0.9, 0.1], &[1, 3]);
        let sq: f64 = [0.5f64, -1.3, 0.9].iter().map(|d| d * d).sum();
        for sigma2 in [0.5, 1.0, 3.7] {
            let cfg = KernelConfig { bandwidths: Bandwidths::Fixed(vec![sigma2]) };
            let v = mmd_rbf(a, b, &cfg).unwrap().value()[0];
            let expect = 2.0 - 2.0 * (-sq / (2.0 * sigma2)).exp();
            assert!((v - expect).abs() < 1e-12, "sigma2={sigma2}: {v} vs {expect}");
        }
    }

    #[test]
    fn mmd_is_symmetric_and_nonnegative_on_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let c = rng.random_range(1..6);
            let bs = rng.random_range(1..8);
            let bt = rng.random_range(1..8);
            let tape: Tape<f64> = Tape::new();
            let s = tape.constant(random_rows(&mut rng, bs, c), &[bs, c]);
            let t = tape.constant(random_rows(&mut rng, bt, c), &[bt, c]);
            let st = mmd_rbf(s, t, &KernelConfig::default()).unwrap().value()[0];
            let ts = mmd_rbf(t, s, &KernelConfig::default()).unwrap().value()[0];
            assert!(st >= -1e-9, "negative mmd {st}");
            assert!((st - ts).abs() < 1e-12, "asymmetric: {st} vs {ts}");
        }
    }

    #[test]
    fn mmd_median_fallback_on_coincident_points() {
        let tape: Tape<f64> = Tape::new();
        let s = tape.constant(vec![0.5; 6], &[2, 3]);
        let t = tape.constant(vec![0.5; 3], &[1, 3]);
        let v = mmd_rbf(s, t, &KernelConfig::default()).unwrap().value()[0];
        assert!(v.abs() <= 1e-12);
    }

    #[test]
    fn mmd_feature_width_mismatch_errors() {
        let tape: Tape<f64> = Tape::new();
        let s = tape.constant(vec![0.0; 6], &[2, 3]);
        let t = tape.constant(vec![0.0; 8], &[2, 4]);
        assert!(mmd_rbf(s, t, &KernelConfig::default()).is_err());
    }

    #[test]
    fn objectives_arithmetic() {
        let tape: Tape<f64> = Tape::new();
        let w = LossWeights::default();
        let l_cls = tape.constant(vec![1.0], &[1]);
        let l_dis = tape.constant(vec![0.5], &[1]);
        assert_eq!(step1_objective(l_cls, l_dis, &w).unwrap().value()[0], 0.5);
        let w0 = LossWeights { lambda: 0.0, beta: 1.0 };
        assert_eq!(step1_objective(l_cls, l_dis, &w0).unwrap().value()[0], 1.0);

        let a = tape.constant(vec![1.0], &[1]);
        let b = tape.constant(vec![2.0], &[1]);
        let c = tape.constant(vec![3.0], &[1]);
        assert_eq!(step2_objective(a, b, c, &w).unwrap().value()[0], 6.0);
        assert_eq!(
            step2_objective(a, b, c, &LossWeights { lambda: 1.0, beta: 0.0 }).unwrap().value()[0],
            3.0
        );
        let zero = tape.constant(vec![0.0], &[1]);
        assert_eq!(step2_objective(zero, zero, zero, &w).unwrap().value()[0], 0.0);
    }

    #[test]
    fn step1_gradient_sign_on_discrepancy_is_negative() {
        let tape: Tape<f64> = Tape::new();
        let l_cls = tape.leaf(vec![1.0], &[1]);
        let l_dis = tape.leaf(vec![0.5], &[1]);
        let obj = step1_objective(l_cls, l_dis, &LossWeights::default()).unwrap();
        tape.backward(obj).unwrap();
        assert_eq!(l_cls.grad().unwrap()[0], 1.0);
        assert_eq!(l_dis.grad().unwrap()[0], -1.0);
    }

    #[test]
    fn losses_pass_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        // cross entropy through softmax
        let logits = random_rows(&mut rng, 4, 3);
        let report = gradcheck::<f64, _>(
            |_t, x| cross_entropy(x.softmax()?, &[0, 2, 1, 1]),
            &logits,
            &[4, 3],
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.pass, "cross_entropy: {report:?}");

        // discrepancy through softmax on both sides
        let l2 = random_rows(&mut rng, 3, 4);
        let fixed = random_rows(&mut rng, 3, 4);
        let report = gradcheck::<f64, _>(
            |t, x| {
                let other = t.constant(fixed.iter().map(|&v| v).collect(), &[3, 4]).softmax()?;
                discrepancy(x.softmax()?, other)
            },
            &l2,
            &[3, 4],
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.pass, "discrepancy: {report:?}");

        // mmd with fixed bandwidths (median selection is treated as a
        // constant, so check against fixed bandwidths for differentiability)
        let hs = random_rows(&mut rng, 4, 3);
        let ht = random_rows(&mut rng, 5, 3);
        let cfg = KernelConfig { bandwidths: Bandwidths::Fixed(vec![0.5, 1.0, 2.0]) };
        let report = gradcheck::<f64, _>(
            |t, x| {
                let other = t.constant(ht.iter().map(|&v| v).collect(), &[5, 3]);
                mmd_rbf(x, other, &cfg)
            },
            &hs,
            &[4, 3],
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.pass, "mmd: {report:?}");
    }
}
