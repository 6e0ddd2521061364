//! ITC, ITM and MLM losses with their gradients, plus token masking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{RammError, Result};
use crate::model::vocab::{TokenSequence, MASK, SPECIALS};
use crate::tensor::ops::{self, cross_entropy, matmul, matmul_nt, matmul_tn, soft_cross_entropy};
use crate::tensor::{Real, Tensor};

/// Soft target rows for both ITC directions (`B × B`, rows sum to 1).
#[derive(Clone, Debug, PartialEq)]
pub struct ItcTargets<T> {
    pub image_to_text: Tensor<T>,
    pub text_to_image: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ItcOutput<T> {
    pub loss: T,
    pub d_text: Tensor<T>,
    pub d_image: Tensor<T>,
}

fn check_batch<T: Real>(text: &Tensor<T>, image: &Tensor<T>) -> Result<()> {
    if text.shape() != image.shape() || text.rank() != 2 {
        return Err(RammError::Dimension {
            op: "itc_loss",
            lhs: text.shape().to_vec(),
            rhs: image.shape().to_vec(),
        });
    }
    if text.rows() < 2 {
        return Err(RammError::Config("ITC needs a batch of at least 2 for negatives".into()));
    }
    Ok(())
}

/// Symmetric InfoNCE over `B × d_proj` unit vectors: the mean of the
/// image→text and text→image cross-entropies against the diagonal.
pub fn itc_loss<T: Real>(text: &Tensor<T>, image: &Tensor<T>, tau: T) -> Result<T> {
    Ok(itc_loss_with_grad(text, image, tau, None)?.loss)
}

/// As [`itc_loss`], optionally against soft targets, with gradients for both inputs.
pub fn itc_loss_with_grad<T: Real>(
    text: &Tensor<T>,
    image: &Tensor<T>,
    tau: T,
    targets: Option<&ItcTargets<T>>,
) -> Result<ItcOutput<T>> {
    check_batch(text, image)?;
    let b = text.rows();
    let sim = matmul_nt(image, text)?.scale(T::one() / tau);
    let sim_t = sim.transpose();
    let ((l_i2t, g_i2t), (l_t2i, g_t2i)) = match targets {
        Some(t) => (
            soft_cross_entropy(&sim, &t.image_to_text)?,
            soft_cross_entropy(&sim_t, &t.text_to_image)?,
        ),
        None => {
            let diag: Vec<usize> = (0..b).collect();
            (cross_entropy(&sim, &diag)?, cross_entropy(&sim_t, &diag)?)
        }
    };
    let half = T::lit(0.5);
    let d_sim = g_i2t.add(&g_t2i.transpose())?.scale(half / tau);
    Ok(ItcOutput {
        loss: (l_i2t + l_t2i) * half,
        d_image: matmul(&d_sim, text)?,
        d_text: matmul_tn(&d_sim, image)?,
    })
}

/// Momentum-distilled targets: `weight · softmax(sim_m / τ) + (1 − weight) · I`.
pub fn momentum_targets<T: Real>(text_m: &Tensor<T>, image_m: &Tensor<T>, tau: T, weight: T) -> Result<ItcTargets<T>> {
    check_batch(text_m, image_m)?;
    let sim = matmul_nt(image_m, text_m)?.scale(T::one() / tau);
    let mix = |p: Tensor<T>| {
        let mut p = p.scale(weight);
        for i in 0..p.rows() {
            p.row_mut(i)[i] += T::one() - weight;
        }
        p
    };
    Ok(ItcTargets {
        image_to_text: mix(ops::softmax_rows(&sim)),
        text_to_image: mix(ops::softmax_rows(&sim.transpose())),
    })
}

/// Two-class cross-entropy over ITM logits (`N × 2`, class 1 = matched).
pub fn itm_loss<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    if labels.len() > 1 && labels.iter().all(|&l| l == labels[0]) {
        log::warn!("ITM batch has only label {}", labels[0]);
    }
    cross_entropy(logits, labels)
}

/// Cross-entropy at the masked positions only. `logits` covers every
/// position of the sequence; the gradient is zero elsewhere.
pub fn mlm_loss<T: Real>(logits: &Tensor<T>, targets: &[(usize, u32)]) -> Result<(T, Tensor<T>)> {
    if targets.is_empty() {
        return Err(RammError::Contract("MLM needs at least one masked position".into()));
    }
    let v = logits.cols();
    let mut rows = Vec::with_capacity(targets.len());
    let mut ids = Vec::with_capacity(targets.len());
    for &(pos, id) in targets {
        if pos >= logits.rows() {
            return Err(RammError::Index {
                what: "masked position",
                index: pos,
                bound: logits.rows(),
            });
        }
        rows.push(logits.row(pos));
        ids.push(id as usize);
    }
    let picked = Tensor::stack_rows(&rows)?;
    let (loss, g) = cross_entropy(&picked, &ids)?;
    let mut d = Tensor::zeros(logits.shape());
    for (k, &(pos, _)) in targets.iter().enumerate() {
        for (a, &b) in d.row_mut(pos).iter_mut().zip(g.row(k)) {
            *a += b;
        }
    }
    debug_assert_eq!(d.cols(), v);
    Ok((loss, d))
}

/// Corrupted input plus `(position, original id)` for every target.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedTokens {
    pub input: TokenSequence,
    pub targets: Vec<(usize, u32)>,
}

/// Select each non-CLS position with probability `rate` (at least one is
/// forced), then replace 80% with `[MASK]`, 10% with a random
/// non-special token and leave 10% unchanged.
pub fn mask_tokens(seq: &TokenSequence, rate: f64, vocab_size: usize, seed: u64) -> Result<MaskedTokens> {
    let ids = seq.ids();
    if ids.len() < 2 {
        return Err(RammError::Contract("masking needs at least one non-CLS token".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = (1..ids.len()).filter(|_| rng.random::<f64>() < rate).collect();
    if chosen.is_empty() {
        chosen.push(rng.random_range(1..ids.len()));
    }
    let n_special = SPECIALS.len() as u32;
    let mut input = ids.to_vec();
    let mut targets = Vec::with_capacity(chosen.len());
    for pos in chosen {
        targets.push((pos, ids[pos]));
        let u: f64 = rng.random();
        if u < 0.8 {
            input[pos] = MASK;
        } else if u < 0.9 {
            input[pos] = if vocab_size as u32 > n_special {
                rng.random_range(n_special..vocab_size as u32)
            } else {
                MASK
            };
        }
    }
    Ok(MaskedTokens {
        input: TokenSequence::new(input)?,
        targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::layers::Init;
    use crate::model::vocab::CLS;
    use crate::tensor::{finite_difference_gradient, relative_error};

    fn unit_rows(b: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut t: Tensor<f64> = Init::new(seed).normal(&[b, d], 1.0);
        for i in 0..b {
            let n = t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            t.row_mut(i).iter_mut().for_each(|x| *x /= n);
        }
        t
    }

    #[test]
    fn itc_two_by_two_closed_form() {
        let e = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let loss = itc_loss(&e, &e, 1.0).unwrap();
        let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((loss - want).abs() < 1e-12);
        assert!((want - 0.3133).abs() < 1e-4);
        let l05 = itc_loss(&e, &e, 0.5).unwrap();
        let l01 = itc_loss(&e, &e, 0.1).unwrap();
        assert!(l05 < loss && l01 < l05);
    }

    #[test]
    fn itc_uniform_is_ln_b() {
        let b = 5;
        let same = Tensor::from_fn(&[b, 3], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
        let loss = itc_loss(&same, &same, 0.07).unwrap();
        assert!((loss - (b as f64).ln()).abs() < 1e-12);
        assert!(matches!(
            itc_loss(&same.slice_rows(0, 1), &same.slice_rows(0, 1), 0.07),
            Err(RammError::Config(_))
        ));
    }

    #[test]
    fn itc_symmetric_and_gradients() {
        let t = unit_rows(4, 3, 1);
        let i = unit_rows(4, 3, 2);
        let a = itc_loss(&t, &i, 0.3).unwrap();
        let b = itc_loss(&i, &t, 0.3).unwrap();
        assert!((a - b).abs() < 1e-12);

        let tm = unit_rows(4, 3, 3);
        let im = unit_rows(4, 3, 4);
        let targets = momentum_targets(&tm, &im, 0.3, 0.4).unwrap();
        for soft in [None, Some(&targets)] {
            let out = itc_loss_with_grad(&t, &i, 0.3, soft).unwrap();
            let fd = finite_difference_gradient(|x| Ok(itc_loss_with_grad(x, &i, 0.3, soft)?.loss), &t, 1e-6).unwrap();
            assert!(relative_error(&out.d_text, &fd) < 1e-6);
            let fd = finite_difference_gradient(|x| Ok(itc_loss_with_grad(&t, x, 0.3, soft)?.loss), &i, 1e-6).unwrap();
            assert!(relative_error(&out.d_image, &fd) < 1e-6);
        }
        for r in 0..4 {
            assert!((targets.image_to_text.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn itc_decreases_with_diagonal_margin() {
        // Unit vectors cannot move s_ii alone, so check the loss as a
        // function of the similarity matrix it is built from.
        let sim_loss = |s: &Tensor<f64>| {
            let diag: Vec<usize> = (0..s.rows()).collect();
            let a = cross_entropy(s, &diag).unwrap().0;
            let b = cross_entropy(&s.transpose(), &diag).unwrap().0;
            (a + b) / 2.0
        };
        let s: Tensor<f64> = Init::new(7).normal(&[4, 4], 1.0);
        let mut bumped = s.clone();
        for k in 0..4 {
            bumped.row_mut(k)[k] += 0.3;
        }
        assert!(sim_loss(&bumped) < sim_loss(&s));
    }

    #[test]
    fn itm_cases() {
        let perfect = Tensor::from_rows(&[&[100.0, 0.0], &[0.0, 100.0]]);
        assert!(itm_loss(&perfect, &[0, 1]).unwrap().0 < 1e-12);
        let uniform = Tensor::<f64>::zeros(&[3, 2]);
        assert!((itm_loss(&uniform, &[0, 1, 1]).unwrap().0 - 2f64.ln()).abs() < 1e-12);
        let l = Tensor::from_rows(&[&[0.5, -0.2], &[1.0, 2.0]]);
        let want = (-(0.5f64.exp() / (0.5f64.exp() + (-0.2f64).exp())).ln()
            - (2f64.exp() / (1f64.exp() + 2f64.exp())).ln())
            / 2.0;
        assert!((itm_loss(&l, &[0, 1]).unwrap().0 - want).abs() < 1e-12);
    }

    #[test]
    fn mlm_cases() {
        let v = 7;
        let uniform = Tensor::<f64>::zeros(&[4, v]);
        let (l, d) = mlm_loss(&uniform, &[(1, 5), (3, 4)]).unwrap();
        assert!((l - (v as f64).ln()).abs() < 1e-12);
        assert!(d.row(0).iter().chain(d.row(2)).all(|&x| x == 0.0));
        let mut perfect = Tensor::<f64>::zeros(&[3, v]);
        perfect.row_mut(2)[6] = 100.0;
        assert!(mlm_loss(&perfect, &[(2, 6)]).unwrap().0 < 1e-12);
        let logits: Tensor<f64> = Init::new(3).normal(&[3, v], 1.0);
        let (_, d) = mlm_loss(&logits, &[(1, 2), (2, 0)]).unwrap();
        let fd = finite_difference_gradient(|x| Ok(mlm_loss(x, &[(1, 2), (2, 0)])?.0), &logits, 1e-6).unwrap();
        assert!(relative_error(&d, &fd) < 1e-6);
        let lp = |r: &[f64], t: usize| r[t] - r.iter().map(|x| x.exp()).sum::<f64>().ln();
        let want = -(lp(logits.row(1), 2) + lp(logits.row(2), 0)) / 2.0;
        assert!((mlm_loss(&logits, &[(1, 2), (2, 0)]).unwrap().0 - want).abs() < 1e-12);
    }

    fn seq(n: usize) -> TokenSequence {
        let mut ids = vec![CLS];
        ids.extend((0..n).map(|i| 4 + (i % 20) as u32));
        TokenSequence::new(ids).unwrap()
    }

    #[test]
    fn masking_rules() {
        let s = seq(12);
        let m = mask_tokens(&s, 0.0, 30, 1).unwrap();
        assert_eq!(m.targets.len(), 1);
        let changed = (0..s.len()).filter(|&p| m.input.ids()[p] != s.ids()[p]).count();
        assert!(changed <= 1);
        assert_eq!(m.input.ids()[0], CLS);

        let m = mask_tokens(&s, 1.0, 30, 2).unwrap();
        assert_eq!(m.targets.iter().map(|t| t.0).collect::<Vec<_>>(), (1..13).collect::<Vec<_>>());
        assert_eq!(mask_tokens(&s, 0.15, 30, 5).unwrap(), mask_tokens(&s, 0.15, 30, 5).unwrap());
        assert!(mask_tokens(&seq(0), 0.5, 30, 1).is_err());
    }

    #[test]
    fn masking_rate_and_split() {
        let s = seq(10_000);
        let m = mask_tokens(&s, 0.15, 30, 42).unwrap();
        let rate = m.targets.len() as f64 / 10_000.0;
        assert!((rate - 0.15).abs() < 0.01, "rate {rate}");
        let masked = m.targets.iter().filter(|(p, _)| m.input.ids()[*p] == MASK).count() as f64;
        assert!((masked / m.targets.len() as f64 - 0.8).abs() < 0.03);
    }
}
