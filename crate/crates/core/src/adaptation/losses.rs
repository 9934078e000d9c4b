use crate::dropout::{DropoutMode, PassKey};
use crate::error::{Error, Result};
use crate::models::{BoundBundle, ModelBundle};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Tempered cross-entropy of one stochastic pass over a labeled batch.
pub fn classification_loss_on(
    tape: &mut Tape,
    bound: &BoundBundle,
    x: Var,
    labels: &[usize],
    tau_c: f64,
    key: PassKey,
) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::Empty("source batch"));
    }
    let f = bound.extract_features(tape, x, DropoutMode::Train, key)?;
    let logits = bound.classify(tape, f, DropoutMode::Train, key)?;
    let probs = tape.softmax_temp(logits, tau_c)?;
    tape.cross_entropy(probs, labels)
}

/// Value of the source loss for one pass at `(step, pass_index = 0)`.
pub fn classification_loss(bundle: &ModelBundle, x: &Tensor, labels: &[usize], tau_c: f64, step: u64) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = bundle.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let l = classification_loss_on(&mut tape, &bound, xv, labels, tau_c, bound.key(step, 0))?;
    Ok(tape.value(l).item())
}

/// `−(1/n_s)·Σ α_s·log D_s − (1/n_t)·Σ α_t·log(1 − D_t)` over source
/// probabilities already produced by the discriminator.
pub fn weighted_domain_bce(tape: &mut Tape, d_source: Var, d_target: Var, alpha_s: &[f64], alpha_t: &[f64]) -> Result<Var> {
    let n_s = tape.value(d_source).len();
    let n_t = tape.value(d_target).len();
    if n_s == 0 || n_t == 0 {
        return Err(Error::Empty("domain batch"));
    }
    if alpha_s.iter().chain(alpha_t).all(|&a| a == 0.0) {
        return Err(Error::AllWeightsZero);
    }
    let ws: Vec<f64> = alpha_s.iter().map(|a| -a / n_s as f64).collect();
    let wt: Vec<f64> = alpha_t.iter().map(|a| -a / n_t as f64).collect();
    let log_s = tape.log_clamped(d_source)?;
    let src = tape.weighted_sum(log_s, &ws)?;
    let one_minus = tape.affine(d_target, -1.0, 1.0)?;
    let log_t = tape.log_clamped(one_minus)?;
    let tgt = tape.weighted_sum(log_t, &wt)?;
    tape.add(src, tgt)
}

/// Reweighted, uncertainty-conditioned adversarial loss.
///
/// The discriminator minimizes this loss; the gradient-reversal node with
/// coefficient `lambda_adv` makes the feature extractor maximize it.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_loss_on(
    tape: &mut Tape,
    bound: &BoundBundle,
    source_feats: Var,
    target_feats: Var,
    source_u: Option<Var>,
    target_u: Option<Var>,
    alpha_s: &[f64],
    alpha_t: &[f64],
    lambda_adv: f64,
    key: PassKey,
) -> Result<Var> {
    if alpha_s.iter().chain(alpha_t).all(|&a| a == 0.0) {
        return Err(Error::AllWeightsZero);
    }
    let target_key = PassKey::new(key.seed, key.step, key.pass_index + 1);
    let d_s = bound.discriminate(tape, source_feats, source_u, lambda_adv, DropoutMode::Train, key)?;
    let d_t = bound.discriminate(tape, target_feats, target_u, lambda_adv, DropoutMode::Train, target_key)?;
    weighted_domain_bce(tape, d_s, d_t, alpha_s, alpha_t)
}

fn check_q(q: u32) -> Result<()> {
    if q == 1 || q == 2 {
        Ok(())
    } else {
        Err(Error::invalid("discrepancy_q", format!("must be 1 or 2, got {q}")))
    }
}

/// `|ū_s − ū_t|^q` of the per-domain batch means.
pub fn uncertainty_discrepancy(source_u: &[f64], target_u: &[f64], q: u32) -> Result<f64> {
    check_q(q)?;
    if source_u.is_empty() || target_u.is_empty() {
        return Err(Error::Empty("domain batch"));
    }
    let ms = source_u.iter().sum::<f64>() / source_u.len() as f64;
    let mt = target_u.iter().sum::<f64>() / target_u.len() as f64;
    Ok((ms - mt).abs().powi(q as i32))
}

pub fn uncertainty_discrepancy_on(tape: &mut Tape, source_u: Var, target_u: Var, q: u32) -> Result<Var> {
    check_q(q)?;
    let ms = tape.mean(source_u)?;
    let mt = tape.mean(target_u)?;
    let diff = tape.sub(ms, mt)?;
    tape.abs_pow(diff, f64::from(q))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bce(ds: &[f64], dt: &[f64], a_s: &[f64], a_t: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::vector(ds.to_vec()).unwrap());
        let t = tape.constant(Tensor::vector(dt.to_vec()).unwrap());
        let l = weighted_domain_bce(&mut tape, s, t, a_s, a_t)?;
        Ok(tape.value(l).item())
    }

    #[test]
    fn half_probabilities_give_two_ln_two() {
        let v = bce(&[0.5; 3], &[0.5; 4], &[1.0; 3], &[1.0; 4]).unwrap();
        assert!((v - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((v - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn hand_evaluated_example() {
        let v = bce(&[0.8, 0.6], &[0.3], &[1.0, 1.0], &[1.0]).unwrap();
        let expect = -0.5 * (0.8f64.ln() + 0.6f64.ln()) - 0.7f64.ln();
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 0.7237).abs() < 1e-4);
    }

    #[test]
    fn all_zero_weights_signal_skip() {
        assert!(matches!(
            bce(&[0.5], &[0.5], &[0.0], &[0.0]),
            Err(Error::AllWeightsZero)
        ));
    }

    #[test]
    fn discrepancy_examples() {
        assert_eq!(uncertainty_discrepancy(&[0.3, 0.1], &[0.2], 2).unwrap(), 0.0);
        assert!((uncertainty_discrepancy(&[0.2], &[0.5], 2).unwrap() - 0.09).abs() < 1e-12);
        assert!((uncertainty_discrepancy(&[0.2], &[0.5], 1).unwrap() - 0.3).abs() < 1e-12);
        assert!(uncertainty_discrepancy(&[], &[0.5], 2).is_err());
        assert!(uncertainty_discrepancy(&[0.1], &[0.5], 3).is_err());
    }

    #[test]
    fn tape_discrepancy_matches_value() {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::vector(vec![0.1, 0.3]).unwrap());
        let t = tape.leaf(Tensor::vector(vec![0.6, 0.4, 0.5]).unwrap());
        let l = uncertainty_discrepancy_on(&mut tape, s, t, 2).unwrap();
        let expect = uncertainty_discrepancy(&[0.1, 0.3], &[0.6, 0.4, 0.5], 2).unwrap();
        assert!((tape.value(l).item() - expect).abs() < 1e-15);
        let g = tape.backward(l).unwrap();
        // d/ds_i (ms - mt)^2 = 2(ms - mt)/n_s
        let d = 0.2 - 0.5;
        for &v in g.wrt(s).unwrap() {
            assert!((v - 2.0 * d / 2.0).abs() < 1e-12);
        }
        for &v in g.wrt(t).unwrap() {
            assert!((v + 2.0 * d / 3.0).abs() < 1e-12);
        }
    }
}
