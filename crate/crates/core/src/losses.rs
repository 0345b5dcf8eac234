//! Label validation and classification losses.

use crate::error::{Error, Result};
use crate::graph::{log_sum_exp, Graph, LossMode, Var};
use crate::tensor::Tensor;

/// Builds a `[B, K]` target matrix from per-item lists of present classes.
pub fn target_matrix(labels: &[&[usize]], classes: usize, mode: LossMode) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (row, present) in labels.iter().enumerate() {
        if mode == LossMode::SingleLabel && present.len() != 1 {
            return Err(Error::invalid(
                "losses",
                format!(
                    "single-label targets need exactly one positive class, item {row} has {}",
                    present.len()
                ),
            ));
        }
        for &c in *present {
            if c >= classes {
                return Err(Error::invalid(
                    "losses",
                    format!("class {c} out of range for {classes} classes"),
                ));
            }
            t.set(&[row, c], 1.0);
        }
    }
    Ok(t)
}

/// Mean cross-entropy as a graph node, validating labels first.
pub fn loss(g: &mut Graph, logits: Var, labels: &[&[usize]], mode: LossMode) -> Result<Var> {
    let shape = g.value(logits).shape().to_vec();
    let &[batch, classes] = &shape[..] else {
        return Err(Error::invalid("losses", format!("logits must be [B, K], got {shape:?}")));
    };
    if labels.len() != batch {
        return Err(Error::invalid(
            "losses",
            format!("{} label sets for a batch of {batch}", labels.len()),
        ));
    }
    let targets = target_matrix(labels, classes, mode)?;
    g.cross_entropy(logits, &targets, mode)
}

/// Plain-value evaluation of the same loss, for reporting.
pub fn loss_value(logits: &[f64], present: &[usize], mode: LossMode) -> Result<f64> {
    let t = target_matrix(&[present], logits.len(), mode)?;
    Ok(match mode {
        LossMode::MultiLabel => {
            logits
                .iter()
                .zip(t.data())
                .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
                .sum::<f64>()
                / logits.len() as f64
        }
        LossMode::SingleLabel => log_sum_exp(logits) - logits[present[0]],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn graph_loss(logits: &[f64], labels: &[usize], mode: LossMode) -> f64 {
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(vec![1, logits.len()], logits.to_vec()).unwrap());
        let l = loss(&mut g, z, &[labels], mode).unwrap();
        g.value(l).data()[0]
    }

    #[test]
    fn uniform_two_class_softmax_is_ln2() {
        let v = graph_loss(&[0.0, 0.0], &[1], LossMode::SingleLabel);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn confident_sigmoid_is_near_zero() {
        let v = graph_loss(&[30.0], &[0], LossMode::MultiLabel);
        assert!(v.abs() < 1e-9);
    }

    #[test]
    fn matches_textbook_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let k = rng.random_range(2..6);
            let z: Vec<f64> = (0..k).map(|_| rng.random_range(-4.0..4.0)).collect();
            let pos = rng.random_range(0..k);

            // softmax: -log(exp(z_c) / sum exp(z))
            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            let want = -(z[pos].exp() / denom).ln();
            assert!((graph_loss(&z, &[pos], LossMode::SingleLabel) - want).abs() < 1e-12);

            // sigmoid: mean of -t log p - (1-t) log(1-p)
            let present: Vec<usize> = (0..k).filter(|_| rng.random_bool(0.5)).collect();
            let want: f64 = (0..k)
                .map(|c| {
                    let p = 1.0 / (1.0 + (-z[c]).exp());
                    if present.contains(&c) { -p.ln() } else { -(1.0 - p).ln() }
                })
                .sum::<f64>()
                / k as f64;
            assert!((graph_loss(&z, &present, LossMode::MultiLabel) - want).abs() < 1e-12);
            assert!((loss_value(&z, &present, LossMode::MultiLabel).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn single_label_cardinality_is_checked() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 3]));
        assert!(loss(&mut g, z, &[&[0, 1]], LossMode::SingleLabel).is_err());
        assert!(loss(&mut g, z, &[&[]], LossMode::SingleLabel).is_err());
        assert!(loss(&mut g, z, &[&[3]], LossMode::MultiLabel).is_err());
    }
}
