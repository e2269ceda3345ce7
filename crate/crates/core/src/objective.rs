//! Composite training loss: fused gender term with two auxiliary gender
//! terms, plus the mean attribute cross-entropy.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{ForwardOutputs, GENDER_CLASSES};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of each auxiliary (direct and mediated) gender term.
    pub alpha: f64,
    pub lambda_gender: f64,
    pub lambda_attribute: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            lambda_gender: 0.5,
            lambda_attribute: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.lambda_gender, self.lambda_attribute]
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(Error::Config(format!(
                "loss weights must be finite and nonnegative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// `CE(fused) + alpha * (CE(direct) + CE(mediated))`. Gender labels never
/// use the ignore index.
pub fn gender_loss(
    g: &mut Graph,
    fused: Var,
    direct: Var,
    mediated: Var,
    labels: &[i64],
    alpha: f64,
) -> Result<Var> {
    if let Some(&l) = labels
        .iter()
        .find(|&&l| !(0..GENDER_CLASSES as i64).contains(&l))
    {
        return Err(Error::Label {
            label: l,
            classes: GENDER_CLASSES,
        });
    }
    let main = g.cross_entropy(fused, labels)?;
    if alpha == 0.0 {
        return Ok(main);
    }
    let a = g.cross_entropy(direct, labels)?;
    let b = g.cross_entropy(mediated, labels)?;
    let aux = g.add(a, b)?;
    let aux = g.scale(aux, alpha)?;
    g.add(main, aux)
}

/// Mean over attributes of each attribute's ignore-aware cross-entropy.
pub fn attribute_loss(g: &mut Graph, logits: &[Var], labels: &[Vec<i64>]) -> Result<Var> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::shape(
            "attribute_loss",
            &[logits.len()],
            &[labels.len()],
        ));
    }
    let mut terms = Vec::with_capacity(logits.len());
    for (&l, y) in logits.iter().zip(labels) {
        terms.push(g.cross_entropy(l, y)?);
    }
    let stacked = g.concat(&terms, 0)?;
    g.mean(stacked, 0)
}

pub fn total_loss(
    g: &mut Graph,
    gender: Var,
    attribute: Var,
    weights: &LossWeights,
) -> Result<Var> {
    let a = g.scale(gender, weights.lambda_gender)?;
    let b = g.scale(attribute, weights.lambda_attribute)?;
    g.add(a, b)
}

/// The three loss nodes of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub gender: Var,
    pub attribute: Var,
}

/// Full objective for one forward pass. `attribute_labels[a][i]` is the
/// label of sample `i` for attribute `a`.
pub fn objective(
    g: &mut Graph,
    out: &ForwardOutputs,
    gender_labels: &[i64],
    attribute_labels: &[Vec<i64>],
    weights: &LossWeights,
) -> Result<LossTerms> {
    let gender = gender_loss(
        g,
        out.gender_fused,
        out.gender_direct,
        out.gender_mediated,
        gender_labels,
        weights.alpha,
    )?;
    let attribute = attribute_loss(g, &out.attributes, attribute_labels)?;
    let total = total_loss(g, gender, attribute, weights)?;
    Ok(LossTerms {
        total,
        gender,
        attribute,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::IGNORE_INDEX;
    use crate::tensor::DenseTensor;

    fn logits(g: &mut Graph, rows: &[[f64; 3]]) -> Var {
        let data = rows.iter().flatten().copied().collect();
        g.input(&DenseTensor::new([rows.len(), 3], data).unwrap(), true)
    }

    #[test]
    fn uniform_heads_give_one_and_a_half_ln3() {
        let mut g = Graph::new();
        let (f, d, m) = (
            logits(&mut g, &[[0.0; 3]]),
            logits(&mut g, &[[0.0; 3]]),
            logits(&mut g, &[[0.0; 3]]),
        );
        let l = gender_loss(&mut g, f, d, m, &[2], 0.25).unwrap();
        assert!((g.scalar(l) - 1.5 * 3f64.ln()).abs() < 1e-12);
        assert!((g.scalar(l) - 1.6479).abs() < 1e-4);
    }

    #[test]
    fn zero_alpha_reduces_to_fused_term_and_cuts_aux_gradients() {
        let mut g = Graph::new();
        let f = logits(&mut g, &[[1.0, -2.0, 0.5]]);
        let d = logits(&mut g, &[[0.3, 0.2, 0.1]]);
        let m = logits(&mut g, &[[3.0, 0.0, 0.0]]);
        let l = gender_loss(&mut g, f, d, m, &[1], 0.0).unwrap();
        let ce = g.cross_entropy(f, &[1]).unwrap();
        assert_eq!(g.scalar(l), g.scalar(ce));
        g.backward(l).unwrap();
        assert!(g.grad(f).unwrap().iter().any(|&v| v != 0.0));
        assert!(g.grad(d).is_none() && g.grad(m).is_none());
    }

    #[test]
    fn gender_labels_reject_ignore_index() {
        let mut g = Graph::new();
        let f = logits(&mut g, &[[0.0; 3]]);
        assert!(matches!(
            gender_loss(&mut g, f, f, f, &[IGNORE_INDEX], 0.25),
            Err(Error::Label { .. })
        ));
    }

    #[test]
    fn attribute_loss_averages_attributes() {
        let mut g = Graph::new();
        let a = logits(&mut g, &[[0.0; 3]]);
        let b = logits(&mut g, &[[5.0, 0.0, 0.0]]);
        let l = attribute_loss(&mut g, &[a, b], &[vec![0], vec![1]]).unwrap();
        let expected = (3f64.ln() + (5.0 + (1.0 + 2.0 * (-5f64).exp()).ln())) / 2.0;
        assert!((g.scalar(l) - expected).abs() < 1e-12);

        let l = attribute_loss(&mut g, &[a, b], &[vec![IGNORE_INDEX], vec![IGNORE_INDEX]]).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let single = attribute_loss(&mut g, &[a], &[vec![2]]).unwrap();
        assert!((g.scalar(single) - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn total_loss_example() {
        let mut g = Graph::new();
        let lg = g.constant(&DenseTensor::scalar(2.0));
        let la = g.constant(&DenseTensor::scalar(0.6));
        let t = total_loss(&mut g, lg, la, &LossWeights::default()).unwrap();
        assert!((g.scalar(t) - 1.3).abs() < 1e-15);
        let zero = LossWeights {
            lambda_gender: 0.0,
            lambda_attribute: 0.0,
            ..LossWeights::default()
        };
        let t = total_loss(&mut g, lg, la, &zero).unwrap();
        assert_eq!(g.scalar(t), 0.0);
    }
}
