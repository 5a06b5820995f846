use super::mlp::{Head, Mlp};
use super::{classifier_decision, regressor_decision};
use crate::data::{OrdinalLabel, NUM_GRADES};
use crate::error::{Error, Result};
use crate::metrics::regressor_class_scores;

/// Raw output of an ordinal model for one sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Probs(Vec<f64>),
    Scalar(f64),
}

impl Prediction {
    /// Argmax for probabilities, clamped rounding for scalars.
    pub fn decision(&self) -> OrdinalLabel {
        match self {
            Prediction::Probs(p) => classifier_decision(p),
            Prediction::Scalar(v) => regressor_decision(*v),
        }
    }

    /// Per-class scores for ranking metrics such as AUC.
    pub fn class_scores(&self) -> Vec<f64> {
        match self {
            Prediction::Probs(p) => p.clone(),
            Prediction::Scalar(v) => regressor_class_scores(*v, NUM_GRADES),
        }
    }

    /// Element-wise mean; all inputs must be of the same kind and length.
    pub fn mean(preds: &[Prediction]) -> Result<Prediction> {
        let first = preds.first().ok_or(Error::Empty("no predictions to average"))?;
        let n = preds.len() as f64;
        match first {
            Prediction::Scalar(_) => {
                let vals = preds
                    .iter()
                    .map(|p| match p {
                        Prediction::Scalar(v) => Ok(*v),
                        Prediction::Probs(_) => Err(Error::InputDomain("mixed prediction kinds".into())),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Prediction::Scalar(pairwise(&vals) / n))
            }
            Prediction::Probs(p0) => {
                let mut cols = vec![Vec::with_capacity(preds.len()); p0.len()];
                for p in preds {
                    match p {
                        Prediction::Probs(p) if p.len() == p0.len() => {
                            for (c, v) in cols.iter_mut().zip(p) {
                                c.push(*v);
                            }
                        }
                        Prediction::Probs(p) => return Err(Error::DimensionMismatch { expected: p0.len(), got: p.len() }),
                        Prediction::Scalar(_) => return Err(Error::InputDomain("mixed prediction kinds".into())),
                    }
                }
                Ok(Prediction::Probs(cols.iter().map(|c| pairwise(c) / n).collect()))
            }
        }
    }
}

/// Pairwise summation in slice order.
fn pairwise(v: &[f64]) -> f64 {
    match v {
        [] => 0.0,
        [x] => *x,
        _ => {
            let (l, r) = v.split_at(v.len() / 2);
            pairwise(l) + pairwise(r)
        }
    }
}

/// Anything that maps a feature vector to an ordinal prediction.
pub trait Predictor: Sync {
    fn predict(&self, x: &[f64]) -> Result<Prediction>;
    fn head(&self) -> Head;
    fn input_dim(&self) -> usize;
}

impl Predictor for Mlp {
    fn predict(&self, x: &[f64]) -> Result<Prediction> {
        match Mlp::head(self) {
            Head::Softmax => self.forward_classifier(x).map(Prediction::Probs),
            Head::Scalar => self.forward_regressor(x).map(Prediction::Scalar),
            Head::PixelSigmoid => Err(Error::InputDomain("segmenter cannot score feature vectors".into())),
        }
    }

    fn head(&self) -> Head {
        Mlp::head(self)
    }

    fn input_dim(&self) -> usize {
        Mlp::input_dim(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn means() {
        let m = Prediction::mean(&[Prediction::Scalar(1.0), Prediction::Scalar(2.0)]).unwrap();
        assert_eq!(m, Prediction::Scalar(1.5));
        let p = Prediction::mean(&[Prediction::Probs(vec![0.2, 0.3, 0.5]), Prediction::Probs(vec![0.6, 0.1, 0.3])]).unwrap();
        match p {
            Prediction::Probs(v) => assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
        assert!(Prediction::mean(&[Prediction::Scalar(1.0), Prediction::Probs(vec![1.0])]).is_err());
        assert!(Prediction::mean(&[]).is_err());
    }

    #[test]
    fn identical_members_average_to_themselves() {
        let p = Prediction::Probs(vec![0.1, 0.7, 0.2]);
        assert_eq!(Prediction::mean(&vec![p.clone(); 4]).unwrap(), p);
    }
}
