use rand::Rng;
use serde::{Deserialize, Serialize};

use super::features::{SegFeatures, SEG_FEATURES};
use super::losses::{sigmoid, softmax};
use crate::data::{Image, Raster, SoftMaskSet, NUM_GRADES, NUM_LESIONS};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Output head of an [`Mlp`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Class probabilities via softmax.
    Softmax,
    /// A single real output.
    Scalar,
    /// Independent sigmoid per lesion channel, applied pixel by pixel.
    PixelSigmoid,
}

impl Head {
    pub(crate) fn code(self) -> u8 {
        match self {
            Head::Softmax => 0,
            Head::Scalar => 1,
            Head::PixelSigmoid => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Head::Softmax),
            1 => Some(Head::Scalar),
            2 => Some(Head::PixelSigmoid),
            _ => None,
        }
    }
}

/// Fully connected layer, weights stored row-major as `outputs × inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs).map(|o| self.output(o, x)).collect()
    }

    /// Pre-activation of output unit `o`.
    #[inline]
    pub(crate) fn output(&self, o: usize, x: &[f64]) -> f64 {
        let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
        row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.biases[o]
    }

    /// Add `d * x` to row `o` and `d` to bias `o`.
    #[inline]
    fn accumulate(&mut self, o: usize, d: f64, x: &[f64]) {
        self.biases[o] += d;
        let row = &mut self.weights[o * self.inputs..(o + 1) * self.inputs];
        for (gw, &v) in row.iter_mut().zip(x) {
            *gw += d * v;
        }
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(&self.biases)
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.biases.iter_mut())
    }
}

/// Architecture description used to initialise an [`Mlp`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub head: Head,
    pub dropout: f64,
}

impl ModelSpec {
    /// One hidden layer of 32 ReLU units, dropout 0.2.
    pub fn classifier() -> Self {
        Self { hidden: vec![32], head: Head::Softmax, dropout: 0.2 }
    }

    pub fn regressor() -> Self {
        Self { hidden: vec![32], head: Head::Scalar, dropout: 0.2 }
    }

    /// Per-pixel linear model over [`SegFeatures`].
    pub fn segmenter() -> Self {
        Self { hidden: vec![], head: Head::PixelSigmoid, dropout: 0.0 }
    }

    fn output_dim(&self) -> usize {
        match self.head {
            Head::Softmax => NUM_GRADES,
            Head::Scalar => 1,
            Head::PixelSigmoid => NUM_LESIONS,
        }
    }
}

/// Multilayer perceptron with ReLU hidden layers and inverted dropout.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    head: Head,
    dropout: f64,
}

/// Intermediate values kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    inputs: Vec<Vec<f64>>,
    // d activation / d pre-activation, including the dropout scale
    gates: Vec<Vec<f64>>,
}

/// Parameter-shaped gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    layers: Vec<Dense>,
}

impl Gradients {
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(Dense::params)
    }

    /// Backward step of a single-layer model: `dlogits` for input `x`.
    pub(crate) fn accumulate_linear(&mut self, dlogits: &[f64], x: &[f64]) {
        let g = &mut self.layers[0];
        for (o, &d) in dlogits.iter().enumerate() {
            if d != 0.0 {
                g.accumulate(o, d, x);
            }
        }
    }
}

impl Mlp {
    /// He-uniform hidden layers, Glorot-uniform output layer, zero biases.
    pub fn init(spec: &ModelSpec, input_dim: usize, rng: &mut SeededRng) -> Result<Self> {
        let mut m = Self::zeros(spec, input_dim)?;
        let last = m.layers.len() - 1;
        for (i, layer) in m.layers.iter_mut().enumerate() {
            let limit = if i == last {
                (6.0 / (layer.inputs + layer.outputs) as f64).sqrt()
            } else {
                (6.0 / layer.inputs as f64).sqrt()
            };
            for w in &mut layer.weights {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(m)
    }

    /// All parameters zero.
    pub fn zeros(spec: &ModelSpec, input_dim: usize) -> Result<Self> {
        if input_dim == 0 || spec.hidden.contains(&0) {
            return Err(Error::InputDomain("layer widths must be positive".into()));
        }
        if spec.head == Head::PixelSigmoid && input_dim != SEG_FEATURES {
            return Err(Error::DimensionMismatch { expected: SEG_FEATURES, got: input_dim });
        }
        let mut dims = vec![input_dim];
        dims.extend(&spec.hidden);
        dims.push(spec.output_dim());
        let layers = dims.windows(2).map(|d| Dense::zeros(d[0], d[1])).collect();
        Self::from_layers(layers, spec.head, spec.dropout)
    }

    pub fn from_layers(layers: Vec<Dense>, head: Head, dropout: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::InputDomain(format!("dropout {dropout} outside [0,1)")));
        }
        let Some(last) = layers.last() else {
            return Err(Error::Empty("layers"));
        };
        let want = ModelSpec { hidden: vec![], head, dropout }.output_dim();
        if last.outputs != want {
            return Err(Error::DimensionMismatch { expected: want, got: last.outputs });
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::DimensionMismatch { expected: pair[0].outputs, got: pair[1].inputs });
            }
        }
        for l in &layers {
            if l.weights.len() != l.inputs * l.outputs || l.biases.len() != l.outputs {
                return Err(Error::DimensionMismatch { expected: l.inputs * l.outputs, got: l.weights.len() });
            }
            if l.params().any(|v| !v.is_finite()) {
                return Err(Error::InputDomain("non-finite parameter".into()));
            }
        }
        Ok(Self { layers, head, dropout })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(Dense::params)
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(Dense::params_mut)
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            layers: self.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect(),
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), got: x.len() });
        }
        Ok(())
    }

    fn expect_head(&self, head: Head) -> Result<()> {
        if self.head != head {
            return Err(Error::InputDomain(format!("model head is {:?}, expected {:?}", self.head, head)));
        }
        Ok(())
    }

    /// Pre-activation outputs with dropout disabled.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut a = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            a = layer.forward(&a);
            if i != last {
                a.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        Ok(a)
    }

    pub fn forward_classifier(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.expect_head(Head::Softmax)?;
        Ok(softmax(&self.logits(x)?))
    }

    pub fn forward_regressor(&self, x: &[f64]) -> Result<f64> {
        self.expect_head(Head::Scalar)?;
        Ok(self.logits(x)?[0])
    }

    /// Soft lesion masks for a whole image.
    pub fn predict_mask(&self, image: &Image) -> Result<SoftMaskSet> {
        self.predict_mask_features(&SegFeatures::compute(image))
    }

    pub fn predict_mask_features(&self, feats: &SegFeatures) -> Result<SoftMaskSet> {
        self.expect_head(Head::PixelSigmoid)?;
        let (w, h) = (feats.width(), feats.height());
        let mut channels: [Vec<f64>; NUM_LESIONS] = std::array::from_fn(|_| Vec::with_capacity(w * h));
        if feats.pixels().len() > 0 {
            self.check_input(feats.pixels().next().expect("non-empty"))?;
        }
        for f in feats.pixels() {
            match self.linear() {
                Some(layer) => {
                    for (c, ch) in channels.iter_mut().enumerate() {
                        ch.push(sigmoid(layer.output(c, f)));
                    }
                }
                None => {
                    let z = self.logits(f)?;
                    for (c, ch) in channels.iter_mut().enumerate() {
                        ch.push(sigmoid(z[c]));
                    }
                }
            }
        }
        let [a, b, c] = channels;
        SoftMaskSet::new([Raster::new(w, h, a)?, Raster::new(w, h, b)?, Raster::new(w, h, c)?])
    }

    /// The only layer of a model without hidden layers.
    pub(crate) fn linear(&self) -> Option<&Dense> {
        match self.layers.as_slice() {
            [layer] => Some(layer),
            _ => None,
        }
    }

    /// Training-mode forward pass. Dropout is applied to hidden activations
    /// when an RNG is supplied.
    pub(crate) fn forward_trace(&self, x: &[f64], mut rng: Option<&mut SeededRng>) -> Result<(Vec<f64>, Trace)> {
        self.check_input(x)?;
        let keep = 1.0 - self.dropout;
        let mut trace = Trace { inputs: Vec::with_capacity(self.layers.len()), gates: Vec::new() };
        let mut a = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&a);
            trace.inputs.push(a);
            if i == last {
                return Ok((z, trace));
            }
            let gate: Vec<f64> = z
                .iter()
                .map(|&v| {
                    let alive = match rng.as_deref_mut() {
                        Some(r) if self.dropout > 0.0 => r.random::<f64>() < keep,
                        _ => true,
                    };
                    if v > 0.0 && alive {
                        if rng.is_some() { 1.0 / keep } else { 1.0 }
                    } else {
                        0.0
                    }
                })
                .collect();
            a = z.iter().zip(&gate).map(|(v, g)| v * g).collect();
            trace.gates.push(gate);
        }
        unreachable!("model has at least one layer")
    }

    /// Accumulate parameter gradients given `d loss / d logits`.
    pub(crate) fn backward(&self, trace: &Trace, dlogits: &[f64], grads: &mut Gradients) {
        let mut delta = dlogits.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let g = &mut grads.layers[i];
            let input = &trace.inputs[i];
            for (o, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    g.accumulate(o, d, input);
                }
            }
            if i == 0 {
                break;
            }
            let gate = &trace.gates[i - 1];
            let mut prev = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (p, &w) in prev.iter_mut().zip(&layer.weights[o * layer.inputs..(o + 1) * layer.inputs]) {
                    *p += d * w;
                }
            }
            delta = prev.iter().zip(gate).map(|(p, g)| p * g).collect();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let m = Mlp::zeros(&ModelSpec::classifier(), 8).unwrap();
        let p = m.forward_classifier(&[0.3; 8]).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn random_weights_give_a_distribution() {
        let m = Mlp::init(&ModelSpec::classifier(), 5, &mut seeded(3)).unwrap();
        let p = m.forward_classifier(&[1.0, -2.0, 0.5, 3.0, 0.0]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn dimension_and_head_checks() {
        let m = Mlp::zeros(&ModelSpec::regressor(), 4).unwrap();
        assert!(matches!(m.forward_regressor(&[0.0; 3]), Err(Error::DimensionMismatch { expected: 4, got: 3 })));
        assert!(m.forward_classifier(&[0.0; 4]).is_err());
        assert!(Mlp::zeros(&ModelSpec { dropout: 1.0, ..ModelSpec::regressor() }, 4).is_err());
        assert!(Mlp::zeros(&ModelSpec::segmenter(), 3).is_err());
    }

    #[test]
    fn inference_ignores_dropout() {
        let spec = ModelSpec { dropout: 0.5, ..ModelSpec::regressor() };
        let m = Mlp::init(&spec, 6, &mut seeded(1)).unwrap();
        let x = [0.1, 0.2, -0.3, 0.4, 0.5, -0.6];
        assert_eq!(m.forward_regressor(&x).unwrap(), m.forward_regressor(&x).unwrap());
        let (z, _) = m.forward_trace(&x, None).unwrap();
        assert_eq!(z[0], m.forward_regressor(&x).unwrap());
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let spec = ModelSpec { hidden: vec![7, 5], head: Head::Softmax, dropout: 0.0 };
        let m = Mlp::init(&spec, 4, &mut seeded(11)).unwrap();
        let x = [0.3, -1.2, 0.8, 0.05];
        // loss = Σ_k c_k z_k, so d loss / d z = c
        let c = [0.7, -1.1, 0.4];
        let loss = |m: &Mlp| m.logits(&x).unwrap().iter().zip(&c).map(|(z, c)| z * c).sum::<f64>();
        let (_, trace) = m.forward_trace(&x, None).unwrap();
        let mut g = m.zero_gradients();
        m.backward(&trace, &c, &mut g);
        let analytic: Vec<f64> = g.iter().copied().collect();
        let h = 1e-5;
        for (i, &a) in analytic.iter().enumerate() {
            let mut plus = m.clone();
            *plus.params_mut().nth(i).unwrap() += h;
            let mut minus = m.clone();
            *minus.params_mut().nth(i).unwrap() -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            assert!((fd - a).abs() < 1e-6 * (1.0 + a.abs()), "param {i}: {fd} vs {a}");
        }
    }

    #[test]
    fn dropout_trace_scales_survivors() {
        let spec = ModelSpec { hidden: vec![64], head: Head::Scalar, dropout: 0.5 };
        let m = Mlp::init(&spec, 3, &mut seeded(2)).unwrap();
        let (_, trace) = m.forward_trace(&[1.0, 1.0, 1.0], Some(&mut seeded(5))).unwrap();
        assert!(trace.gates[0].iter().all(|&g| g == 0.0 || g == 2.0));
        assert!(trace.gates[0].contains(&2.0));
    }
}
