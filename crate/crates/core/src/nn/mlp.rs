use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Linear,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Linear => v,
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Linear => 1.0,
        }
    }
}

/// One affine layer `y = act(x·W + b)` with `W` stored as `in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn input_width(&self) -> usize {
        self.weights.rows()
    }

    pub fn output_width(&self) -> usize {
        self.weights.cols()
    }
}

/// Feed-forward network: tanh hidden layers, linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

/// Activations recorded by [`MlpParams::forward`]; enough for an exact backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// `activations[0]` is the input, `activations[l + 1]` the output of layer `l`.
    activations: Vec<Matrix>,
}

impl Tape {
    pub fn output(&self) -> &Matrix {
        self.activations
            .last()
            .expect("tape holds at least the input")
    }

    pub fn input(&self) -> &Matrix {
        &self.activations[0]
    }
}

/// Gradients shaped like [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl GradientSet {
    pub fn zeros_like(p: &MlpParams) -> Self {
        Self {
            weights: p
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.weights.rows(), l.weights.cols()))
                .collect(),
            biases: p.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn accumulate(&mut self, other: &GradientSet) -> Result<()> {
        if self.weights.len() != other.weights.len() {
            return Err(Error::invalid("gradient sets differ in depth"));
        }
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.add_assign(b)?;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            if a.len() != b.len() {
                return Err(Error::invalid("bias gradient length mismatch"));
            }
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.weights {
            w.data_mut().iter_mut().for_each(|v| *v *= s);
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
            && self.biases.iter().flatten().all(|v| v.is_finite())
    }

    /// All entries flattened in parameter order (weights then bias, per layer).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        out
    }
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Backward {
    pub grads: GradientSet,
    /// Gradient of the loss with respect to the network input.
    pub input_grad: Matrix,
}

impl MlpParams {
    /// Glorot-style normal initialisation, `N(0, 1/fan_in)`, biases zero.
    pub fn init(widths: &[usize], seed: u64, stream_id: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid(format!("bad layer widths {widths:?}")));
        }
        let mut r = rng::stream(seed, &[tag::INIT, stream_id]);
        let depth = widths.len() - 1;
        let layers = (0..depth)
            .map(|l| {
                let (fan_in, fan_out) = (widths[l], widths[l + 1]);
                let std = (1.0 / fan_in as f64).sqrt();
                let w = rng::normals(&mut r, fan_in * fan_out)
                    .into_iter()
                    .map(|v| v * std)
                    .collect();
                Layer {
                    weights: Matrix::from_vec(fan_in, fan_out, w).expect("sized above"),
                    bias: vec![0.0; fan_out],
                    activation: if l + 1 == depth {
                        Activation::Linear
                    } else {
                        Activation::Tanh
                    },
                }
            })
            .collect();
        Ok(Self { layers })
    }

    /// Same architecture with every weight and bias set to zero.
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        let mut p = Self::init(widths, 0, 0)?;
        for l in &mut p.layers {
            l.weights.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(p)
    }

    /// A single linear layer with the given weights and bias.
    pub fn linear(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weights.cols() {
            return Err(Error::invalid("bias length must equal output width"));
        }
        Ok(Self {
            layers: vec![Layer {
                weights,
                bias,
                activation: Activation::Linear,
            }],
        })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, Layer::output_width)
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend(self.layers.iter().map(Layer::output_width));
        w
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.data().len() + l.bias.len())
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("network has no layers"));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].output_width() != pair[1].input_width() {
                return Err(Error::invalid(format!(
                    "layer {i} outputs {} but layer {} takes {}",
                    pair[0].output_width(),
                    i + 1,
                    pair[1].input_width()
                )));
            }
        }
        for l in &self.layers {
            if l.bias.len() != l.output_width() {
                return Err(Error::invalid("bias length must equal output width"));
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Tape)> {
        if x.cols() != self.input_width() {
            return Err(Error::invalid(format!(
                "input has {} columns, network expects {}",
                x.cols(),
                self.input_width()
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.clone());
        for layer in &self.layers {
            let mut y = activations.last().unwrap().matmul(&layer.weights)?;
            for r in 0..y.rows() {
                for (v, b) in y.row_mut(r).iter_mut().zip(&layer.bias) {
                    *v = layer.activation.apply(*v + b);
                }
            }
            activations.push(y);
        }
        let out = activations.last().unwrap().clone();
        Ok((out, Tape { activations }))
    }

    /// Forward pass without keeping a tape.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        self.forward(x).map(|(y, _)| y)
    }

    pub fn backward(&self, tape: &Tape, upstream: &Matrix) -> Result<Backward> {
        if tape.activations.len() != self.layers.len() + 1 {
            return Err(Error::invalid("tape does not match network depth"));
        }
        if upstream.shape() != tape.output().shape() {
            return Err(Error::invalid(format!(
                "upstream gradient {:?} does not match output {:?}",
                upstream.shape(),
                tape.output().shape()
            )));
        }
        let mut grads = GradientSet::zeros_like(self);
        let mut delta = upstream.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let out = &tape.activations[l + 1];
            // through the activation
            for (d, &o) in delta.data_mut().iter_mut().zip(out.data()) {
                *d *= layer.activation.derivative_from_output(o);
            }
            let input = &tape.activations[l];
            grads.weights[l] = input.t_matmul(&delta)?;
            let bias_grad = &mut grads.biases[l];
            for r in 0..delta.rows() {
                for (g, d) in bias_grad.iter_mut().zip(delta.row(r)) {
                    *g += d;
                }
            }
            delta = delta.matmul_t(&layer.weights)?;
        }
        Ok(Backward {
            grads,
            input_grad: delta,
        })
    }

    /// `p' = p − lr·g`.
    pub fn sgd_step(&self, g: &GradientSet, lr: f64) -> Result<Self> {
        self.sgd_step_with_decay(g, lr, 0.0)
    }

    /// `p' = p − lr·(g + weight_decay·p)`; decay applies to weights only.
    pub fn sgd_step_with_decay(&self, g: &GradientSet, lr: f64, weight_decay: f64) -> Result<Self> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::invalid(format!(
                "learning rate {lr} must be finite and ≥ 0"
            )));
        }
        if g.weights.len() != self.layers.len() {
            return Err(Error::invalid("gradient depth does not match network"));
        }
        if !g.is_finite() {
            return Err(Error::numeric("non-finite gradient in SGD step"));
        }
        let mut next = self.clone();
        for ((layer, gw), gb) in next.layers.iter_mut().zip(&g.weights).zip(&g.biases) {
            if layer.weights.shape() != gw.shape() || layer.bias.len() != gb.len() {
                return Err(Error::invalid("gradient shape does not match parameters"));
            }
            for (w, d) in layer.weights.data_mut().iter_mut().zip(gw.data()) {
                *w -= lr * (d + weight_decay * *w);
            }
            for (b, d) in layer.bias.iter_mut().zip(gb) {
                *b -= lr * d;
            }
        }
        Ok(next)
    }

    /// Flattened parameters in the same order as [`GradientSet::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Mutable access to the `i`-th flattened parameter.
    pub fn param_mut(&mut self, mut i: usize) -> &mut f64 {
        for l in &mut self.layers {
            let nw = l.weights.data().len();
            if i < nw {
                return &mut l.weights.data_mut()[i];
            }
            i -= nw;
            if i < l.bias.len() {
                return &mut l.bias[i];
            }
            i -= l.bias.len();
        }
        panic!("parameter index out of range")
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_input(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut r = rng::stream(seed, &[99]);
        Matrix::from_vec(rows, cols, rng::normals(&mut r, rows * cols)).unwrap()
    }

    #[test]
    fn zero_params_give_zero_output() {
        let p = MlpParams::zeros(&[3, 4, 2]).unwrap();
        let y = p.predict(&random_input(5, 3, 1)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_linear_layer_passes_input() {
        let p = MlpParams::linear(Matrix::identity(3), vec![0.0; 3]).unwrap();
        let x = random_input(4, 3, 2);
        assert_eq!(p.predict(&x).unwrap(), x);
    }

    #[test]
    fn forward_is_deterministic() {
        let p = MlpParams::init(&[3, 4, 2], 11, 0).unwrap();
        let x = random_input(6, 3, 3);
        assert_eq!(p.predict(&x).unwrap(), p.predict(&x).unwrap());
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = MlpParams::init(&[3, 4, 2], 11, 0).unwrap();
        assert!(matches!(
            p.forward(&Matrix::zeros(2, 4)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = MlpParams::init(&[3, 4, 2], 5, 0).unwrap();
        let (_, tape) = p.forward(&random_input(4, 3, 4)).unwrap();
        let b = p.backward(&tape, &Matrix::zeros(4, 2)).unwrap();
        assert!(b.grads.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_central_differences() {
        // loss = Σ upstream ⊙ output, so dL/dθ is exactly what backward returns
        let p = MlpParams::init(&[3, 4, 2], 21, 0).unwrap();
        let x = random_input(5, 3, 6);
        let up = random_input(5, 2, 7);
        let loss = |q: &MlpParams| -> f64 {
            let y = q.predict(&x).unwrap();
            y.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        };
        let (_, tape) = p.forward(&x).unwrap();
        let analytic = p.backward(&tape, &up).unwrap().grads.flatten();
        let h = 1e-4;
        for i in 0..p.num_params() {
            let mut plus = p.clone();
            *plus.param_mut(i) += h;
            let mut minus = p.clone();
            *minus.param_mut(i) -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-8);
            assert!(rel < 1e-4, "param {i}: fd={fd} analytic={}", analytic[i]);
        }
    }

    #[test]
    fn input_gradient_matches_central_differences() {
        let p = MlpParams::init(&[3, 4, 2], 22, 0).unwrap();
        let x = random_input(2, 3, 8);
        let up = random_input(2, 2, 9);
        let (_, tape) = p.forward(&x).unwrap();
        let g = p.backward(&tape, &up).unwrap().input_grad;
        let h = 1e-5;
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let f = |m: &Matrix| -> f64 {
                p.predict(m)
                    .unwrap()
                    .data()
                    .iter()
                    .zip(up.data())
                    .map(|(a, b)| a * b)
                    .sum()
            };
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let p = MlpParams::init(&[3, 4, 2], 23, 0).unwrap();
        let (_, tape) = p.forward(&random_input(3, 3, 10)).unwrap();
        let up = random_input(3, 2, 11);
        let g1 = p.backward(&tape, &up).unwrap().grads.flatten();
        let g3 = p.backward(&tape, &up.scale(3.0)).unwrap().grads.flatten();
        for (a, b) in g1.iter().zip(&g3) {
            assert!((3.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn sgd_step_rules() {
        let p = MlpParams::init(&[2, 3, 1], 1, 0).unwrap();
        let zero = GradientSet::zeros_like(&p);
        assert_eq!(p.sgd_step(&zero, 0.5).unwrap(), p);

        let z = MlpParams::zeros(&[2, 3, 1]).unwrap();
        let mut g = GradientSet::zeros_like(&z);
        g.weights[0][(1, 2)] = 0.7;
        g.biases[1][0] = -0.25;
        let stepped = z.sgd_step(&g, 1.0).unwrap();
        let flat = stepped.flatten();
        let gf = g.flatten();
        assert!(flat.iter().zip(&gf).all(|(a, b)| *a == -b));

        // two steps with the same gradient == one step with the doubled gradient
        let mut g2 = g.clone();
        g2.scale(2.0);
        let twice = p.sgd_step(&g, 0.1).unwrap().sgd_step(&g, 0.1).unwrap();
        let once = p.sgd_step(&g2, 0.1).unwrap();
        for (a, b) in twice.flatten().iter().zip(once.flatten()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_rejects_non_finite_gradients() {
        let p = MlpParams::init(&[2, 1], 1, 0).unwrap();
        let mut g = GradientSet::zeros_like(&p);
        g.biases[0][0] = f64::NAN;
        assert!(matches!(p.sgd_step(&g, 0.1), Err(Error::Numeric(_))));
    }
}
