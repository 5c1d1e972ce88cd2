use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{DeformError, DeformOutput, OUTPUT_WIDTH};

/// Two ReLU hidden layers followed by the five linear output heads, stored as
/// one `14 x hidden` matrix (center 3, rotation 4, log_scale 3, opacity 1, sh0 3).
#[derive(Clone, Debug, PartialEq)]
pub struct DeformDecoder {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub w_out: DMatrix<f64>,
    pub b_out: DVector<f64>,
}

/// Gradients with the same layout as [`DeformDecoder`].
pub type DecoderGrad = DeformDecoder;

/// Activations kept from a batched forward pass.
#[derive(Clone, Debug)]
pub struct DecoderCache {
    pub input: DMatrix<f64>,
    pub h1: DMatrix<f64>,
    pub h2: DMatrix<f64>,
    pub output: DMatrix<f64>,
}

impl DeformDecoder {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w1: DMatrix::zeros(hidden, input),
            b1: DVector::zeros(hidden),
            w2: DMatrix::zeros(hidden, hidden),
            b2: DVector::zeros(hidden),
            w_out: DMatrix::zeros(OUTPUT_WIDTH, hidden),
            b_out: DVector::zeros(OUTPUT_WIDTH),
        }
    }

    /// He-uniform hidden layers, zero biases, zero output heads.
    pub fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut d = Self::zeros(input, hidden);
        let b1 = (6.0 / input.max(1) as f64).sqrt();
        d.w1.iter_mut().for_each(|w| *w = rng.random_range(-b1..=b1));
        let b2 = (6.0 / hidden as f64).sqrt();
        d.w2.iter_mut().for_each(|w| *w = rng.random_range(-b2..=b2));
        d
    }

    pub fn input_width(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_width(&self) -> usize {
        self.w1.nrows()
    }

    pub fn parameter_count(&self) -> usize {
        let (h, i) = (self.hidden_width(), self.input_width());
        h * i + h + h * h + h + OUTPUT_WIDTH * h + OUTPUT_WIDTH
    }

    /// Parameters in serialization order: each matrix row-major, then its bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.parameter_count());
        for (w, b) in self.layers() {
            for r in 0..w.nrows() {
                v.extend(w.row(r).iter());
            }
            v.extend(b.iter());
        }
        v
    }

    pub fn unflatten_into(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.parameter_count());
        let mut it = flat.iter().copied();
        for (w, b) in self.layers_mut() {
            for r in 0..w.nrows() {
                for c in 0..w.ncols() {
                    w[(r, c)] = it.next().unwrap();
                }
            }
            b.iter_mut().for_each(|x| *x = it.next().unwrap());
        }
    }

    fn layers(&self) -> [(&DMatrix<f64>, &DVector<f64>); 3] {
        [(&self.w1, &self.b1), (&self.w2, &self.b2), (&self.w_out, &self.b_out)]
    }

    fn layers_mut(&mut self) -> [(&mut DMatrix<f64>, &mut DVector<f64>); 3] {
        [
            (&mut self.w1, &mut self.b1),
            (&mut self.w2, &mut self.b2),
            (&mut self.w_out, &mut self.b_out),
        ]
    }

    /// Single-input forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<DeformOutput, DeformError> {
        if input.len() != self.input_width() {
            return Err(DeformError::Shape(format!(
                "decoder expects {} inputs, got {}",
                self.input_width(),
                input.len()
            )));
        }
        let x = DMatrix::from_column_slice(input.len(), 1, input);
        let cache = self.forward_batch(x)?;
        Ok(DeformOutput::from_slice(cache.output.column(0).as_slice()))
    }

    /// Batched forward pass over the columns of `input` (`input_width x N`).
    pub fn forward_batch(&self, input: DMatrix<f64>) -> Result<DecoderCache, DeformError> {
        if input.nrows() != self.input_width() {
            return Err(DeformError::Shape(format!(
                "decoder expects {} input rows, got {}",
                self.input_width(),
                input.nrows()
            )));
        }
        let mut h1 = &self.w1 * &input;
        add_bias_relu(&mut h1, &self.b1);
        let mut h2 = &self.w2 * &h1;
        add_bias_relu(&mut h2, &self.b2);
        let mut output = &self.w_out * &h2;
        for mut col in output.column_iter_mut() {
            col += &self.b_out;
        }
        Ok(DecoderCache { input, h1, h2, output })
    }

    /// Reverse pass: returns parameter gradients and `dL/dinput`.
    pub fn backward_batch(&self, cache: &DecoderCache, d_out: &DMatrix<f64>) -> (DecoderGrad, DMatrix<f64>) {
        let mut g = DecoderGrad::zeros(self.input_width(), self.hidden_width());
        g.w_out = d_out * cache.h2.transpose();
        g.b_out = row_sums(d_out);
        let mut dh2 = self.w_out.transpose() * d_out;
        relu_mask(&mut dh2, &cache.h2);
        g.w2 = &dh2 * cache.h1.transpose();
        g.b2 = row_sums(&dh2);
        let mut dh1 = self.w2.transpose() * &dh2;
        relu_mask(&mut dh1, &cache.h1);
        g.w1 = &dh1 * cache.input.transpose();
        g.b1 = row_sums(&dh1);
        let dx = self.w1.transpose() * &dh1;
        (g, dx)
    }
}

fn add_bias_relu(m: &mut DMatrix<f64>, b: &DVector<f64>) {
    for mut col in m.column_iter_mut() {
        for (v, bi) in col.iter_mut().zip(b.iter()) {
            *v = (*v + bi).max(0.0);
        }
    }
}

fn relu_mask(g: &mut DMatrix<f64>, act: &DMatrix<f64>) {
    for (gv, a) in g.iter_mut().zip(act.iter()) {
        if *a <= 0.0 {
            *gv = 0.0;
        }
    }
}

fn row_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.nrows(), |r, _| m.row(r).sum())
}
