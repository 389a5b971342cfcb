//! MLP feature extractor placed in front of the kernel for deep-kernel models.
//!
//! Hidden layers use ReLU; the last layer is affine and its outputs pass
//! through a min-max latent scaler that is refit from training data and held
//! constant in between refits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::scaler::{AffineScaler, ScalerKind};

pub const DEFAULT_LAYER_DIMS: [usize; 5] = [14, 100, 50, 5, 2];
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layer_dims: Vec<usize>,
    /// Layer `l` maps `layer_dims[l]` inputs to `layer_dims[l + 1]` outputs; shape out×in.
    #[serde(with = "crate::serde_matrix::list")]
    pub weights: Vec<Matrix>,
    #[serde(with = "crate::serde_matrix::vector_list")]
    pub biases: Vec<Vector>,
    pub latent_scaler: AffineScaler,
}

/// Gradients with the same layout as [`MlpParams`], plus the input gradient.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vector>,
    pub input: Matrix,
}

impl MlpGrads {
    /// Flattened in [`MlpParams::to_flat`] order.
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.weights, &self.biases)
    }
}

fn flatten(weights: &[Matrix], biases: &[Vector]) -> Vec<f64> {
    let mut out = Vec::new();
    for (w, b) in weights.iter().zip(biases) {
        for i in 0..w.nrows() {
            out.extend(w.row(i).iter());
        }
        out.extend(b.iter());
    }
    out
}

impl MlpParams {
    /// Glorot-uniform weights, zero biases, identity latent scaler.
    pub fn init<R: Rng + ?Sized>(layer_dims: &[usize], rng: &mut R) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::arg(format!("invalid layer dimensions {layer_dims:?}")));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(Matrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..bound)));
            biases.push(Vector::zeros(fan_out));
        }
        Ok(MlpParams {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            latent_scaler: AffineScaler::identity(*layer_dims.last().expect("len >= 2"), ScalerKind::MinmaxPm1),
        })
    }

    pub fn zeros(layer_dims: &[usize]) -> Self {
        let weights = layer_dims.windows(2).map(|p| Matrix::zeros(p[1], p[0])).collect();
        let biases = layer_dims.windows(2).map(|p| Vector::zeros(p[1])).collect();
        MlpParams {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            latent_scaler: AffineScaler::identity(*layer_dims.last().unwrap_or(&0), ScalerKind::MinmaxPm1),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated")
    }

    pub fn n_params(&self) -> usize {
        self.layer_dims.windows(2).map(|p| p[1] * (p[0] + 1)).sum()
    }

    /// Per layer: weights row-major, then biases.
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.weights, &self.biases)
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::dim(format!(
                "{} values for {} network parameters",
                flat.len(),
                self.n_params()
            )));
        }
        let mut k = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for i in 0..w.nrows() {
                for j in 0..w.ncols() {
                    w[(i, j)] = flat[k];
                    k += 1;
                }
            }
            for v in b.iter_mut() {
                *v = flat[k];
                k += 1;
            }
        }
        Ok(())
    }

    /// True at weight coordinates of the flat layout, false at biases.
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.n_params());
        for p in self.layer_dims.windows(2) {
            out.extend(std::iter::repeat_n(true, p[0] * p[1]));
            out.extend(std::iter::repeat_n(false, p[1]));
        }
        out
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::dim(format!(
                "network expects {} input columns, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Pre-activations of every layer.
    fn pre_activations(&self, x: &Matrix) -> Vec<Matrix> {
        let mut out: Vec<Matrix> = Vec::with_capacity(self.weights.len());
        let n_layers = self.weights.len();
        for l in 0..n_layers {
            let input = if l == 0 { x.clone() } else { relu(&out[l - 1]) };
            let mut z = input * self.weights[l].transpose();
            for mut row in z.row_iter_mut() {
                row += self.biases[l].transpose();
            }
            out.push(z);
        }
        out
    }

    /// Latents before the scaler.
    pub fn forward_raw(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        Ok(self.pre_activations(x).pop().expect("at least one layer"))
    }

    /// Scaled latents.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let raw = self.forward_raw(x)?;
        self.latent_scaler.apply(&raw)
    }

    /// Refits the latent scaler as min-max on the raw latents of `x_train`.
    pub fn refresh_latent_scaler(&mut self, x_train: &Matrix) -> Result<()> {
        let raw = self.forward_raw(x_train)?;
        self.latent_scaler = AffineScaler::fit(&raw, ScalerKind::MinmaxPm1)?;
        Ok(())
    }

    /// Reverse-mode gradients of `sum(upstream ⊙ forward(x))`.
    pub fn backward(&self, x: &Matrix, upstream: &Matrix) -> Result<MlpGrads> {
        self.check_input(x)?;
        if upstream.shape() != (x.nrows(), self.output_dim()) {
            return Err(Error::dim(format!(
                "upstream gradient has shape {:?}, expected ({}, {})",
                upstream.shape(),
                x.nrows(),
                self.output_dim()
            )));
        }
        let zs = self.pre_activations(x);
        let n_layers = self.weights.len();
        let mut delta = Matrix::from_fn(upstream.nrows(), upstream.ncols(), |i, j| {
            upstream[(i, j)] / self.latent_scaler.scale[j]
        });
        let mut gw = vec![Matrix::zeros(0, 0); n_layers];
        let mut gb = vec![Vector::zeros(0); n_layers];
        for l in (0..n_layers).rev() {
            let input = if l == 0 { x.clone() } else { relu(&zs[l - 1]) };
            gw[l] = delta.transpose() * &input;
            gb[l] = Vector::from_fn(delta.ncols(), |j, _| delta.column(j).sum());
            let mut back = &delta * &self.weights[l];
            if l > 0 {
                back.zip_apply(&zs[l - 1], |g, z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            delta = back;
        }
        Ok(MlpGrads {
            weights: gw,
            biases: gb,
            input: delta,
        })
    }

    /// `λ Σ w²` over weights only, with its gradient in flat layout.
    pub fn weight_decay(&self, lambda: f64) -> (f64, Vec<f64>) {
        let value = lambda * self.weights.iter().map(|w| w.norm_squared()).sum::<f64>();
        let mask = self.weight_mask();
        let grad = self
            .to_flat()
            .iter()
            .zip(mask)
            .map(|(v, m)| if m { 2.0 * lambda * v } else { 0.0 })
            .collect();
        (value, grad)
    }
}

fn relu(z: &Matrix) -> Matrix {
    z.map(|v| v.max(0.0))
}

pub fn mlp_forward(params: &MlpParams, x: &Matrix) -> Result<Matrix> {
    params.forward(x)
}

pub fn refresh_latent_scaler(params: &MlpParams, x_train: &Matrix) -> Result<MlpParams> {
    let mut out = params.clone();
    out.refresh_latent_scaler(x_train)?;
    Ok(out)
}

pub fn mlp_backward(params: &MlpParams, x: &Matrix, upstream: &Matrix) -> Result<MlpGrads> {
    params.backward(x, upstream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(seed: u64) -> MlpParams {
        MlpParams::init(&DEFAULT_LAYER_DIMS, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn inputs(n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n, 14, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = MlpParams::zeros(&DEFAULT_LAYER_DIMS);
        let out = p.forward_raw(&inputs(4, 1)).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn output_shape() {
        assert_eq!(net(1).forward(&inputs(7, 2)).unwrap().shape(), (7, 2));
        assert!(net(1).forward(&Matrix::zeros(3, 13)).is_err());
    }

    #[test]
    fn glorot_bounds_and_zero_biases() {
        let p = net(3);
        for (l, w) in p.weights.iter().enumerate() {
            let bound = (6.0 / (p.layer_dims[l] + p.layer_dims[l + 1]) as f64).sqrt();
            assert!(w.iter().all(|v| v.abs() <= bound));
            assert_eq!(w.shape(), (p.layer_dims[l + 1], p.layer_dims[l]));
        }
        assert!(p.biases.iter().all(|b| b.iter().all(|v| *v == 0.0)));
        assert_eq!(p.n_params(), 14 * 100 + 100 + 100 * 50 + 50 + 50 * 5 + 5 + 5 * 2 + 2);
    }

    #[test]
    fn refreshed_training_latents_span_unit_box() {
        let mut p = net(4);
        let x = inputs(40, 5);
        p.refresh_latent_scaler(&x).unwrap();
        let out = p.forward(&x).unwrap();
        for j in 0..2 {
            let col = out.column(j);
            assert!((col.min() + 1.0).abs() < 1e-12);
            assert!((col.max() - 1.0).abs() < 1e-12);
        }
        let again = refresh_latent_scaler(&p, &x).unwrap();
        assert!((again.forward(&x).unwrap() - out).amax() < 1e-12);
    }

    #[test]
    fn latents_spanning_zero_to_ten_map_to_unit_interval() {
        // identity network on 2 inputs
        let mut p = MlpParams::zeros(&[2, 2]);
        p.weights[0] = Matrix::identity(2, 2);
        let x = Matrix::from_row_slice(3, 2, &[0.0, 0.0, 5.0, 2.0, 10.0, 10.0]);
        p.refresh_latent_scaler(&x).unwrap();
        let out = p.forward(&x).unwrap();
        assert_eq!(out.column(0).as_slice(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn extrapolating_point_leaves_unit_box() {
        let mut p = MlpParams::zeros(&[2, 2]);
        p.weights[0] = Matrix::identity(2, 2);
        let x = Matrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 1.0, 2.0, 2.0]);
        p.refresh_latent_scaler(&x).unwrap();
        let far = p.forward(&Matrix::from_row_slice(1, 2, &[50.0, -50.0])).unwrap();
        assert!(far.amax() > 1.0);
    }

    #[test]
    fn degenerate_latent_names_dimension() {
        let mut p = MlpParams::zeros(&[2, 2]);
        p.weights[0][(0, 0)] = 1.0;
        let x = Matrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 1.0, 2.0, 2.0]);
        match p.refresh_latent_scaler(&x) {
            Err(Error::DegenerateColumn { column }) => assert_eq!(column, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = net(6);
        let g = p.backward(&inputs(5, 7), &Matrix::zeros(5, 2)).unwrap();
        assert!(g.to_flat().iter().all(|v| *v == 0.0));
        assert!(g.input.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_layer_gradient_is_upstream_times_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = MlpParams::init(&[4, 3], &mut rng).unwrap();
        let x = Matrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0));
        let up = Matrix::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
        let g = p.backward(&x, &up).unwrap();
        assert!((&g.weights[0] - up.transpose() * &x).amax() < 1e-14);
    }

    #[test]
    fn full_network_gradient_matches_finite_differences() {
        let mut p = net(9);
        let x = inputs(6, 10);
        p.refresh_latent_scaler(&x).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let up = Matrix::from_fn(6, 2, |_, _| rng.random_range(-1.0..1.0));
        let g = p.backward(&x, &up).unwrap().to_flat();
        let flat = p.to_flat();
        let f = |w: &[f64]| {
            let mut q = p.clone();
            q.set_flat(w).unwrap();
            q.forward(&x).unwrap().component_mul(&up).sum()
        };
        let idx: Vec<usize> = (0..100).map(|_| rng.random_range(0..flat.len())).collect();
        let err = finite_diff_check(f, &flat, &g, &idx, 1e-5);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let p = net(12);
        let x = inputs(3, 13);
        let up = Matrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64 - 1.5);
        let g = p.backward(&x, &up).unwrap().input;
        let flat: Vec<f64> = x.as_slice().to_vec();
        let f = |v: &[f64]| p.forward(&Matrix::from_column_slice(3, 14, v)).unwrap().component_mul(&up).sum();
        let idx: Vec<usize> = (0..flat.len()).collect();
        let err = finite_diff_check(f, &flat, g.as_slice(), &idx, 1e-5);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn decay_covers_weights_only() {
        let mut p = MlpParams::zeros(&[2, 2]);
        p.weights[0] = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, -1.0]);
        p.biases[0] = Vector::from_vec(vec![5.0, 5.0]);
        let (v, g) = p.weight_decay(1e-4);
        assert!((v - 6e-4).abs() < 1e-16);
        assert_eq!(g, vec![2e-4, 4e-4, 0.0, -2e-4, 0.0, 0.0]);
    }

    #[test]
    fn flat_round_trip() {
        let p = net(14);
        let mut q = MlpParams::zeros(&DEFAULT_LAYER_DIMS);
        q.set_flat(&p.to_flat()).unwrap();
        assert_eq!(q.weights, p.weights);
        let json = serde_json::to_string(&p).unwrap();
        let back: MlpParams = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
    }
}
