use rand::Rng;

use crate::autodiff::{Activation, Conv1dGeometry, Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

/// `activation(x · W + b)` with `W: [in × out]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
}

impl Dense {
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let weight = params.add_glorot(format!("{name}.weight"), &[inputs, outputs], inputs, outputs, rng);
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Self {
            weight,
            bias,
            activation,
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let w = g.param(params, self.weight);
        let b = g.param(params, self.bias);
        let z = g.dense(x, w, b)?;
        Ok(g.activate(z, self.activation))
    }
}

/// `activation(conv1d(x, K) + b)` with `K: [out_ch × in_ch × kernel]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geometry: Conv1dGeometry,
    pub activation: Activation,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geometry: Conv1dGeometry,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let weight = params.add_glorot(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel],
            in_channels * kernel,
            out_channels * kernel,
            rng,
        );
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self {
            weight,
            bias,
            geometry,
            activation,
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let w = g.param(params, self.weight);
        let b = g.param(params, self.bias);
        let z = g.conv1d(x, w, b, self.geometry)?;
        Ok(g.activate(z, self.activation))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn dense_identity_returns_input() {
        let mut ps = ParamSet::new();
        let layer = Dense::new(&mut ps, "d", 3, 3, Activation::Identity, &mut rng());
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        ps.set_value(layer.weight, eye).unwrap();
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 4.0, -1.0]).unwrap();
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = layer.forward(&mut g, &ps, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn dense_zero_weights_sigmoid_is_half() {
        let mut ps = ParamSet::new();
        let layer = Dense::new(&mut ps, "d", 4, 2, Activation::Sigmoid, &mut rng());
        ps.set_value(layer.weight, Tensor::zeros(&[4, 2])).unwrap();
        let mut g = Graph::new();
        let xv = g.input(Tensor::full(&[3, 4], 2.5));
        let y = layer.forward(&mut g, &ps, xv).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn dense_matches_triple_loop() {
        let mut r = rng();
        let mut ps = ParamSet::new();
        let layer = Dense::new(&mut ps, "d", 3, 4, Activation::Identity, &mut r);
        let bias = Tensor::new(vec![4], vec![0.1, -0.2, 0.3, 0.0]).unwrap();
        ps.set_value(layer.bias, bias.clone()).unwrap();
        let x: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        let x = Tensor::new(vec![2, 3], x).unwrap();
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = layer.forward(&mut g, &ps, xv).unwrap();
        let w = ps.value(layer.weight);
        for i in 0..2 {
            for j in 0..4 {
                let mut acc = bias.data()[j];
                for k in 0..3 {
                    acc += x.data()[i * 3 + k] * w.data()[k * 4 + j];
                }
                assert!((g.value(y).data()[i * 4 + j] - acc).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dense_shape_error_names_both_shapes() {
        let mut ps = ParamSet::new();
        let layer = Dense::new(&mut ps, "d", 3, 4, Activation::Identity, &mut rng());
        let mut g = Graph::new();
        let xv = g.input(Tensor::zeros(&[2, 5]));
        match layer.forward(&mut g, &ps, xv) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 5]);
                assert_eq!(right, vec![3, 4]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    fn conv_single(input: &[f64], kernel: &[f64], geom: Conv1dGeometry) -> Result<Vec<f64>> {
        let mut ps = ParamSet::new();
        let layer = Conv1d::new(&mut ps, "c", 1, 1, kernel.len(), geom, Activation::Identity, &mut rng());
        ps.set_value(layer.weight, Tensor::new(vec![1, 1, kernel.len()], kernel.to_vec())?)?;
        let mut g = Graph::new();
        let xv = g.input(Tensor::new(vec![1, 1, input.len()], input.to_vec())?);
        let y = layer.forward(&mut g, &ps, xv)?;
        Ok(g.value(y).data().to_vec())
    }

    #[test]
    fn conv_sliding_window_sum() {
        let out = conv_single(&[1.0, 2.0, 3.0, 4.0], &[1.0; 3], Conv1dGeometry::default()).unwrap();
        assert_eq!(out, vec![6.0, 9.0]);
    }

    #[test]
    fn conv_delta_kernel_shifts() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let out = conv_single(&x, &[0.0, 1.0, 0.0], Conv1dGeometry { stride: 1, padding: 1 }).unwrap();
        assert_eq!(out, x.to_vec());
        let out = conv_single(&x, &[0.0, 0.0, 1.0], Conv1dGeometry::default()).unwrap();
        assert_eq!(out, vec![3.0, 4.0, 5.0]);
    }

    #[test]
    fn conv_stride_equal_to_length_gives_one_frame() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let out = conv_single(&x, &[1.0, 1.0], Conv1dGeometry { stride: 4, padding: 0 }).unwrap();
        // floor((4 - 2) / 4) + 1 = 1
        assert_eq!(out, vec![3.0]);
    }

    #[test]
    fn conv_kernel_too_large_is_geometry_error() {
        let r = conv_single(&[1.0, 2.0], &[1.0; 3], Conv1dGeometry::default());
        assert!(matches!(r, Err(Error::InvalidGeometry { .. })));
    }
}
