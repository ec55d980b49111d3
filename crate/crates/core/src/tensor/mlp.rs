//! Small multi-layer perceptrons: ReLU hidden layers, linear output.

use std::collections::BTreeMap;

use rand::Rng;

use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

/// One affine layer; weight is stored [in, out] so a row-major batch of
/// inputs multiplies it directly.
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

pub struct MlpParams {
    pub layers: Vec<(Linear, Activation)>,
}

impl MlpParams {
    /// Xavier-uniform weights, zero biases; ReLU between layers, last layer
    /// linear. `dims` chains input through hidden sizes to the output.
    pub fn new<R: Rng>(dims: &[usize], rng: &mut R) -> MlpParams {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims, got {dims:?}");
        let mut layers = Vec::new();
        for i in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weight = Tensor::param(
                &[fan_in, fan_out],
                (0..fan_in * fan_out).map(|_| rng.random_range(-s..s)).collect(),
            );
            let bias = Tensor::param(&[fan_out], vec![0.0; fan_out]);
            let act = if i + 2 == dims.len() { Activation::Linear } else { Activation::Relu };
            layers.push((Linear { weight, bias }, act));
        }
        MlpParams { layers }
    }

    /// Zeroes the final layer so the untrained MLP is the zero map; residual
    /// heads start as identities this way.
    pub fn zero_final(self) -> Self {
        let (last, _) = self.layers.last().expect("MLP has layers");
        last.weight.set_value(&vec![0.0; last.weight.numel()]);
        last.bias.set_value(&vec![0.0; last.bias.numel()]);
        self
    }

    /// Multiplies the final layer's weights, widening the spread of the
    /// untrained MLP's outputs without touching its biases.
    pub fn scale_final(self, factor: f64) -> Self {
        let (last, _) = self.layers.last().expect("MLP has layers");
        let scaled: Vec<f64> = last.weight.value().iter().map(|w| w * factor).collect();
        last.weight.set_value(&scaled);
        self
    }

    /// Overrides the final bias (e.g. background-leaning class logits).
    pub fn with_final_bias(self, bias: &[f64]) -> Self {
        let (last, _) = self.layers.last().expect("MLP has layers");
        last.bias.set_value(bias);
        self
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().0.weight.shape()[1]
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (layer, _) in &self.layers {
            out.push(layer.weight.clone());
            out.push(layer.bias.clone());
        }
        out
    }

    /// Registers parameters under `{prefix}.w{i}` / `{prefix}.b{i}`.
    pub fn named(&self, prefix: &str, out: &mut BTreeMap<String, Tensor>) {
        for (i, (layer, _)) in self.layers.iter().enumerate() {
            out.insert(format!("{prefix}.w{i}"), layer.weight.clone());
            out.insert(format!("{prefix}.b{i}"), layer.bias.clone());
        }
    }
}

/// Runs the MLP on a [n, in] batch or a single [in] vector (returned in the
/// same rank).
pub fn mlp_forward(params: &MlpParams, input: &Tensor) -> Tensor {
    let was_vector = input.shape().len() == 1;
    let mut x = if was_vector {
        input.reshape(&[1, input.numel()])
    } else {
        input.clone()
    };
    assert_eq!(
        x.shape()[1],
        params.input_dim(),
        "mlp_forward input shape {:?} does not match first layer dim {}",
        input.shape(),
        params.input_dim()
    );
    for (layer, act) in &params.layers {
        x = x.matmul(&layer.weight).add_bias(&layer.bias);
        if *act == Activation::Relu {
            x = x.relu();
        }
    }
    if was_vector {
        let out = x.numel();
        x.reshape(&[out])
    } else {
        x
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck;
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zeroed_mlp_maps_everything_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = MlpParams::new(&[4, 8, 3], &mut rng).zero_final();
        let x = Tensor::constant(&[4], vec![1.0, -2.0, 0.5, 3.0]);
        assert_eq!(mlp_forward(&mlp, &x).to_vec(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn single_linear_layer_is_affine() {
        let mlp = MlpParams {
            layers: vec![(
                Linear {
                    weight: Tensor::param(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]),
                    bias: Tensor::param(&[2], vec![10.0, 20.0]),
                },
                Activation::Linear,
            )],
        };
        let x = Tensor::constant(&[2], vec![1.0, 1.0]);
        let y = mlp_forward(&mlp, &x);
        assert_eq!(y.to_vec(), vec![14.0, 26.0]);
    }

    #[test]
    fn batched_forward_matches_per_row_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = MlpParams::new(&[3, 5, 2], &mut rng);
        let rows = vec![vec![0.1, -0.2, 0.3], vec![1.0, 0.0, -1.0]];
        let batch = Tensor::constant(&[2, 3], rows.concat());
        let out = mlp_forward(&mlp, &batch);
        for (i, r) in rows.iter().enumerate() {
            let single = mlp_forward(&mlp, &Tensor::constant(&[3], r.clone()));
            for (a, b) in out.row(i).value().iter().zip(single.value().iter()) {
                assert_relative_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mlp = MlpParams::new(&[3, 6, 2], &mut rng);
            let x = Tensor::param(
                &[3],
                (0..3).map(|_| rng.random_range(-1.0f64..1.0)).collect(),
            );
            let mut params = mlp.params();
            params.push(x.clone());
            let xx = x.clone();
            let err = gradcheck(move || mlp_forward(&mlp, &xx).sum(), &params, 1e-5).unwrap();
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    #[should_panic(expected = "does not match first layer dim")]
    fn input_dim_mismatch_panics() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = MlpParams::new(&[4, 2], &mut rng);
        mlp_forward(&mlp, &Tensor::constant(&[3], vec![0.0; 3]));
    }
}
