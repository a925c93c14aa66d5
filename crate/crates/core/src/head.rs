//! One-layer 1D convolutional head over the concatenated per-tree outputs.
//!
//! The input holds K client windows of T tree outputs each. Every filter is a
//! length-T kernel applied with stride T, so each kernel weight acts as a
//! learned per-tree rate and filter `f` on window `j` only sees client `j`'s
//! trees. The F x K activations (identity) feed a dense layer and a sigmoid.
//!
//! Flattened activations are filter-major: index `f * K + j`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gbdt::{per_tree_outputs, sigmoid, LocalEnsemble};
use crate::preprocess::FeatureRow;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub filters: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub rng_seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            filters: 4,
            learning_rate: 0.05,
            epochs: 100,
            batch_size: 64,
            rng_seed: 0,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.filters == 0 {
            return Err(Error::config("filters", "must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config("learning_rate", "must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        Ok(())
    }
}

/// Head parameters. Also the per-round federated payload; field order on the
/// wire is shape, conv_kernels (row-major F x T), conv_bias, dense, dense_bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    pub clients: usize,
    pub trees: usize,
    pub filters: usize,
    pub conv_kernels: Vec<f64>,
    pub conv_bias: Vec<f64>,
    pub dense: Vec<f64>,
    pub dense_bias: f64,
}

impl HeadWeights {
    pub fn zeros(clients: usize, trees: usize, filters: usize) -> Self {
        HeadWeights {
            clients,
            trees,
            filters,
            conv_kernels: vec![0.0; filters * trees],
            conv_bias: vec![0.0; filters],
            dense: vec![0.0; filters * clients],
            dense_bias: 0.0,
        }
    }

    pub fn input_len(&self) -> usize {
        self.clients * self.trees
    }

    pub fn same_shape(&self, other: &HeadWeights) -> bool {
        self.clients == other.clients && self.trees == other.trees && self.filters == other.filters
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.filters * self.trees, self.conv_kernels.len()),
            (self.filters, self.conv_bias.len()),
            (self.filters * self.clients, self.dense.len()),
        ];
        for (expected, actual) in checks {
            if expected != actual {
                return Err(Error::Dimension { expected, actual });
            }
        }
        if !self.params().all(f64::is_finite) {
            return Err(Error::Domain("head weights contain non-finite values".into()));
        }
        Ok(())
    }

    /// All parameters in wire order.
    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.conv_kernels
            .iter()
            .chain(&self.conv_bias)
            .chain(&self.dense)
            .copied()
            .chain(std::iter::once(self.dense_bias))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.conv_kernels
            .iter_mut()
            .chain(self.conv_bias.iter_mut())
            .chain(self.dense.iter_mut())
            .chain(std::iter::once(&mut self.dense_bias))
    }

    pub fn param_count(&self) -> usize {
        self.conv_kernels.len() + self.conv_bias.len() + self.dense.len() + 1
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_len() {
            return Err(Error::Dimension {
                expected: self.input_len(),
                actual: input.len(),
            });
        }
        Ok(())
    }

    fn activations(&self, input: &[f64], act: &mut [f64]) {
        let (k, t) = (self.clients, self.trees);
        for f in 0..self.filters {
            let kernel = &self.conv_kernels[f * t..(f + 1) * t];
            for j in 0..k {
                let window = &input[j * t..(j + 1) * t];
                act[f * k + j] = kernel.iter().zip(window).map(|(w, x)| w * x).sum::<f64>() + self.conv_bias[f];
            }
        }
    }

    fn logit_with(&self, input: &[f64], act: &mut [f64]) -> f64 {
        self.activations(input, act);
        self.dense.iter().zip(act.iter()).map(|(w, a)| w * a).sum::<f64>() + self.dense_bias
    }

    /// Pre-sigmoid output.
    pub fn logit(&self, input: &[f64]) -> Result<f64> {
        self.check_input(input)?;
        let mut act = vec![0.0; self.filters * self.clients];
        Ok(self.logit_with(input, &mut act))
    }
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every parameter, with the
/// convolution's fan-in T and the dense layer's fan-in F*K.
pub fn init(clients: usize, trees: usize, config: &HeadConfig) -> Result<HeadWeights> {
    config.validate()?;
    if clients == 0 || trees == 0 {
        return Err(Error::config("clients/trees", "head needs k >= 1 and t >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let f = config.filters;
    let conv_bound = 1.0 / (trees as f64).sqrt();
    let dense_bound = 1.0 / ((f * clients) as f64).sqrt();
    let mut draw = |bound: f64, n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
    let conv_kernels = draw(conv_bound, f * trees);
    let conv_bias = draw(conv_bound, f);
    let dense = draw(dense_bound, f * clients);
    let dense_bias = draw(dense_bound, 1)[0];
    Ok(HeadWeights {
        clients,
        trees,
        filters: f,
        conv_kernels,
        conv_bias,
        dense,
        dense_bias,
    })
}

/// Attack-onset probability for one K*T tree-output vector.
pub fn forward(weights: &HeadWeights, tree_vector: &[f64]) -> Result<f64> {
    weights.logit(tree_vector).map(sigmoid)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Mean binary cross-entropy over a batch.
pub fn loss(weights: &HeadWeights, inputs: &[&[f64]], targets: &[f64]) -> Result<f64> {
    let mut act = vec![0.0; weights.filters * weights.clients];
    let mut total = 0.0;
    for (x, &y) in inputs.iter().zip(targets) {
        weights.check_input(x)?;
        let z = weights.logit_with(x, &mut act);
        total += softplus(z) - y * z;
    }
    Ok(total / inputs.len().max(1) as f64)
}

/// Mean BCE and its analytic gradient (same layout as the weights).
///
/// With identity activation the logit is linear in the input:
/// `z = sum_jt x[j,t] * m[j,t] + c` where `m[j,t] = sum_f dense[f,j] * kernel[f,t]`.
/// Per row only `delta * x` is accumulated; the parameter gradients are
/// recovered from that sum once per batch.
pub fn gradient(weights: &HeadWeights, inputs: &[&[f64]], targets: &[f64]) -> Result<(f64, HeadWeights)> {
    let (k, t, nf) = (weights.clients, weights.trees, weights.filters);
    let mut mixed = vec![0.0; k * t];
    let mut offset = weights.dense_bias;
    for f in 0..nf {
        let kernel = &weights.conv_kernels[f * t..(f + 1) * t];
        for j in 0..k {
            let d = weights.dense[f * k + j];
            offset += d * weights.conv_bias[f];
            for (m, w) in mixed[j * t..(j + 1) * t].iter_mut().zip(kernel) {
                *m += d * w;
            }
        }
    }

    let mut weighted = vec![0.0; k * t];
    let mut delta_sum = 0.0;
    let mut total = 0.0;
    for (x, &y) in inputs.iter().zip(targets) {
        weights.check_input(x)?;
        let z = mixed.iter().zip(x.iter()).map(|(m, v)| m * v).sum::<f64>() + offset;
        total += softplus(z) - y * z;
        let delta = sigmoid(z) - y;
        delta_sum += delta;
        for (s, v) in weighted.iter_mut().zip(x.iter()) {
            *s += delta * v;
        }
    }

    let mut grad = HeadWeights::zeros(k, t, nf);
    grad.dense_bias = delta_sum;
    for f in 0..nf {
        let kernel = &weights.conv_kernels[f * t..(f + 1) * t];
        let mut dense_row_sum = 0.0;
        for j in 0..k {
            let idx = f * k + j;
            let d = weights.dense[idx];
            dense_row_sum += d;
            let s = &weighted[j * t..(j + 1) * t];
            grad.dense[idx] = kernel.iter().zip(s).map(|(w, v)| w * v).sum::<f64>() + weights.conv_bias[f] * delta_sum;
            for (g, v) in grad.conv_kernels[f * t..(f + 1) * t].iter_mut().zip(s) {
                *g += d * v;
            }
        }
        grad.conv_bias[f] = delta_sum * dense_row_sum;
    }
    let scale = 1.0 / inputs.len().max(1) as f64;
    for g in grad.params_mut() {
        *g *= scale;
    }
    Ok((total * scale, grad))
}

/// Mini-batch SGD on precomputed tree-output vectors.
pub fn train_on_vectors(
    weights: &HeadWeights,
    inputs: &[Vec<f64>],
    targets: &[f64],
    config: &HeadConfig,
    seed: u64,
) -> Result<HeadWeights> {
    config.validate()?;
    if inputs.is_empty() {
        return Err(Error::Domain("local head training needs at least one row".into()));
    }
    let mut w = weights.clone();
    if config.learning_rate == 0.0 {
        return Ok(w);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut batch_x: Vec<&[f64]> = Vec::with_capacity(config.batch_size);
    let mut batch_y = Vec::with_capacity(config.batch_size);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            batch_x.clear();
            batch_y.clear();
            for &i in chunk {
                batch_x.push(&inputs[i]);
                batch_y.push(targets[i]);
            }
            let (_, g) = gradient(&w, &batch_x, &batch_y)?;
            for (p, gv) in w.params_mut().zip(g.params()) {
                *p -= config.learning_rate * gv;
            }
        }
    }
    Ok(w)
}

/// Client update: SGD over the client's rows with the tree ensembles frozen.
pub fn train_local(
    weights: &HeadWeights,
    rows: &[FeatureRow],
    ensembles: &[LocalEnsemble],
    config: &HeadConfig,
) -> Result<HeadWeights> {
    let inputs = rows
        .iter()
        .map(|r| per_tree_outputs(ensembles, &r.features))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<f64> = rows.iter().map(|r| r.label.target()).collect();
    train_on_vectors(weights, &inputs, &targets, config, config.rng_seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(filters: usize, seed: u64) -> HeadConfig {
        HeadConfig {
            filters,
            rng_seed: seed,
            ..Default::default()
        }
    }

    #[test]
    fn init_is_seeded_and_shaped() {
        let a = init(3, 4, &cfg(2, 7)).unwrap();
        assert_eq!(a, init(3, 4, &cfg(2, 7)).unwrap());
        assert_ne!(a, init(3, 4, &cfg(2, 8)).unwrap());
        a.validate().unwrap();
        let tiny = init(1, 1, &cfg(1, 0)).unwrap();
        assert_eq!(tiny.conv_kernels.len() + tiny.conv_bias.len() + tiny.dense.len(), 3);
        assert_eq!(tiny.param_count(), 4);
        let bound = 1.0 / 2.0;
        assert!(a.conv_kernels.iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn forward_analytic_cases() {
        let zero = HeadWeights::zeros(2, 3, 1);
        assert_eq!(forward(&zero, &[1.0; 6]).unwrap(), 0.5);

        let mut ones = HeadWeights::zeros(2, 3, 1);
        ones.conv_kernels.fill(1.0);
        ones.dense.fill(1.0);
        let v = [0.1, -0.2, 0.3, 0.05, 0.0, -0.4];
        let expected = sigmoid(v.iter().sum());
        assert!((forward(&ones, &v).unwrap() - expected).abs() < 1e-15);
        assert!(matches!(forward(&ones, &v[..5]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn forward_matches_nested_loop_oracle() {
        let w = init(3, 2, &cfg(4, 11)).unwrap();
        let v = [0.3, -0.1, 0.7, 0.2, -0.5, 0.9];
        // Oracle: explicit convolution then dense, written independently.
        let mut z = w.dense_bias;
        for f in 0..4 {
            for j in 0..3 {
                let mut a = w.conv_bias[f];
                for s in 0..2 {
                    a += w.conv_kernels[f * 2 + s] * v[j * 2 + s];
                }
                z += w.dense[f * 3 + j] * a;
            }
        }
        let oracle = 1.0 / (1.0 + (-z).exp());
        assert!((forward(&w, &v).unwrap() - oracle).abs() < 1e-14);
    }

    #[test]
    fn window_j_depends_only_on_client_j() {
        let w = init(3, 2, &cfg(2, 5)).unwrap();
        let mut act_a = vec![0.0; 6];
        let mut act_b = vec![0.0; 6];
        let a = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let mut b = a;
        b[2] = -3.0;
        b[3] = 7.0;
        w.activations(&a, &mut act_a);
        w.activations(&b, &mut act_b);
        for f in 0..2 {
            assert_eq!(act_a[f * 3], act_b[f * 3]);
            assert_ne!(act_a[f * 3 + 1], act_b[f * 3 + 1]);
            assert_eq!(act_a[f * 3 + 2], act_b[f * 3 + 2]);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let w = init(2, 2, &cfg(2, 1)).unwrap();
        let c = HeadConfig {
            learning_rate: 0.0,
            ..cfg(2, 1)
        };
        let out = train_on_vectors(&w, &[vec![1.0, 2.0, 3.0, 4.0]], &[1.0], &c, 0).unwrap();
        assert_eq!(out, w);
    }

    #[test]
    fn repeated_sample_moves_toward_label() {
        let w = init(2, 2, &cfg(2, 3)).unwrap();
        let x = vec![0.5, -0.2, 0.1, 0.4];
        let c = HeadConfig {
            epochs: 1,
            batch_size: 1,
            learning_rate: 0.1,
            ..cfg(2, 3)
        };
        let mut cur = w;
        let mut prev = forward(&cur, &x).unwrap();
        for _ in 0..50 {
            cur = train_on_vectors(&cur, std::slice::from_ref(&x), &[1.0], &c, 0).unwrap();
            let p = forward(&cur, &x).unwrap();
            assert!(p > prev, "{p} !> {prev}");
            prev = p;
        }
        assert!(prev > 0.9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let w = init(2, 3, &cfg(3, 9)).unwrap();
        let xs = [vec![0.3, -0.2, 0.5, 0.1, 0.0, -0.6], vec![-0.4, 0.2, 0.2, 0.9, -0.3, 0.1]];
        let ys = [1.0, 0.0];
        let batch: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let (_, g) = gradient(&w, &batch, &ys).unwrap();
        let h = 1e-5;
        let analytic: Vec<f64> = g.params().collect();
        for (i, a) in analytic.iter().enumerate() {
            let mut plus = w.clone();
            let mut minus = w.clone();
            *plus.params_mut().nth(i).unwrap() += h;
            *minus.params_mut().nth(i).unwrap() -= h;
            let fd = (loss(&plus, &batch, &ys).unwrap() - loss(&minus, &batch, &ys).unwrap()) / (2.0 * h);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            assert!(rel <= 1e-4, "param {i}: analytic {a} fd {fd}");
        }
    }

    #[test]
    fn weights_json_roundtrip() {
        let w = init(3, 2, &cfg(2, 4)).unwrap();
        let json = serde_json::to_string(&w).unwrap();
        let kernels = json.find("conv_kernels").unwrap();
        let bias = json.find("conv_bias").unwrap();
        let dense = json.find("\"dense\"").unwrap();
        let dense_bias = json.find("dense_bias").unwrap();
        assert!(kernels < bias && bias < dense && dense < dense_bias);
        assert_eq!(serde_json::from_str::<HeadWeights>(&json).unwrap(), w);
    }
}
