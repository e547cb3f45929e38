//! Plaintext reference CNN: forward pass, backprop, SGD and central
//! differences. Written for obviousness, not speed.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::ModelConfig;
use crate::tensor::{take_tensor, Tensor, TensorBundle};

#[derive(Debug, Clone, PartialEq)]
pub struct PlainModel {
    /// Per conv layer: filters × channels × kernel × kernel.
    pub conv: Vec<Tensor>,
    /// Per dense layer: outputs × inputs.
    pub fc: Vec<Tensor>,
}

impl PlainModel {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            conv: config
                .conv
                .iter()
                .map(|c| Tensor::zeros(vec![c.filters, c.channels, c.kernel, c.kernel]))
                .collect(),
            fc: config.fc.iter().map(|f| Tensor::zeros(vec![f.outputs, f.inputs])).collect(),
        }
    }

    /// Uniform weights in ±√(3/fan_in): unit weight variance per input, which
    /// keeps squared activations of ±1 inputs on a stable scale.
    pub fn random(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut m = Self::zeros(config);
        for t in m.conv.iter_mut().chain(m.fc.iter_mut()) {
            let fan_in: usize = t.shape()[1..].iter().product();
            let scale = (3.0 / fan_in as f64).sqrt();
            for v in t.data_mut() {
                *v = rng.gen_range(-scale..=scale);
            }
        }
        m
    }

    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.conv.len() != config.conv.len() || self.fc.len() != config.fc.len() {
            return Err(Error::Shape(format!(
                "model has {} conv and {} dense layers, config has {} and {}",
                self.conv.len(),
                self.fc.len(),
                config.conv.len(),
                config.fc.len()
            )));
        }
        for (l, (t, c)) in self.conv.iter().zip(&config.conv).enumerate() {
            t.expect_shape(&format!("conv{l}"), &[c.filters, c.channels, c.kernel, c.kernel])?;
        }
        for (l, (t, f)) in self.fc.iter().zip(&config.fc).enumerate() {
            t.expect_shape(&format!("fc{l}"), &[f.outputs, f.inputs])?;
        }
        Ok(())
    }

    pub fn to_bundle(&self) -> TensorBundle {
        let mut b = TensorBundle::new();
        for (l, t) in self.conv.iter().enumerate() {
            b.insert(format!("conv{l}"), t.clone());
        }
        for (l, t) in self.fc.iter().enumerate() {
            b.insert(format!("fc{l}"), t.clone());
        }
        b
    }

    pub fn from_bundle(bundle: &TensorBundle, config: &ModelConfig) -> Result<Self> {
        let m = Self {
            conv: (0..config.conv.len())
                .map(|l| take_tensor(bundle, &format!("conv{l}")))
                .collect::<Result<_>>()?,
            fc: (0..config.fc.len())
                .map(|l| take_tensor(bundle, &format!("fc{l}")))
                .collect::<Result<_>>()?,
        };
        m.check(config)?;
        Ok(m)
    }

    fn weights_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.conv.iter_mut().chain(self.fc.iter_mut())
    }

    fn weights(&self) -> impl Iterator<Item = &Tensor> {
        self.conv.iter().chain(self.fc.iter())
    }

    /// `self − η·grad`, layer by layer.
    pub fn sgd_step(&self, grads: &Gradients, eta: f64) -> PlainModel {
        let mut out = self.clone();
        for (w, g) in out.weights_mut().zip(grads.conv.iter().chain(grads.fc.iter())) {
            for (a, b) in w.data_mut().iter_mut().zip(g.data()) {
                *a -= eta * b;
            }
        }
        out
    }
}

/// Random batch of `n` images shaped n × channels × side × side.
pub fn random_inputs(config: &ModelConfig, rng: &mut impl Rng) -> Tensor {
    let shape = vec![config.n, config.input_channels(), config.input_side, config.input_side];
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.gen_range(-1.0..=1.0)).collect()).unwrap()
}

pub fn random_labels(config: &ModelConfig, rng: &mut impl Rng) -> Tensor {
    let shape = vec![config.n, config.output_count()];
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.gen_range(-1.0..=1.0)).collect()).unwrap()
}

/// Whether layer `l` (conv layers first, then dense) squares its output.
pub fn layer_activation(config: &ModelConfig, activation: bool, l: usize) -> bool {
    let total = config.conv.len() + config.fc.len();
    activation && (l + 1 < total || config.final_activation)
}

/// Everything the forward pass produced, per layer (conv layers first).
/// Conv tensors are n × channels × side × side; dense ones n × width.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub layer_inputs: Vec<Tensor>,
    pub pre_activations: Vec<Tensor>,
    pub logits: Tensor,
}

pub fn plain_forward(
    model: &PlainModel,
    config: &ModelConfig,
    inputs: &Tensor,
    activation: bool,
) -> Result<Trace> {
    model.check(config)?;
    let n = config.n;
    let side = config.input_side;
    inputs.expect_shape("inputs", &[n, config.input_channels(), side, side])?;
    let mut layer_inputs = Vec::new();
    let mut pre = Vec::new();
    let mut x = inputs.clone();
    for (l, (c, f)) in config.conv.iter().zip(&model.conv).enumerate() {
        let s_in = x.shape()[2];
        if s_in < c.kernel {
            return Err(Error::Shape(format!("CL{}: input side {s_in} below kernel {}", l + 1, c.kernel)));
        }
        let s_out = 1 + (s_in - c.kernel) / c.stride;
        let mut z = Tensor::zeros(vec![n, c.filters, s_out, s_out]);
        for t in 0..n {
            for k in 0..c.filters {
                for u in 0..s_out {
                    for v in 0..s_out {
                        let mut acc = 0.0;
                        for i in 0..c.channels {
                            for dx in 0..c.kernel {
                                for dy in 0..c.kernel {
                                    acc += x.at(&[t, i, c.stride * u + dx, c.stride * v + dy])
                                        * f.at(&[k, i, dx, dy]);
                                }
                            }
                        }
                        *z.at_mut(&[t, k, u, v]) = acc;
                    }
                }
            }
        }
        layer_inputs.push(x);
        x = activate(&z, layer_activation(config, activation, l));
        pre.push(z);
    }
    let width: usize = x.shape()[1..].iter().product();
    let mut x = Tensor::new(vec![n, width], x.into_data()).unwrap();
    for (l, (fc, m)) in config.fc.iter().zip(&model.fc).enumerate() {
        if x.shape()[1] != fc.inputs {
            return Err(Error::Shape(format!(
                "FL{}: expects {} inputs, previous layer emits {}",
                l + 1,
                fc.inputs,
                x.shape()[1]
            )));
        }
        let mut z = Tensor::zeros(vec![n, fc.outputs]);
        for t in 0..n {
            for o in 0..fc.outputs {
                *z.at_mut(&[t, o]) = (0..fc.inputs).map(|i| m.at(&[o, i]) * x.at(&[t, i])).sum();
            }
        }
        layer_inputs.push(x);
        x = activate(&z, layer_activation(config, activation, config.conv.len() + l));
        pre.push(z);
    }
    Ok(Trace { layer_inputs, pre_activations: pre, logits: x })
}

fn activate(z: &Tensor, on: bool) -> Tensor {
    if !on {
        return z.clone();
    }
    Tensor::new(z.shape().to_vec(), z.data().iter().map(|v| v * v).collect()).unwrap()
}

/// Σ_t Σ_j (ŷ − y)² / n.
pub fn mse_loss(logits: &Tensor, labels: &Tensor) -> Result<f64> {
    labels.expect_shape("labels", logits.shape())?;
    let n = logits.shape()[0] as f64;
    Ok(logits.data().iter().zip(labels.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// ∂loss/∂logits = 2(ŷ − y)/n.
pub fn mse_gradient(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    labels.expect_shape("labels", logits.shape())?;
    let n = logits.shape()[0] as f64;
    Tensor::new(
        logits.shape().to_vec(),
        logits.data().iter().zip(labels.data()).map(|(a, b)| 2.0 * (a - b) / n).collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub conv: Vec<Tensor>,
    pub fc: Vec<Tensor>,
    /// ∂loss/∂(input of layer l), same shapes as `Trace::layer_inputs`.
    pub layer_inputs: Vec<Tensor>,
}

pub fn plain_backward(
    model: &PlainModel,
    config: &ModelConfig,
    inputs: &Tensor,
    labels: &Tensor,
    activation: bool,
) -> Result<Gradients> {
    let trace = plain_forward(model, config, inputs, activation)?;
    let n = config.n;
    let c = config.conv.len();
    let mut g = mse_gradient(&trace.logits, labels)?;
    let mut conv_grads = vec![Tensor::zeros(vec![]); c];
    let mut fc_grads = vec![Tensor::zeros(vec![]); config.fc.len()];
    let mut input_grads = vec![Tensor::zeros(vec![]); c + config.fc.len()];

    for l in (0..config.fc.len()).rev() {
        let idx = c + l;
        let gz = activation_grad(&trace.pre_activations[idx], &g, layer_activation(config, activation, idx));
        let x = &trace.layer_inputs[idx];
        let m = &model.fc[l];
        let fc = config.fc[l];
        let mut dm = Tensor::zeros(vec![fc.outputs, fc.inputs]);
        let mut dx = Tensor::zeros(vec![n, fc.inputs]);
        for t in 0..n {
            for o in 0..fc.outputs {
                let go = gz.at(&[t, o]);
                for i in 0..fc.inputs {
                    *dm.at_mut(&[o, i]) += go * x.at(&[t, i]);
                    *dx.at_mut(&[t, i]) += go * m.at(&[o, i]);
                }
            }
        }
        fc_grads[l] = dm;
        input_grads[idx] = dx.clone();
        g = dx;
    }
    for l in (0..c).rev() {
        let x = &trace.layer_inputs[l];
        let z = &trace.pre_activations[l];
        let g_out = Tensor::new(z.shape().to_vec(), g.into_data())?;
        let gz = activation_grad(z, &g_out, layer_activation(config, activation, l));
        let cl = config.conv[l];
        let f = &model.conv[l];
        let s_out = z.shape()[2];
        let mut df = Tensor::zeros(f.shape().to_vec());
        let mut dx = Tensor::zeros(x.shape().to_vec());
        for t in 0..n {
            for k in 0..cl.filters {
                for u in 0..s_out {
                    for v in 0..s_out {
                        let go = gz.at(&[t, k, u, v]);
                        for i in 0..cl.channels {
                            for a in 0..cl.kernel {
                                for b in 0..cl.kernel {
                                    let p = [t, i, cl.stride * u + a, cl.stride * v + b];
                                    *df.at_mut(&[k, i, a, b]) += go * x.at(&p);
                                    *dx.at_mut(&p) += go * f.at(&[k, i, a, b]);
                                }
                            }
                        }
                    }
                }
            }
        }
        conv_grads[l] = df;
        input_grads[l] = dx.clone();
        g = dx;
    }
    Ok(Gradients { conv: conv_grads, fc: fc_grads, layer_inputs: input_grads })
}

fn activation_grad(z: &Tensor, g: &Tensor, on: bool) -> Tensor {
    if !on {
        return g.clone();
    }
    Tensor::new(z.shape().to_vec(), z.data().iter().zip(g.data()).map(|(z, g)| 2.0 * z * g).collect())
        .unwrap()
}

/// Central differences of the loss in every weight; `layer_inputs` is left
/// empty.
pub fn finite_diff_grad(
    model: &PlainModel,
    config: &ModelConfig,
    inputs: &Tensor,
    labels: &Tensor,
    activation: bool,
    step: f64,
) -> Result<Gradients> {
    if step.is_nan() || step <= 0.0 {
        return Err(Error::InvalidParameter("finite-difference step must be positive".into()));
    }
    let loss = |m: &PlainModel| -> Result<f64> {
        mse_loss(&plain_forward(m, config, inputs, activation)?.logits, labels)
    };
    let mut grads: Vec<Tensor> = Vec::new();
    let mut probe = model.clone();
    for (w, original) in model.weights().enumerate() {
        let mut g = Tensor::zeros(original.shape().to_vec());
        for e in 0..original.len() {
            let base = original.data()[e];
            probe.weights_mut().nth(w).unwrap().data_mut()[e] = base + step;
            let up = loss(&probe)?;
            probe.weights_mut().nth(w).unwrap().data_mut()[e] = base - step;
            let down = loss(&probe)?;
            probe.weights_mut().nth(w).unwrap().data_mut()[e] = base;
            g.data_mut()[e] = (up - down) / (2.0 * step);
        }
        grads.push(g);
    }
    let fc = grads.split_off(model.conv.len());
    Ok(Gradients { conv: grads, fc, layer_inputs: Vec::new() })
}

/// Largest per-element relative error of `got` against `want`. The
/// denominator is floored at 1e-6 of the largest reference magnitude so
/// that entries which cancel to zero are judged on the vector's scale.
pub fn max_relative_error(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len(), "compared vectors differ in length");
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (scale * 1e-6).max(f64::MIN_POSITIVE);
    got.iter()
        .zip(want)
        .map(|(a, b)| (a - b).abs() / b.abs().max(floor))
        .fold(0.0, f64::max)
}

/// Largest absolute error relative to the largest reference magnitude; the
/// usual yardstick for finite-difference checks, where tiny entries carry
/// only rounding noise.
pub fn max_scaled_error(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len(), "compared vectors differ in length");
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let worst = got.iter().zip(want).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if scale == 0.0 {
        worst
    } else {
        worst / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ConvLayerConfig, FcLayerConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn desk_config(c: usize, f: usize, n: usize) -> ModelConfig {
        let mut conv = Vec::new();
        let mut ch = 2;
        for _ in 0..c {
            conv.push(ConvLayerConfig { channels: ch, filters: 2, kernel: 2, stride: 1 });
            ch = 2;
        }
        let side = 6;
        let out_side = side - c;
        let mut fc = vec![FcLayerConfig { inputs: ch * out_side * out_side, outputs: 3 }];
        for _ in 1..f {
            fc.push(FcLayerConfig { inputs: 3, outputs: 3 });
        }
        ModelConfig { input_side: side, n, slot_count: 256, conv, fc, final_activation: false }
    }

    #[test]
    fn worked_example_logits() {
        let config = ModelConfig::worked_example();
        let mut model = PlainModel::zeros(&config);
        model.conv[0] = Tensor::new(vec![2, 1, 2, 2], vec![1., 0., 0., 0., 1., 0., 0., 0.]).unwrap();
        model.conv[1] = Tensor::new(vec![1, 2, 2, 2], vec![1., 0., 0., 0., 0., 0., 0., 1.]).unwrap();
        model.fc[0] = Tensor::new(vec![2, 4], vec![1., 0., 0., 1., 1., -1., 1., 0.]).unwrap();
        model.fc[1] = Tensor::new(vec![2, 2], vec![1., -1., 0., 1.]).unwrap();
        let mut inputs = Tensor::zeros(vec![2, 1, 8, 8]);
        for t in 0..2 {
            for x in 0..8 {
                for y in 0..8 {
                    *inputs.at_mut(&[t, 0, x, y]) = (t + 1) as f64 * (8 * x + y + 1) as f64;
                }
            }
        }
        let trace = plain_forward(&model, &config, &inputs, false).unwrap();
        assert_eq!(trace.logits.data(), &[36., 76., 72., 152.]);
    }

    #[test]
    fn trivial_models() {
        let config = ModelConfig {
            input_side: 2,
            n: 2,
            slot_count: 16,
            conv: vec![],
            fc: vec![FcLayerConfig { inputs: 4, outputs: 4 }],
            final_activation: false,
        };
        let mut model = PlainModel::zeros(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = random_inputs(&config, &mut rng);
        assert!(plain_forward(&model, &config, &inputs, true).unwrap().logits.data().iter().all(|&v| v == 0.0));
        for i in 0..4 {
            *model.fc[0].at_mut(&[i, i]) = 1.0;
        }
        let logits = plain_forward(&model, &config, &inputs, true).unwrap().logits;
        assert_eq!(logits.data(), inputs.data());
        let g = plain_backward(&model, &config, &inputs, &logits, true).unwrap();
        assert!(g.fc[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_weight_derivative() {
        // loss = (w·x − y)² with n = 1
        let config = ModelConfig {
            input_side: 1,
            n: 1,
            slot_count: 2,
            conv: vec![],
            fc: vec![FcLayerConfig { inputs: 1, outputs: 1 }],
            final_activation: false,
        };
        let mut model = PlainModel::zeros(&config);
        model.fc[0].data_mut()[0] = 1.5;
        let x = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let y = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let g = plain_backward(&model, &config, &x, &y, true).unwrap();
        assert_eq!(g.fc[0].data(), &[2.0 * (1.5 * 2.0 - 1.0) * 2.0]);
        let fd = finite_diff_grad(&model, &config, &x, &y, true, 1e-5).unwrap();
        assert!((fd.fc[0].data()[0] - 8.0).abs() < 1e-8);
        let zero = Tensor::zeros(vec![1, 1, 1, 1]);
        let y0 = Tensor::zeros(vec![1, 1]);
        assert_eq!(finite_diff_grad(&model, &config, &zero, &y0, true, 1e-5).unwrap().fc[0].data(), &[0.0]);
    }

    #[test]
    fn bundle_round_trip() {
        let config = desk_config(2, 2, 2);
        let model = PlainModel::random(&config, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(PlainModel::from_bundle(&model.to_bundle(), &config).unwrap(), model);
        let mut bad = model.to_bundle();
        bad.remove("fc1");
        assert!(PlainModel::from_bundle(&bad, &config).is_err());
    }

    #[test]
    fn relative_error_metric() {
        assert_eq!(max_relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((max_relative_error(&[1.1], &[1.0]) - 0.1).abs() < 1e-12);
        // a cancellation zero is judged against the vector's scale
        assert!(max_relative_error(&[1e-16, 5.0], &[0.0, 5.0]) < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn backprop_matches_finite_differences(
            seed in any::<u64>(), c in 0usize..=2, f in 1usize..=2, act in any::<bool>()
        ) {
            let mut config = desk_config(c, f, 2);
            config.final_activation = act;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = PlainModel::random(&config, &mut rng);
            let x = random_inputs(&config, &mut rng);
            let y = random_labels(&config, &mut rng);
            let g = plain_backward(&model, &config, &x, &y, true).unwrap();
            let fd = finite_diff_grad(&model, &config, &x, &y, true, 1e-5).unwrap();
            for (a, b) in g.conv.iter().chain(&g.fc).zip(fd.conv.iter().chain(&fd.fc)) {
                let err = max_scaled_error(b.data(), a.data());
                prop_assert!(err < 1e-4, "relative error {}", err);
            }
        }
    }
}
