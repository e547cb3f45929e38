//! Encrypted inference over packed ciphertexts.

use crate::error::{Error, PhaseExt, Result};
use crate::exec::{map_with_ledger, Schedule};
use crate::geometry::{ConvPlan, FcPlan, FcType, PackingMode, PackingPlan};
use crate::he_sim::{HeBackend, HeDecrypt};
use crate::ledger::OpLedger;
use crate::oracle::PlainModel;
use crate::packing::{
    encrypt_inputs, encrypt_model, unpack_outputs, ActivationGrid, ConvLayout, EncryptedModel,
    GridLayout,
};
use crate::rotate::{dot, fold_window, Direction};
use crate::tensor::Tensor;

/// Per-layer grids kept for the backward pass: each layer's input and its
/// value before the square.
#[derive(Debug, Clone)]
pub struct ForwardTrace<C> {
    pub layer_inputs: Vec<ActivationGrid<C>>,
    pub pre_activations: Vec<ActivationGrid<C>>,
    pub output: ActivationGrid<C>,
}

fn expect_conv<C>(grid: &ActivationGrid<C>, want: ConvLayout, side: usize) -> Result<()> {
    if grid.layout != GridLayout::Conv(want) || grid.side != side {
        return Err(Error::Shape(format!(
            "conv layer expects a {want:?} grid of side {side}, got {:?} of side {}",
            grid.layout, grid.side
        )));
    }
    Ok(())
}

/// Baseline convolution: output `(k, u′, v′)` sums `X(i, δu′+x, δv′+y) ⊗ F(k,i,x,y)`.
pub fn conv_forward<B: HeBackend>(
    be: &B,
    c: &ConvPlan,
    input: &ActivationGrid<B::Ciphertext>,
    filters: &[B::Ciphertext],
    schedule: Schedule,
    ledger: &mut OpLedger,
) -> Result<ActivationGrid<B::Ciphertext>> {
    expect_conv(input, ConvLayout::Plain, c.combined_kernel)?;
    let side = c.out_side;
    let k2 = c.kernel * c.kernel;
    let cts = map_with_ledger(c.filters * side * side, schedule, ledger, |o, l| {
        let (k, u, v) = (o / (side * side), o / side % side, o % side);
        let pairs = (0..c.channels).flat_map(|i| {
            (0..c.kernel).flat_map(move |x| (0..c.kernel).map(move |y| (i, x, y)))
        });
        dot(
            be,
            pairs.map(|(i, x, y)| {
                (
                    input.at(i, c.stride * u + x, c.stride * v + y),
                    &filters[(k * c.channels + i) * k2 + x * c.kernel + y],
                )
            }),
            l,
        )
    })?;
    Ok(ActivationGrid::conv(ConvLayout::Plain, c.filters, side, cts))
}

/// Cross-channel convolution: each block multiplies a different channel,
/// then a fold over the r blocks sums channels and replicates the result.
pub fn conv_forward_cross_channel<B: HeBackend>(
    be: &B,
    c: &ConvPlan,
    input: &ActivationGrid<B::Ciphertext>,
    filters: &[B::Ciphertext],
    r: usize,
    schedule: Schedule,
    ledger: &mut OpLedger,
) -> Result<ActivationGrid<B::Ciphertext>> {
    expect_conv(input, ConvLayout::Grouped, c.combined_kernel)?;
    let side = c.out_side;
    let groups = c.filter_channel_groups;
    let k2 = c.kernel * c.kernel;
    let block_stride = be.slot_count() / r;
    let cts = map_with_ledger(c.filters * side * side, schedule, ledger, |o, l| {
        let (k, u, v) = (o / (side * side), o / side % side, o % side);
        let pairs = (0..groups).flat_map(|g| {
            (0..c.kernel).flat_map(move |x| (0..c.kernel).map(move |y| (g, x, y)))
        });
        let partial = dot(
            be,
            pairs.map(|(g, x, y)| {
                (
                    input.at(g, c.stride * u + x, c.stride * v + y),
                    &filters[(k * groups + g) * k2 + x * c.kernel + y],
                )
            }),
            l,
        )?;
        fold_window(be, &partial, r, block_stride, Direction::Gather, l)
    })?;
    Ok(ActivationGrid::conv(ConvLayout::Replicated, c.filters, side, cts))
}

/// Cross-filter convolution: replicated channels meet r filters at once, so
/// each output ciphertext carries a group of r output channels.
pub fn conv_forward_cross_filter<B: HeBackend>(
    be: &B,
    c: &ConvPlan,
    input: &ActivationGrid<B::Ciphertext>,
    filters: &[B::Ciphertext],
    schedule: Schedule,
    ledger: &mut OpLedger,
) -> Result<ActivationGrid<B::Ciphertext>> {
    expect_conv(input, ConvLayout::Replicated, c.combined_kernel)?;
    let side = c.out_side;
    let groups = c.filter_groups;
    let k2 = c.kernel * c.kernel;
    let cts = map_with_ledger(groups * side * side, schedule, ledger, |o, l| {
        let (k, u, v) = (o / (side * side), o / side % side, o % side);
        let pairs = (0..c.channels).flat_map(|i| {
            (0..c.kernel).flat_map(move |x| (0..c.kernel).map(move |y| (i, x, y)))
        });
        dot(
            be,
            pairs.map(|(i, x, y)| {
                (
                    input.at(i, c.stride * u + x, c.stride * v + y),
                    &filters[(k * c.channels + i) * k2 + x * c.kernel + y],
                )
            }),
            l,
        )
    })?;
    Ok(ActivationGrid::conv(ConvLayout::Grouped, groups, side, cts))
}

/// Type I dense layer: per output neuron, slotwise products over all input
/// ciphertexts, then a fold over the S/n pi-set positions. Every n-slot
/// block of output `i` ends up holding neuron `i`.
pub fn fc_forward_type1<B: HeBackend>(
    be: &B,
    f: &FcPlan,
    n: usize,
    input: &ActivationGrid<B::Ciphertext>,
    weights: &[B::Ciphertext],
    schedule: Schedule,
    ledger: &mut OpLedger,
) -> Result<ActivationGrid<B::Ciphertext>> {
    if input.layout == GridLayout::FcTypeII || input.cts.len() != f.in_cts {
        return Err(Error::Shape(format!(
            "Type I layer expects {} pi-set ciphertexts, got {} ({:?})",
            f.in_cts,
            input.cts.len(),
            input.layout
        )));
    }
    let s = be.slot_count();
    let cts = map_with_ledger(f.outputs, schedule, ledger, |i, l| {
        let acc = dot(
            be,
            (0..f.in_cts).map(|j| (&input.cts[j], &weights[i * f.in_cts + j])),
            l,
        )?;
        fold_window(be, &acc, s / n, n, Direction::Gather, l)
    })?;
    Ok(ActivationGrid::dense(GridLayout::FcTypeII, cts))
}

/// Type II dense layer: each replicated input neuron meets a ciphertext of
/// weights covering S/n outputs; no rotations.
pub fn fc_forward_type2<B: HeBackend>(
    be: &B,
    f: &FcPlan,
    input: &ActivationGrid<B::Ciphertext>,
    weights: &[B::Ciphertext],
    schedule: Schedule,
    ledger: &mut OpLedger,
) -> Result<ActivationGrid<B::Ciphertext>> {
    if input.layout != GridLayout::FcTypeII || input.cts.len() != f.inputs {
        return Err(Error::Shape(format!(
            "Type II layer expects {} replicated ciphertexts, got {} ({:?})",
            f.inputs,
            input.cts.len(),
            input.layout
        )));
    }
    let cts = map_with_ledger(f.out_cts, schedule, ledger, |j, l| {
        dot(
            be,
            (0..f.inputs).map(|i| (&input.cts[i], &weights[i * f.out_cts + j])),
            l,
        )
    })?;
    Ok(ActivationGrid::dense(GridLayout::FcTypeI, cts))
}

pub fn square_activation<B: HeBackend>(
    be: &B,
    grid: &ActivationGrid<B::Ciphertext>,
    schedule: Schedule,
    ledger: &mut OpLedger,
) -> Result<ActivationGrid<B::Ciphertext>> {
    let cts = map_with_ledger(grid.cts.len(), schedule, ledger, |i, l| {
        be.multiply(&grid.cts[i], &grid.cts[i], l)
    })?;
    Ok(ActivationGrid { layout: grid.layout, groups: grid.groups, side: grid.side, cts })
}

/// Runs every layer, keeping inputs and pre-activations.
pub fn infer_with_trace<B: HeBackend>(
    be: &B,
    plan: &PackingPlan,
    model: &EncryptedModel<B::Ciphertext>,
    input: ActivationGrid<B::Ciphertext>,
    schedule: Schedule,
    ledger: &mut OpLedger,
) -> Result<ForwardTrace<B::Ciphertext>> {
    if be.slot_count() != plan.slots {
        return Err(Error::InvalidParameter(format!(
            "backend has {} slots, plan needs {}",
            be.slot_count(),
            plan.slots
        )));
    }
    let mut inputs = Vec::new();
    let mut pre = Vec::new();
    let mut x = input;
    for (l, c) in plan.conv.iter().enumerate() {
        let label = format!("CL{}", l + 1);
        ledger.set_phase(&label);
        let filters = &model.conv[l];
        let z = match c.mode {
            PackingMode::Baseline => conv_forward(be, c, &x, filters, schedule, ledger),
            PackingMode::CrossChannel => {
                conv_forward_cross_channel(be, c, &x, filters, plan.packing_factor, schedule, ledger)
            }
            PackingMode::CrossFilter => conv_forward_cross_filter(be, c, &x, filters, schedule, ledger),
        }
        .phase(|| label.clone())?;
        let a = activate(be, &z, c.activation, schedule, ledger)?;
        inputs.push(std::mem::replace(&mut x, a));
        pre.push(z);
    }
    for (l, f) in plan.fc.iter().enumerate() {
        let label = format!("FL{}", l + 1);
        ledger.set_phase(&label);
        let weights = &model.fc[l];
        let z = match f.input_type {
            FcType::TypeI => fc_forward_type1(be, f, plan.n, &x, weights, schedule, ledger),
            FcType::TypeII => fc_forward_type2(be, f, &x, weights, schedule, ledger),
        }
        .phase(|| label.clone())?;
        let a = activate(be, &z, f.activation, schedule, ledger)?;
        inputs.push(std::mem::replace(&mut x, a));
        pre.push(z);
    }
    Ok(ForwardTrace { layer_inputs: inputs, pre_activations: pre, output: x })
}

fn activate<B: HeBackend>(
    be: &B,
    z: &ActivationGrid<B::Ciphertext>,
    on: bool,
    schedule: Schedule,
    ledger: &mut OpLedger,
) -> Result<ActivationGrid<B::Ciphertext>> {
    if !on {
        return Ok(z.clone());
    }
    ledger.set_phase("Square");
    square_activation(be, z, schedule, ledger).phase(|| "Square".into())
}

pub fn infer<B: HeBackend>(
    be: &B,
    plan: &PackingPlan,
    model: &EncryptedModel<B::Ciphertext>,
    input: ActivationGrid<B::Ciphertext>,
    schedule: Schedule,
    ledger: &mut OpLedger,
) -> Result<ActivationGrid<B::Ciphertext>> {
    Ok(infer_with_trace(be, plan, model, input, schedule, ledger)?.output)
}

/// Encrypts a plaintext model and batch, runs inference and decrypts the
/// logits (n × outputs).
pub fn infer_plain<B: HeDecrypt>(
    be: &B,
    plan: &PackingPlan,
    model: &PlainModel,
    inputs: &Tensor,
    schedule: Schedule,
    ledger: &mut OpLedger,
) -> Result<Tensor> {
    let enc_model = encrypt_model(be, model, plan, schedule, ledger)?;
    let x = encrypt_inputs(be, inputs, plan, schedule, ledger)?;
    let out = infer(be, plan, &enc_model, x, schedule, ledger)?;
    ledger.set_phase("Dec. Outputs");
    let slots = out.cts.iter().map(|c| be.decrypt(c, ledger)).collect::<Result<Vec<_>>>()?;
    unpack_outputs(&slots, plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{
        validate_model, validate_model_with, ConvLayerConfig, FcLayerConfig, ModelConfig,
        PackingChoice, PlanOptions,
    };
    use crate::he_sim::{keygen, CountingBackend, SimBackend};
    use crate::ledger::OpKind;
    use crate::oracle::{max_relative_error, plain_forward, random_inputs};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sim(plan: &PackingPlan) -> SimBackend {
        SimBackend::new(keygen(128, plan.levels, plan.slots).unwrap())
    }

    fn check_against_oracle(config: &ModelConfig, opts: PlanOptions, seed: u64) -> f64 {
        let plan = validate_model_with(config, opts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = PlainModel::random(config, &mut rng);
        let x = random_inputs(config, &mut rng);
        let want = plain_forward(&model, config, &x, opts.activation).unwrap().logits;
        let be = sim(&plan);
        let mut ledger = OpLedger::new();
        let got = infer_plain(&be, &plan, &model, &x, Schedule::Sequential, &mut ledger).unwrap();
        max_relative_error(got.data(), want.data())
    }

    #[test]
    fn cnn_1_2_op_counts() {
        let plan = validate_model(&ModelConfig::cnn_1_2()).unwrap();
        let be = CountingBackend::new(plan.levels, plan.slots).unwrap();
        let model = PlainModel::random(&ModelConfig::cnn_1_2(), &mut ChaCha8Rng::seed_from_u64(3));
        let x = random_inputs(&ModelConfig::cnn_1_2(), &mut ChaCha8Rng::seed_from_u64(4));
        let mut ledger = OpLedger::new();
        let m = encrypt_model(&be, &model, &plan, Schedule::Parallel, &mut ledger).unwrap();
        let grid = encrypt_inputs(&be, &x, &plan, Schedule::Parallel, &mut ledger).unwrap();
        let out = infer(&be, &plan, &m, grid, Schedule::Parallel, &mut ledger).unwrap();
        assert_eq!(out.cts.len(), 1);
        assert_eq!(ledger.count(OpKind::Add), 831);
        assert_eq!(ledger.count(OpKind::Mul), 584);
        assert_eq!(ledger.count(OpKind::Rot), 384);
        assert_eq!(ledger.count(OpKind::Enc), 49 + 196 + 256 + 64);
        assert_eq!(ledger.count_at(OpKind::Mul, 5), 196);
        assert_eq!(ledger.count_at(OpKind::Rot, 3), 384);
        assert_eq!(ledger.count_at(OpKind::Add, 1), 63);
    }

    #[test]
    fn worked_example_logits() {
        let config = ModelConfig::worked_example();
        let plan = validate_model_with(&config, PlanOptions { activation: false, ..Default::default() }).unwrap();
        let mut x = Tensor::zeros(vec![2, 1, 8, 8]);
        for t in 0..2 {
            for a in 0..8 {
                for b in 0..8 {
                    *x.at_mut(&[t, 0, a, b]) = ((t + 1) * (8 * a + b + 1)) as f64;
                }
            }
        }
        let model = PlainModel {
            conv: vec![
                Tensor::new(vec![2, 1, 2, 2], vec![1., 0., 0., 0., 1., 0., 0., 0.]).unwrap(),
                Tensor::new(vec![1, 2, 2, 2], vec![1., 0., 0., 0., 0., 0., 0., 1.]).unwrap(),
            ],
            fc: vec![
                Tensor::new(vec![2, 4], vec![1., 0., 0., 1., 1., -1., 1., 0.]).unwrap(),
                Tensor::new(vec![2, 2], vec![1., -1., 0., 1.]).unwrap(),
            ],
        };
        let be = sim(&plan);
        let mut ledger = OpLedger::new();
        let got = infer_plain(&be, &plan, &model, &x, Schedule::Sequential, &mut ledger).unwrap();
        assert_eq!(got.data(), &[36., 76., 72., 152.]);
        assert_eq!(ledger.count(OpKind::Rot), 4);
    }

    #[test]
    fn every_mode_matches_the_oracle() {
        let config = ModelConfig {
            input_side: 8,
            n: 2,
            slot_count: 128,
            conv: vec![
                ConvLayerConfig { channels: 3, filters: 4, kernel: 3, stride: 1 },
                ConvLayerConfig { channels: 4, filters: 4, kernel: 2, stride: 2 },
            ],
            fc: vec![FcLayerConfig { inputs: 36, outputs: 5 }, FcLayerConfig { inputs: 5, outputs: 3 }],
            final_activation: false,
        };
        for mode in [PackingMode::Baseline, PackingMode::CrossChannel, PackingMode::CrossFilter] {
            for activation in [true, false] {
                let opts = PlanOptions { packing: PackingChoice::Forced(mode), activation };
                let err = check_against_oracle(&config, opts, 11);
                assert!(err < 1e-9, "{mode:?} activation={activation}: {err}");
            }
        }
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let config = ModelConfig::worked_example();
        let plan = validate_model(&config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = PlainModel::random(&config, &mut rng);
        let x = random_inputs(&config, &mut rng);
        let be = sim(&plan);
        let mut a = OpLedger::new();
        let mut b = OpLedger::new();
        let ya = infer_plain(&be, &plan, &model, &x, Schedule::Sequential, &mut a).unwrap();
        let yb = infer_plain(&be, &plan, &model, &x, Schedule::Parallel, &mut b).unwrap();
        assert_eq!(ya, yb);
        assert_eq!(a.by_phase(), b.by_phase());
        assert_eq!(a.by_level(), b.by_level());
    }

    #[test]
    fn short_key_chain_fails_with_depth_error() {
        let config = ModelConfig::worked_example();
        let plan = validate_model(&config).unwrap();
        let be = SimBackend::new(keygen(128, plan.levels - 1, plan.slots).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = PlainModel::random(&config, &mut rng);
        let x = random_inputs(&config, &mut rng);
        let err = infer_plain(&be, &plan, &model, &x, Schedule::Sequential, &mut OpLedger::new())
            .unwrap_err();
        assert!(err.is_depth_exhausted(), "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn random_models_match_the_oracle(
            seed in any::<u64>(), side in 4usize..=8, kernel in 1usize..=3, stride in 1usize..=2,
            channels in 1usize..=3, filters in 1usize..=4, hidden in 1usize..=6,
            n_exp in 0u32..=2, mode in 0usize..3, activation in any::<bool>(),
        ) {
            let n = 1usize << n_exp;
            let grid = 1 + (side - kernel) / stride;
            let config = ModelConfig {
                input_side: side, n, slot_count: 256,
                conv: vec![ConvLayerConfig { channels, filters, kernel, stride }],
                fc: vec![
                    FcLayerConfig { inputs: filters * grid * grid, outputs: hidden },
                    FcLayerConfig { inputs: hidden, outputs: 2 },
                ],
                final_activation: activation && seed % 2 == 0,
            };
            let packing = [PackingMode::Baseline, PackingMode::CrossChannel, PackingMode::CrossFilter][mode];
            let opts = PlanOptions { packing: PackingChoice::Forced(packing), activation };
            prop_assume!(validate_model_with(&config, opts).is_ok());
            let err = check_against_oracle(&config, opts, seed);
            prop_assert!(err < 1e-9, "relative error {}", err);
        }
    }
}
