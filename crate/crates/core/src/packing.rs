//! Slot layouts: encoding of inputs, filters and dense weights, and the
//! matching decoders for outputs, weights and gradients.
//!
//! Within a block, pi-set `(a, b)` of the β̃₀×β̃₀ output grid occupies slots
//! `(a·β̃₀ + b)·n .. +n`, one slot per input. Replica or channel-group blocks
//! start every `S/r` slots. Unused slots are zero.

use crate::error::{Error, Result};
use crate::exec::{map_with_ledger, Schedule};
use crate::geometry::{FcType, PackingMode, PackingPlan};
use crate::he_sim::{HeBackend, SlotVector};
use crate::ledger::OpLedger;
use crate::oracle::PlainModel;
use crate::tensor::Tensor;

/// How channels of a conv-stage grid are laid out across blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvLayout {
    /// One channel per ciphertext, block 0 only.
    Plain,
    /// Channels `g·r .. g·r + r` side by side, one per block.
    Grouped,
    /// One channel per ciphertext, copied into all r blocks.
    Replicated,
}

impl ConvLayout {
    /// The layout a conv layer in `mode` consumes.
    pub fn consumed_by(mode: PackingMode) -> ConvLayout {
        match mode {
            PackingMode::Baseline => ConvLayout::Plain,
            PackingMode::CrossChannel => ConvLayout::Grouped,
            PackingMode::CrossFilter => ConvLayout::Replicated,
        }
    }

    /// The layout a conv layer in `mode` emits.
    pub fn emitted_by(mode: PackingMode) -> ConvLayout {
        match mode {
            PackingMode::Baseline => ConvLayout::Plain,
            PackingMode::CrossChannel => ConvLayout::Replicated,
            PackingMode::CrossFilter => ConvLayout::Grouped,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridLayout {
    Conv(ConvLayout),
    /// Distinct pi-sets per ciphertext (what a Type I layer consumes).
    FcTypeI,
    /// One pi-set block replicated S/n times (what a Type II layer consumes).
    FcTypeII,
}

/// Ciphertexts flowing between layers. Conv grids are indexed
/// `(group·side + u)·side + v`; dense grids are a flat list.
#[derive(Debug, Clone)]
pub struct ActivationGrid<C> {
    pub layout: GridLayout,
    pub groups: usize,
    pub side: usize,
    pub cts: Vec<C>,
}

impl<C> ActivationGrid<C> {
    pub fn conv(layout: ConvLayout, groups: usize, side: usize, cts: Vec<C>) -> Self {
        debug_assert_eq!(cts.len(), groups * side * side);
        Self { layout: GridLayout::Conv(layout), groups, side, cts }
    }

    pub fn dense(layout: GridLayout, cts: Vec<C>) -> Self {
        Self { layout, groups: cts.len(), side: 1, cts }
    }

    pub fn at(&self, group: usize, u: usize, v: usize) -> &C {
        &self.cts[(group * self.side + u) * self.side + v]
    }

    pub fn map<D>(self, f: impl FnMut(C) -> D) -> ActivationGrid<D> {
        ActivationGrid {
            layout: self.layout,
            groups: self.groups,
            side: self.side,
            cts: self.cts.into_iter().map(f).collect(),
        }
    }
}

/// Packed filters and weights. Conv filters are indexed
/// `((k·channel_groups + i)·γ + x)·γ + y`; dense weights `i·J + j`, i.e.
/// output-major for Type I and input-major for Type II layers.
#[derive(Debug, Clone)]
pub struct EncryptedModel<C> {
    pub conv: Vec<Vec<C>>,
    pub fc: Vec<Vec<C>>,
}

/// One meaningful slot of a conv-stage grid and the feature-map value it
/// carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSlot {
    pub ct: usize,
    pub slot: usize,
    pub input: usize,
    pub channel: usize,
    pub x: usize,
    pub y: usize,
    /// Replica block index (non-zero only for replicated copies).
    pub block: usize,
}

/// Enumerates every meaningful slot of the grid feeding conv layer `l`
/// (`l = c` is the conv stack's output).
pub fn conv_slot_map(plan: &PackingPlan, l: usize, layout: ConvLayout) -> Vec<ConvSlot> {
    let (channels, side, stride) = conv_stage(plan, l);
    let r = plan.packing_factor;
    let grid = plan.output_grid;
    let n = plan.n;
    let block_stride = plan.block_stride();
    let groups = match layout {
        ConvLayout::Grouped => channels.div_ceil(r),
        _ => channels,
    };
    let mut out = Vec::with_capacity(groups * side * side * grid * grid * n);
    for g in 0..groups {
        for u in 0..side {
            for v in 0..side {
                let ct = (g * side + u) * side + v;
                let blocks = match layout {
                    ConvLayout::Plain => 1,
                    _ => r,
                };
                for block in 0..blocks {
                    let (channel, copy) = match layout {
                        ConvLayout::Grouped => (g * r + block, 0),
                        _ => (g, block),
                    };
                    if channel >= channels {
                        continue;
                    }
                    for a in 0..grid {
                        for b in 0..grid {
                            for t in 0..n {
                                out.push(ConvSlot {
                                    ct,
                                    slot: block * block_stride + (a * grid + b) * n + t,
                                    input: t,
                                    channel,
                                    x: a * stride + u,
                                    y: b * stride + v,
                                    block: copy,
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Channels, ciphertext-grid side and combined stride at conv stage `l`.
pub fn conv_stage(plan: &PackingPlan, l: usize) -> (usize, usize, usize) {
    match plan.conv.get(l) {
        Some(c) => (c.channels, c.combined_kernel, c.combined_stride),
        None => (plan.conv.last().map_or(plan.input_channels, |c| c.filters), 1, 1),
    }
}

pub fn conv_groups(plan: &PackingPlan, l: usize, layout: ConvLayout) -> usize {
    let (channels, _, _) = conv_stage(plan, l);
    match layout {
        ConvLayout::Grouped => channels.div_ceil(plan.packing_factor),
        _ => channels,
    }
}

/// Packs per-input feature maps (n × channels × side × side) for stage `l`.
pub fn pack_conv_stage(
    maps: &Tensor,
    plan: &PackingPlan,
    l: usize,
    layout: ConvLayout,
) -> Result<Vec<SlotVector>> {
    let (channels, side, _) = conv_stage(plan, l);
    if maps.shape().len() != 4 || maps.shape()[0] != plan.n || maps.shape()[1] != channels {
        return Err(Error::Shape(format!(
            "stage {l} expects n={} × {channels} channel maps, got {:?}",
            plan.n,
            maps.shape()
        )));
    }
    let groups = conv_groups(plan, l, layout);
    let mut out = vec![SlotVector::zeros(plan.slots); groups * side * side];
    for s in conv_slot_map(plan, l, layout) {
        if s.x >= maps.shape()[2] || s.y >= maps.shape()[3] {
            return Err(Error::Shape(format!("stage {l} maps are too small for the packing grid")));
        }
        out[s.ct][s.slot] = maps.at(&[s.input, s.channel, s.x, s.y]);
    }
    Ok(out)
}

/// Layer-0 input packing for the layout the plan's first layer consumes.
pub fn pack_inputs(inputs: &Tensor, plan: &PackingPlan) -> Result<Vec<SlotVector>> {
    let side = plan.input_side;
    inputs.expect_shape("inputs", &[plan.n, plan.input_channels, side, side])?;
    let layout = ConvLayout::consumed_by(plan.input_mode());
    if plan.conv.is_empty() {
        // A dense-only model reads the raw pixels as Type I pi-sets.
        return pack_dense_input(inputs, plan);
    }
    pack_conv_stage(inputs, plan, 0, layout)
}

/// Cross-channel layer-0 packing regardless of the plan's chosen mode.
pub fn pack_inputs_cross_channel(inputs: &Tensor, plan: &PackingPlan) -> Result<Vec<SlotVector>> {
    pack_conv_stage(inputs, plan, 0, ConvLayout::Grouped)
}

fn pack_dense_input(inputs: &Tensor, plan: &PackingPlan) -> Result<Vec<SlotVector>> {
    let fc = &plan.fc[0];
    let width = fc.inputs;
    let flat = Tensor::new(vec![plan.n, width], inputs.data().to_vec())?;
    pack_type1_values(&flat, plan, 0)
}

/// Packs an n × width matrix of values as the Type I input of dense layer
/// `l`.
pub fn pack_type1_values(values: &Tensor, plan: &PackingPlan, l: usize) -> Result<Vec<SlotVector>> {
    let fc = &plan.fc[l];
    values.expect_shape("dense input", &[plan.n, fc.inputs])?;
    let n = plan.n;
    let mut out = vec![SlotVector::zeros(plan.slots); fc.in_cts];
    for (j, ct) in out.iter_mut().enumerate() {
        for q in 0..fc.pisets_per_ct {
            let w = j * fc.pisets_per_ct + q;
            let base = fc.piset_position(q) * n;
            for t in 0..n {
                ct[base + t] = values.at(&[t, w]);
            }
        }
    }
    Ok(out)
}

/// Reads an n × width matrix back out of Type I-form ciphertexts.
pub fn unpack_type1_values(slots: &[SlotVector], plan: &PackingPlan, l: usize) -> Tensor {
    let fc = &plan.fc[l];
    let n = plan.n;
    let mut out = Tensor::zeros(vec![n, fc.inputs]);
    for (j, ct) in slots.iter().enumerate() {
        for q in 0..fc.pisets_per_ct {
            let w = j * fc.pisets_per_ct + q;
            let base = fc.piset_position(q) * n;
            for t in 0..n {
                *out.at_mut(&[t, w]) = ct[base + t];
            }
        }
    }
    out
}

/// Packs values as replicated Type II inputs: one ciphertext per neuron,
/// each n-slot block holding that neuron's value for every input.
pub fn pack_replicated_values(values: &Tensor, plan: &PackingPlan) -> Vec<SlotVector> {
    let n = plan.n;
    let width = values.shape()[1];
    (0..width)
        .map(|w| {
            SlotVector::from_vec(
                (0..plan.slots).map(|s| values.at(&[s % n, w])).collect(),
            )
        })
        .collect()
}

/// Packs values in Type II output form: neuron `w` at ciphertext
/// `w / (S/n)`, block `w mod (S/n)`.
pub fn pack_type2_output_values(values: &Tensor, plan: &PackingPlan) -> Vec<SlotVector> {
    let n = plan.n;
    let per = plan.slots / n;
    let width = values.shape()[1];
    let mut out = vec![SlotVector::zeros(plan.slots); width.div_ceil(per)];
    for w in 0..width {
        for t in 0..n {
            out[w / per][(w % per) * n + t] = values.at(&[t, w]);
        }
    }
    out
}

pub fn pack_filters(filters: &Tensor, plan: &PackingPlan, l: usize) -> Result<Vec<SlotVector>> {
    let c = plan
        .conv
        .get(l)
        .ok_or_else(|| Error::InvalidParameter(format!("no conv layer {l}")))?;
    filters.expect_shape(
        &format!("conv{l} filters"),
        &[c.filters, c.channels, c.kernel, c.kernel],
    )?;
    let r = plan.packing_factor;
    let used = plan.block_len();
    let stride = plan.block_stride();
    let mut out = Vec::with_capacity(c.filter_ciphertexts());
    for k in 0..c.filter_groups {
        for i in 0..c.filter_channel_groups {
            for x in 0..c.kernel {
                for y in 0..c.kernel {
                    let mut v = SlotVector::zeros(plan.slots);
                    let blocks = if c.mode == PackingMode::Baseline { 1 } else { r };
                    for block in 0..blocks {
                        let (kk, ii) = match c.mode {
                            PackingMode::Baseline => (k, i),
                            PackingMode::CrossChannel => (k, i * r + block),
                            PackingMode::CrossFilter => (k * r + block, i),
                        };
                        if kk >= c.filters || ii >= c.channels {
                            continue;
                        }
                        let value = filters.at(&[kk, ii, x, y]);
                        let start = block * stride;
                        v.as_mut_slice()[start..start + used].fill(value);
                    }
                    out.push(v);
                }
            }
        }
    }
    Ok(out)
}

pub fn pack_fc_weights_type1(m: &Tensor, plan: &PackingPlan, l: usize) -> Result<Vec<SlotVector>> {
    let fc = fc_plan(plan, l, FcType::TypeI)?;
    m.expect_shape(&format!("fc{l} weights"), &[fc.outputs, fc.inputs])?;
    let n = plan.n;
    let mut out = Vec::with_capacity(fc.outputs * fc.in_cts);
    for i in 0..fc.outputs {
        for j in 0..fc.in_cts {
            let mut v = SlotVector::zeros(plan.slots);
            for q in 0..fc.pisets_per_ct {
                let base = fc.piset_position(q) * n;
                v.as_mut_slice()[base..base + n].fill(m.at(&[i, j * fc.pisets_per_ct + q]));
            }
            out.push(v);
        }
    }
    Ok(out)
}

pub fn pack_fc_weights_type2(m: &Tensor, plan: &PackingPlan, l: usize) -> Result<Vec<SlotVector>> {
    let fc = fc_plan(plan, l, FcType::TypeII)?;
    m.expect_shape(&format!("fc{l} weights"), &[fc.outputs, fc.inputs])?;
    let n = plan.n;
    let per = plan.slots / n;
    let mut out = Vec::with_capacity(fc.inputs * fc.out_cts);
    for i in 0..fc.inputs {
        for j in 0..fc.out_cts {
            let mut v = SlotVector::zeros(plan.slots);
            for w in j * per..((j + 1) * per).min(fc.outputs) {
                let base = (w - j * per) * n;
                v.as_mut_slice()[base..base + n].fill(m.at(&[w, i]));
            }
            out.push(v);
        }
    }
    Ok(out)
}

fn fc_plan(plan: &PackingPlan, l: usize, ty: FcType) -> Result<&crate::geometry::FcPlan> {
    let fc = plan
        .fc
        .get(l)
        .ok_or_else(|| Error::InvalidParameter(format!("no dense layer {l}")))?;
    if fc.input_type != ty {
        return Err(Error::InvalidParameter(format!("FL{} is not a {ty:?} layer", l + 1)));
    }
    Ok(fc)
}

pub fn pack_fc_weights(m: &Tensor, plan: &PackingPlan, l: usize) -> Result<Vec<SlotVector>> {
    match plan.fc[l].input_type {
        FcType::TypeI => pack_fc_weights_type1(m, plan, l),
        FcType::TypeII => pack_fc_weights_type2(m, plan, l),
    }
}

/// Logits (n × outputs) from the decrypted final ciphertexts.
pub fn unpack_outputs(slots: &[SlotVector], plan: &PackingPlan) -> Result<Tensor> {
    let fc = plan.fc.last().expect("validated plan has a dense layer");
    let n = plan.n;
    let per = plan.slots / n;
    let expected = fc.out_cts;
    if slots.len() != expected {
        return Err(Error::Shape(format!("expected {expected} output ciphertexts, got {}", slots.len())));
    }
    let mut out = Tensor::zeros(vec![n, fc.outputs]);
    for j in 0..fc.outputs {
        for t in 0..n {
            *out.at_mut(&[t, j]) = match fc.input_type {
                FcType::TypeI => slots[j][t],
                FcType::TypeII => slots[j / per][(j % per) * n + t],
            };
        }
    }
    Ok(out)
}

/// Plaintext weights back out of decrypted weight ciphertexts (the first
/// slot of every replicated run).
pub fn unpack_model(
    conv: &[Vec<SlotVector>],
    fc: &[Vec<SlotVector>],
    plan: &PackingPlan,
) -> Result<PlainModel> {
    let mut model = PlainModel {
        conv: plan
            .conv
            .iter()
            .map(|c| Tensor::zeros(vec![c.filters, c.channels, c.kernel, c.kernel]))
            .collect(),
        fc: plan.fc.iter().map(|f| Tensor::zeros(vec![f.outputs, f.inputs])).collect(),
    };
    for (l, c) in plan.conv.iter().enumerate() {
        if c.mode != PackingMode::Baseline {
            return Err(Error::InvalidParameter("weight decoding supports baseline layers".into()));
        }
        for k in 0..c.filters {
            for i in 0..c.channels {
                for x in 0..c.kernel {
                    for y in 0..c.kernel {
                        let idx = ((k * c.channels + i) * c.kernel + x) * c.kernel + y;
                        *model.conv[l].at_mut(&[k, i, x, y]) = conv[l][idx][0];
                    }
                }
            }
        }
    }
    let n = plan.n;
    let per = plan.slots / n;
    for (l, f) in plan.fc.iter().enumerate() {
        for o in 0..f.outputs {
            for w in 0..f.inputs {
                let v = match f.input_type {
                    FcType::TypeI => {
                        let (j, q) = (w / f.pisets_per_ct, w % f.pisets_per_ct);
                        fc[l][o * f.in_cts + j][f.piset_position(q) * n]
                    }
                    FcType::TypeII => fc[l][w * f.out_cts + o / per][(o % per) * n],
                };
                *model.fc[l].at_mut(&[o, w]) = v;
            }
        }
    }
    Ok(model)
}

/// Weight gradients from decrypted Step-1 products: every n-slot set (dense)
/// or whole used block (conv) sums to one weight's gradient.
pub fn decode_weight_gradients(
    conv: &[Vec<SlotVector>],
    fc: &[Vec<SlotVector>],
    plan: &PackingPlan,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let conv_sums: Vec<Vec<SlotVector>> = conv
        .iter()
        .map(|cts| {
            cts.iter()
                .map(|ct| {
                    let total: f64 = ct.as_slice().iter().sum();
                    SlotVector::filled(1, total)
                })
                .collect()
        })
        .collect();
    let n = plan.n;
    let fc_sums: Vec<Vec<SlotVector>> = fc
        .iter()
        .map(|cts| {
            cts.iter()
                .map(|ct| {
                    let mut v = SlotVector::zeros(plan.slots);
                    for (set, chunk) in ct.as_slice().chunks(n).enumerate() {
                        v[set * n] = chunk.iter().sum();
                    }
                    v
                })
                .collect()
        })
        .collect();
    let conv_shaped: Vec<Vec<SlotVector>> = conv_sums;
    let m = unpack_model_sums(&conv_shaped, &fc_sums, plan)?;
    Ok((m.conv, m.fc))
}

fn unpack_model_sums(
    conv: &[Vec<SlotVector>],
    fc: &[Vec<SlotVector>],
    plan: &PackingPlan,
) -> Result<PlainModel> {
    unpack_model(conv, fc, plan)
}

/// Scatter-adds a decrypted conv-stage gradient grid onto feature-map
/// coordinates (n × channels × side × side). Overlapping windows hold
/// separate copies of the same activation, so their gradients add up.
pub fn decode_conv_gradient(
    slots: &[SlotVector],
    plan: &PackingPlan,
    l: usize,
    map_side: usize,
) -> Tensor {
    let (channels, _, _) = conv_stage(plan, l);
    let mut out = Tensor::zeros(vec![plan.n, channels, map_side, map_side]);
    for s in conv_slot_map(plan, l, ConvLayout::Plain) {
        *out.at_mut(&[s.input, s.channel, s.x, s.y]) += slots[s.ct][s.slot];
    }
    out
}

/// Encrypts every slot vector, one task per ciphertext.
pub fn encrypt_all<B: HeBackend>(
    be: &B,
    pts: &[SlotVector],
    schedule: Schedule,
    ledger: &mut OpLedger,
) -> Result<Vec<B::Ciphertext>> {
    map_with_ledger(pts.len(), schedule, ledger, |i, l| be.encrypt(&pts[i], l))
}

/// Packs and encrypts the batch for the plan's first layer (phase
/// "Enc. Inputs").
pub fn encrypt_inputs<B: HeBackend>(
    be: &B,
    inputs: &Tensor,
    plan: &PackingPlan,
    schedule: Schedule,
    ledger: &mut OpLedger,
) -> Result<ActivationGrid<B::Ciphertext>> {
    let pts = pack_inputs(inputs, plan)?;
    ledger.set_phase("Enc. Inputs");
    let cts = encrypt_all(be, &pts, schedule, ledger)?;
    Ok(input_grid(plan, cts))
}

/// Wraps layer-0 ciphertexts in the grid shape the plan expects.
pub fn input_grid<C>(plan: &PackingPlan, cts: Vec<C>) -> ActivationGrid<C> {
    if plan.conv.is_empty() {
        return ActivationGrid::dense(GridLayout::FcTypeI, cts);
    }
    let layout = ConvLayout::consumed_by(plan.input_mode());
    let groups = conv_groups(plan, 0, layout);
    ActivationGrid::conv(layout, groups, plan.input_grid_side(), cts)
}

/// Packs and encrypts all filters and weights (phases "Enc. Filter",
/// "Enc. Weight1", "Enc. Weight2", ...).
pub fn encrypt_model<B: HeBackend>(
    be: &B,
    model: &PlainModel,
    plan: &PackingPlan,
    schedule: Schedule,
    ledger: &mut OpLedger,
) -> Result<EncryptedModel<B::Ciphertext>> {
    if model.conv.len() != plan.conv.len() || model.fc.len() != plan.fc.len() {
        return Err(Error::Shape("model and plan disagree on the layer count".into()));
    }
    let mut conv = Vec::new();
    if !plan.conv.is_empty() {
        ledger.set_phase("Enc. Filter");
    }
    for (l, f) in model.conv.iter().enumerate() {
        let pts = pack_filters(f, plan, l)?;
        conv.push(encrypt_all(be, &pts, schedule, ledger)?);
    }
    let mut fc = Vec::new();
    for (l, m) in model.fc.iter().enumerate() {
        ledger.set_phase(format!("Enc. Weight{}", l + 1));
        let pts = pack_fc_weights(m, plan, l)?;
        fc.push(encrypt_all(be, &pts, schedule, ledger)?);
    }
    Ok(EncryptedModel { conv, fc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{
        validate_model, validate_model_with, ConvLayerConfig, FcLayerConfig, ModelConfig,
        PackingChoice, PlanOptions,
    };
    use crate::oracle::random_inputs;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn worked_plan() -> PackingPlan {
        let opts = PlanOptions { activation: false, ..Default::default() };
        validate_model_with(&ModelConfig::worked_example(), opts).unwrap()
    }

    fn worked_inputs() -> Tensor {
        let mut t = Tensor::zeros(vec![2, 1, 8, 8]);
        for i in 0..2 {
            for x in 0..8 {
                for y in 0..8 {
                    *t.at_mut(&[i, 0, x, y]) = ((i + 1) * (8 * x + y + 1)) as f64;
                }
            }
        }
        t
    }

    #[test]
    fn worked_example_inputs() {
        let plan = worked_plan();
        let pts = pack_inputs(&worked_inputs(), &plan).unwrap();
        assert_eq!(pts.len(), 16);
        // ciphertext (0,0,0) holds pixels (0,0),(0,4),(4,0),(4,4) of both inputs
        assert_eq!(pts[0].as_slice(), &[1., 2., 5., 10., 33., 66., 37., 74.]);
        assert_eq!(pts[5].as_slice(), &[10., 20., 14., 28., 42., 84., 46., 92.]);
    }

    #[test]
    fn worked_example_weights() {
        let plan = worked_plan();
        let m = Tensor::new(vec![2, 4], vec![1., 0., 0., 1., 1., -1., 1., 0.]).unwrap();
        let w = pack_fc_weights_type1(&m, &plan, 0).unwrap();
        assert_eq!(w[0].as_slice(), &[1., 1., 0., 0., 0., 0., 1., 1.]);
        let f = Tensor::new(vec![2, 1, 2, 2], vec![1., 0., 0., 0., 1., 0., 0., 0.]).unwrap();
        let fp = pack_filters(&f, &plan, 0).unwrap();
        assert_eq!(fp.len(), 8);
        assert_eq!(fp[0].as_slice(), &[1.0; 8]);
        let m2 = Tensor::new(vec![2, 2], vec![1., -1., 0., 1.]).unwrap();
        let w2 = pack_fc_weights_type2(&m2, &plan, 1).unwrap();
        assert_eq!(w2.len(), 2);
        assert_eq!(w2[0].as_slice(), &[1., 1., 0., 0., 0., 0., 0., 0.]);
        assert_eq!(w2[1].as_slice(), &[-1., -1., 1., 1., 0., 0., 0., 0.]);
    }

    #[test]
    fn cnn_1_2_counts() {
        let config = ModelConfig::cnn_1_2();
        let plan = validate_model(&config).unwrap();
        let x = random_inputs(&config, &mut ChaCha8Rng::seed_from_u64(0));
        let pts = pack_inputs(&x, &plan).unwrap();
        assert_eq!(pts.len(), 49);
        assert!(pts.iter().all(|p| p.len() == 4096));
        let model = crate::oracle::PlainModel::random(&config, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(pack_filters(&model.conv[0], &plan, 0).unwrap().len(), 196);
        assert_eq!(pack_fc_weights(&model.fc[0], &plan, 0).unwrap().len(), 256);
        assert_eq!(pack_fc_weights(&model.fc[1], &plan, 1).unwrap().len(), 64);
    }

    #[test]
    fn single_window_single_input() {
        let config = ModelConfig {
            input_side: 3,
            n: 1,
            slot_count: 4,
            conv: vec![ConvLayerConfig { channels: 1, filters: 1, kernel: 3, stride: 1 }],
            fc: vec![FcLayerConfig { inputs: 1, outputs: 1 }],
            final_activation: false,
        };
        let plan = validate_model_with(
            &config,
            PlanOptions { packing: PackingChoice::Forced(PackingMode::Baseline), activation: true },
        )
        .unwrap();
        let x = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(|v| v as f64).collect()).unwrap();
        let pts = pack_inputs(&x, &plan).unwrap();
        assert_eq!(pts.len(), 9);
        for (k, p) in pts.iter().enumerate() {
            assert_eq!(p.as_slice(), &[(k + 1) as f64, 0., 0., 0.]);
        }
    }

    fn cross_config(channels: usize) -> ModelConfig {
        ModelConfig {
            input_side: 5,
            n: 2,
            slot_count: 64,
            conv: vec![ConvLayerConfig { channels, filters: 2, kernel: 2, stride: 2 }],
            fc: vec![FcLayerConfig { inputs: 8, outputs: 2 }],
            final_activation: false,
        }
    }

    #[test]
    fn cross_channel_blocks_match_per_channel_packing() {
        for channels in [1, 3, 4] {
            let config = cross_config(channels);
            let plan = validate_model(&config).unwrap();
            let r = plan.packing_factor;
            assert_eq!(r, 8);
            let x = random_inputs(&config, &mut ChaCha8Rng::seed_from_u64(channels as u64));
            let grouped = pack_inputs_cross_channel(&x, &plan).unwrap();
            let plain = pack_conv_stage(&x, &plan, 0, ConvLayout::Plain).unwrap();
            let side = plan.input_grid_side();
            assert_eq!(grouped.len(), channels.div_ceil(r) * side * side);
            let stride = plan.block_stride();
            for uv in 0..side * side {
                for b in 0..r {
                    let block = &grouped[uv].as_slice()[b * stride..(b + 1) * stride];
                    if b < channels {
                        assert_eq!(block, &plain[b * side * side + uv].as_slice()[..stride]);
                    } else {
                        assert!(block.iter().all(|&v| v == 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn outputs_round_trip() {
        let plan = worked_plan();
        let logits = Tensor::new(vec![2, 2], vec![36., 76., 72., 152.]).unwrap();
        let packed = pack_type2_output_values(&logits, &plan);
        assert_eq!(packed[0].as_slice(), &[36., 72., 76., 152., 0., 0., 0., 0.]);
        assert_eq!(unpack_outputs(&packed, &plan).unwrap(), logits);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn layer0_packing_holds_the_windows(
            seed in any::<u64>(), side in 3usize..=9, kernel in 1usize..=3, stride in 1usize..=3,
            n_exp in 0u32..=2, channels in 1usize..=3, mode in 0usize..3,
        ) {
            prop_assume!(kernel <= side);
            let n = 1 << n_exp;
            let grid = 1 + (side - kernel) / stride;
            let config = ModelConfig {
                input_side: side, n, slot_count: 256,
                conv: vec![ConvLayerConfig { channels, filters: 2, kernel, stride }],
                fc: vec![FcLayerConfig { inputs: 2 * grid * grid, outputs: 1 }],
                final_activation: false,
            };
            let packing = [PackingMode::Baseline, PackingMode::CrossChannel, PackingMode::CrossFilter][mode];
            let opts = PlanOptions { packing: PackingChoice::Forced(packing), activation: true };
            let Ok(plan) = validate_model_with(&config, opts) else { return Ok(()) };
            let x = random_inputs(&config, &mut ChaCha8Rng::seed_from_u64(seed));
            let pts = pack_inputs(&x, &plan).unwrap();
            prop_assert_eq!(pts.len(), plan.input_ciphertexts());
            let layout = ConvLayout::consumed_by(plan.input_mode());
            let map = conv_slot_map(&plan, 0, layout);
            let mut touched = vec![vec![false; plan.slots]; pts.len()];
            for s in &map {
                prop_assert_eq!(pts[s.ct][s.slot], x.at(&[s.input, s.channel, s.x, s.y]));
                touched[s.ct][s.slot] = true;
            }
            for (ct, p) in pts.iter().enumerate() {
                for slot in 0..plan.slots {
                    if !touched[ct][slot] {
                        prop_assert_eq!(p[slot], 0.0);
                    }
                }
            }
            let model = crate::oracle::PlainModel::random(&config, &mut ChaCha8Rng::seed_from_u64(seed ^ 1));
            prop_assert_eq!(pack_filters(&model.conv[0], &plan, 0).unwrap().len(), plan.filter_ciphertexts()[0]);
            prop_assert_eq!(pack_fc_weights(&model.fc[0], &plan, 0).unwrap().len(), plan.weight_ciphertexts()[0]);
        }
    }
}
