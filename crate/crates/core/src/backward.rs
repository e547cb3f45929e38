//! Encrypted backpropagation and TEE-assisted weight updates.
//!
//! Training covers baseline packing only. Every layer's input and
//! pre-activation from the forward pass are reused here. Gradients of
//! replicated activations are kept with the full neuron gradient in every
//! block.

use std::borrow::Cow;

use crate::error::{Error, PhaseExt, Result};
use crate::exec::{map_with_ledger, Schedule};
use crate::forward::{infer_with_trace, ForwardTrace};
use crate::geometry::{ConvPlan, FcPlan, FcType, PackingMode, PackingPlan};
use crate::he_sim::{HeBackend, SlotVector};
use crate::ledger::OpLedger;
use crate::packing::{ActivationGrid, ConvLayout, EncryptedModel, GridLayout};
use crate::rotate::{fold_window, Direction};
use crate::tensor::Tensor;

/// What to do when an operand has no level left.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RefreshPolicy {
    /// Fail with a depth error.
    Forbid,
    /// Ask the TEE to refresh the operand, counted separately from the
    /// weight-update refreshes.
    #[default]
    OnExhaustion,
}

/// The key holder's services as seen from the untrusted side.
pub trait TeeService<C>: Sync {
    /// Decrypt and re-encrypt at the top level (weight-update step 5).
    fn refresh(&self, ct: &C, ledger: &mut OpLedger) -> Result<C>;

    /// Same as `refresh`, for an operand that ran out of levels.
    fn depth_refresh(&self, ct: &C, ledger: &mut OpLedger) -> Result<C>;

    /// Decrypts the logits and returns the encrypted gradient of the mean
    /// squared error, laid out like the final layer's output.
    fn final_gradient(
        &self,
        logits: &ActivationGrid<C>,
        labels: &Tensor,
        plan: &PackingPlan,
        ledger: &mut OpLedger,
    ) -> Result<ActivationGrid<C>>;
}

pub type GradientGrid<C> = ActivationGrid<C>;

/// Evaluation context shared by the backward building blocks.
pub struct Ctx<'a, B: HeBackend, T> {
    pub be: &'a B,
    pub tee: &'a T,
    pub policy: RefreshPolicy,
    pub schedule: Schedule,
}

impl<'a, B: HeBackend, T: TeeService<B::Ciphertext>> Ctx<'a, B, T> {
    pub fn new(be: &'a B, tee: &'a T, policy: RefreshPolicy, schedule: Schedule) -> Self {
        Self { be, tee, policy, schedule }
    }

    fn ready<'c>(&self, ct: &'c B::Ciphertext, ledger: &mut OpLedger) -> Result<Cow<'c, B::Ciphertext>> {
        if self.policy == RefreshPolicy::OnExhaustion && self.be.level(ct) == 0 {
            return Ok(Cow::Owned(self.tee.depth_refresh(ct, ledger)?));
        }
        Ok(Cow::Borrowed(ct))
    }

    pub fn mul(&self, a: &B::Ciphertext, b: &B::Ciphertext, ledger: &mut OpLedger) -> Result<B::Ciphertext> {
        let a = self.ready(a, ledger)?;
        let b = self.ready(b, ledger)?;
        self.be.multiply(&a, &b, ledger)
    }

    pub fn cmult(&self, a: &B::Ciphertext, pt: &SlotVector, ledger: &mut OpLedger) -> Result<B::Ciphertext> {
        let a = self.ready(a, ledger)?;
        self.be.cmult(&a, pt, ledger)
    }

    /// Σ a ⊗ b with the first product seeding the sum.
    pub fn dot<'c, I>(&self, pairs: I, ledger: &mut OpLedger) -> Result<B::Ciphertext>
    where
        B::Ciphertext: 'c,
        I: IntoIterator<Item = (&'c B::Ciphertext, &'c B::Ciphertext)>,
    {
        let mut acc: Option<B::Ciphertext> = None;
        for (a, b) in pairs {
            let p = self.mul(a, b, ledger)?;
            acc = Some(match acc {
                None => p,
                Some(s) => self.be.add(&s, &p, ledger)?,
            });
        }
        acc.ok_or_else(|| Error::InvalidParameter("empty product sum".into()))
    }
}

fn like<C, D>(template: &ActivationGrid<C>, cts: Vec<D>) -> ActivationGrid<D> {
    ActivationGrid { layout: template.layout, groups: template.groups, side: template.side, cts }
}

/// ∇Z = 2·Z·∇A, computed as (Z ⊗ ∇A) ⊕ (Z ⊗ ∇A).
pub fn square_backward<B: HeBackend, T: TeeService<B::Ciphertext>>(
    ctx: &Ctx<B, T>,
    pre: &ActivationGrid<B::Ciphertext>,
    grad: &GradientGrid<B::Ciphertext>,
    ledger: &mut OpLedger,
) -> Result<GradientGrid<B::Ciphertext>> {
    if pre.cts.len() != grad.cts.len() {
        return Err(Error::Shape("activation and gradient grids differ".into()));
    }
    let cts = map_with_ledger(pre.cts.len(), ctx.schedule, ledger, |i, l| {
        let p = ctx.mul(&pre.cts[i], &grad.cts[i], l)?;
        ctx.be.add(&p, &p, l)
    })?;
    Ok(like(grad, cts))
}

/// Type I layer: ∇X_j = Σ_i ∇Z_i ⊗ M̂_{i,j}, landing in the input's pi-set
/// layout.
pub fn fc_backward_type1<B: HeBackend, T: TeeService<B::Ciphertext>>(
    ctx: &Ctx<B, T>,
    f: &FcPlan,
    input: &ActivationGrid<B::Ciphertext>,
    grad: &GradientGrid<B::Ciphertext>,
    weights: &[B::Ciphertext],
    ledger: &mut OpLedger,
) -> Result<GradientGrid<B::Ciphertext>> {
    if grad.cts.len() != f.outputs {
        return Err(Error::Shape(format!("expected {} output gradients, got {}", f.outputs, grad.cts.len())));
    }
    let cts = map_with_ledger(f.in_cts, ctx.schedule, ledger, |j, l| {
        ctx.dot((0..f.outputs).map(|i| (&grad.cts[i], &weights[i * f.in_cts + j])), l)
    })?;
    Ok(like(input, cts))
}

/// Type II layer: per input neuron, products against every output block,
/// then a fold over the blocks so each block holds the full gradient.
pub fn fc_backward_type2<B: HeBackend, T: TeeService<B::Ciphertext>>(
    ctx: &Ctx<B, T>,
    f: &FcPlan,
    n: usize,
    grad: &GradientGrid<B::Ciphertext>,
    weights: &[B::Ciphertext],
    ledger: &mut OpLedger,
) -> Result<GradientGrid<B::Ciphertext>> {
    if grad.cts.len() != f.out_cts {
        return Err(Error::Shape(format!("expected {} output gradients, got {}", f.out_cts, grad.cts.len())));
    }
    let s = ctx.be.slot_count();
    let cts = map_with_ledger(f.inputs, ctx.schedule, ledger, |i, l| {
        let acc = ctx.dot((0..f.out_cts).map(|j| (&grad.cts[j], &weights[i * f.out_cts + j])), l)?;
        fold_window(ctx.be, &acc, s / n, n, Direction::Gather, l)
    })?;
    Ok(ActivationGrid::dense(GridLayout::FcTypeII, cts))
}

/// Step 1 for a dense layer: one product per weight ciphertext, in the
/// weight ciphertexts' order.
pub fn fc_weight_gradient<B: HeBackend, T: TeeService<B::Ciphertext>>(
    ctx: &Ctx<B, T>,
    f: &FcPlan,
    input: &ActivationGrid<B::Ciphertext>,
    grad: &GradientGrid<B::Ciphertext>,
    ledger: &mut OpLedger,
) -> Result<Vec<B::Ciphertext>> {
    match f.input_type {
        FcType::TypeI => map_with_ledger(f.outputs * f.in_cts, ctx.schedule, ledger, |idx, l| {
            let (i, j) = (idx / f.in_cts, idx % f.in_cts);
            ctx.mul(&grad.cts[i], &input.cts[j], l)
        }),
        FcType::TypeII => map_with_ledger(f.inputs * f.out_cts, ctx.schedule, ledger, |idx, l| {
            let (i, j) = (idx / f.out_cts, idx % f.out_cts);
            ctx.mul(&grad.cts[j], &input.cts[i], l)
        }),
    }
}

/// Input gradient of a baseline conv layer, one ciphertext per input copy
/// `(i, u, v)`: Σ ∇Z(k, u′, v′) ⊗ F(k, i, u − δu′, v − δv′) over the windows
/// covering that copy.
pub fn conv_backward<B: HeBackend, T: TeeService<B::Ciphertext>>(
    ctx: &Ctx<B, T>,
    c: &ConvPlan,
    grad: &GradientGrid<B::Ciphertext>,
    filters: &[B::Ciphertext],
    ledger: &mut OpLedger,
) -> Result<GradientGrid<B::Ciphertext>> {
    if c.mode != PackingMode::Baseline {
        return Err(Error::InvalidParameter("conv backward supports baseline packing".into()));
    }
    let side = c.combined_kernel;
    let out = c.out_side;
    let k = c.kernel;
    let cts = map_with_ledger(c.channels * side * side, ctx.schedule, ledger, |o, l| {
        let (i, u, v) = (o / (side * side), o / side % side, o % side);
        let span = |p: usize| (0..out).filter(move |&q| p >= c.stride * q && p - c.stride * q < k);
        let mut pairs = Vec::new();
        for f in 0..c.filters {
            for u2 in span(u) {
                for v2 in span(v) {
                    let (x, y) = (u - c.stride * u2, v - c.stride * v2);
                    pairs.push((grad.at(f, u2, v2), &filters[((f * c.channels + i) * k + x) * k + y]));
                }
            }
        }
        ctx.dot(pairs, l)
    })?;
    Ok(ActivationGrid::conv(ConvLayout::Plain, c.channels, side, cts))
}

/// Step 1 for a conv layer: ∇F̂(k,i,x,y) = Σ_{u′,v′} ∇Z(k,u′,v′) ⊗ X(i, δu′+x, δv′+y).
pub fn conv_weight_gradient<B: HeBackend, T: TeeService<B::Ciphertext>>(
    ctx: &Ctx<B, T>,
    c: &ConvPlan,
    input: &ActivationGrid<B::Ciphertext>,
    grad: &GradientGrid<B::Ciphertext>,
    ledger: &mut OpLedger,
) -> Result<Vec<B::Ciphertext>> {
    let out = c.out_side;
    let k = c.kernel;
    map_with_ledger(c.filters * c.channels * k * k, ctx.schedule, ledger, |idx, l| {
        let (f, i, x, y) = (idx / (c.channels * k * k), idx / (k * k) % c.channels, idx / k % k, idx % k);
        let windows = (0..out).flat_map(|u| (0..out).map(move |v| (u, v)));
        ctx.dot(
            windows.map(|(u, v)| (grad.at(f, u, v), input.at(i, c.stride * u + x, c.stride * v + y))),
            l,
        )
    })
}

/// Geometry of one weight update: gradients sum over sets of `set_len`
/// consecutive slots, `sets` of them starting at slot 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpdateShape {
    pub set_len: usize,
    pub sets: usize,
}

impl UpdateShape {
    pub fn dense(plan: &PackingPlan) -> Self {
        Self { set_len: plan.n, sets: plan.slots / plan.n }
    }

    pub fn conv(plan: &PackingPlan) -> Self {
        Self { set_len: plan.block_len(), sets: 1 }
    }

    /// In-set position a weight ciphertext's gradient is parked at.
    pub fn position(&self, idx: usize) -> usize {
        idx % self.set_len
    }

    fn mask(&self, slots: usize, p: usize, value: f64) -> SlotVector {
        let mut m = SlotVector::zeros(slots);
        for set in 0..self.sets {
            m[set * self.set_len + p] = value;
        }
        m
    }
}

/// Checks the dense-layer precondition that every weight ciphertext index
/// fits inside one pi-set.
pub fn check_step_two(f: &FcPlan, n: usize) -> Result<()> {
    let (rows, cols) = match f.input_type {
        FcType::TypeI => (f.outputs, f.in_cts),
        FcType::TypeII => (f.inputs, f.out_cts),
    };
    let index = rows * cols - 1;
    if index >= n {
        return Err(Error::StepTwoIndex { i: rows - 1, j: cols - 1, index, n });
    }
    Ok(())
}

/// Step 2: sums each set onto in-set position `p` and scales by `−η`; every
/// other slot ends up zero.
pub fn fold_to_position<B: HeBackend, T: TeeService<B::Ciphertext>>(
    ctx: &Ctx<B, T>,
    grad: &B::Ciphertext,
    p: usize,
    shape: UpdateShape,
    eta: f64,
    ledger: &mut OpLedger,
) -> Result<B::Ciphertext> {
    let shifted = if p == 0 { grad.clone() } else { ctx.be.rotate_right(grad, p, ledger)? };
    let folded = fold_window(ctx.be, &shifted, shape.set_len, 1, Direction::Gather, ledger)?;
    ctx.cmult(&folded, &shape.mask(ctx.be.slot_count(), p, -eta), ledger)
}

/// Steps 6 and 7: isolates position `p` of every set and spreads it back
/// over the whole set.
pub fn split_and_spread<B: HeBackend, T: TeeService<B::Ciphertext>>(
    ctx: &Ctx<B, T>,
    merged: &B::Ciphertext,
    p: usize,
    shape: UpdateShape,
    ledger: &mut OpLedger,
) -> Result<B::Ciphertext> {
    let picked = ctx.cmult(merged, &shape.mask(ctx.be.slot_count(), p, 1.0), ledger)?;
    let moved = if p == 0 { picked } else { ctx.be.rotate(&picked, p, ledger)? };
    fold_window(ctx.be, &moved, shape.set_len, 1, Direction::Spread, ledger)
}

/// Steps 2 to 8 over one layer's weight ciphertexts. Returns the updated
/// weights and the number of step-5 refreshes.
pub fn weight_update<B: HeBackend, T: TeeService<B::Ciphertext>>(
    ctx: &Ctx<B, T>,
    grads: &[B::Ciphertext],
    weights: &[B::Ciphertext],
    shape: UpdateShape,
    eta: f64,
    ledger: &mut OpLedger,
) -> Result<(Vec<B::Ciphertext>, usize)> {
    if grads.len() != weights.len() {
        return Err(Error::Shape("one gradient per weight ciphertext expected".into()));
    }
    let masked = map_with_ledger(grads.len(), ctx.schedule, ledger, |idx, l| {
        fold_to_position(ctx, &grads[idx], shape.position(idx), shape, eta, l)
    })?;
    // Steps 3 and 4: positions inside a group are distinct, so the sums
    // never overlap.
    let groups = grads.len().div_ceil(shape.set_len);
    let merged = map_with_ledger(groups, ctx.schedule, ledger, |g, l| {
        let members = &masked[g * shape.set_len..((g + 1) * shape.set_len).min(masked.len())];
        crate::rotate::sum(ctx.be, members, l)
    })?;
    // Step 5 goes through the TEE one ciphertext at a time.
    let refreshed = merged
        .iter()
        .map(|ct| ctx.tee.refresh(ct, ledger))
        .collect::<Result<Vec<_>>>()?;
    let updated = map_with_ledger(grads.len(), ctx.schedule, ledger, |idx, l| {
        let delta = split_and_spread(ctx, &refreshed[idx / shape.set_len], shape.position(idx), shape, l)?;
        ctx.be.add(&weights[idx], &delta, l)
    })?;
    Ok((updated, groups))
}

/// Step-1 products and propagated gradients of one backward pass.
#[derive(Debug, Clone)]
pub struct BackwardTrace<C> {
    /// Per layer (conv first), the weight-gradient products in weight order.
    pub weight_grads: Vec<Vec<C>>,
    /// Per layer, the gradient with respect to that layer's input; `None`
    /// for layer 0, whose input gradient training never needs.
    pub input_grads: Vec<Option<GradientGrid<C>>>,
}

/// Propagates `final_grad` from the logits back to layer 0.
pub fn backward<B: HeBackend, T: TeeService<B::Ciphertext>>(
    ctx: &Ctx<B, T>,
    plan: &PackingPlan,
    model: &EncryptedModel<B::Ciphertext>,
    trace: &ForwardTrace<B::Ciphertext>,
    final_grad: GradientGrid<B::Ciphertext>,
    ledger: &mut OpLedger,
) -> Result<BackwardTrace<B::Ciphertext>> {
    check_baseline(plan)?;
    let c = plan.conv.len();
    let total = c + plan.fc.len();
    let mut weight_grads = vec![Vec::new(); total];
    let mut input_grads = vec![None; total];
    let mut g = final_grad;
    for idx in (0..total).rev() {
        let is_fc = idx >= c;
        let label = if is_fc { format!("FL{}", idx - c + 1) } else { format!("CL{}", idx + 1) };
        let active = if is_fc { plan.fc[idx - c].activation } else { plan.conv[idx].activation };
        let x = &trace.layer_inputs[idx];
        let run = |g: GradientGrid<B::Ciphertext>, ledger: &mut OpLedger| -> Result<_> {
            let g = if active {
                ledger.set_phase(format!("Back Square {label}"));
                square_backward(ctx, &trace.pre_activations[idx], &g, ledger)?
            } else {
                g
            };
            ledger.set_phase(format!("Grad {label}"));
            let wg = if is_fc {
                fc_weight_gradient(ctx, &plan.fc[idx - c], x, &g, ledger)?
            } else {
                conv_weight_gradient(ctx, &plan.conv[idx], x, &g, ledger)?
            };
            if idx == 0 {
                return Ok((wg, None));
            }
            ledger.set_phase(format!("Back {label}"));
            let xg = if is_fc {
                let f = &plan.fc[idx - c];
                match f.input_type {
                    FcType::TypeI => fc_backward_type1(ctx, f, x, &g, &model.fc[idx - c], ledger)?,
                    FcType::TypeII => fc_backward_type2(ctx, f, plan.n, &g, &model.fc[idx - c], ledger)?,
                }
            } else {
                conv_backward(ctx, &plan.conv[idx], &g, &model.conv[idx], ledger)?
            };
            Ok((wg, Some(xg)))
        };
        let (wg, xg) = run(g, ledger).phase(|| format!("backward {label}"))?;
        weight_grads[idx] = wg;
        // The current layer's input layout is the previous layer's output
        // layout, so the gradient passes on as is.
        g = match &xg {
            Some(xg) => xg.clone(),
            None => ActivationGrid::dense(GridLayout::FcTypeI, Vec::new()),
        };
        input_grads[idx] = xg;
    }
    Ok(BackwardTrace { weight_grads, input_grads })
}

pub fn check_baseline(plan: &PackingPlan) -> Result<()> {
    if plan.conv.iter().any(|c| c.mode != PackingMode::Baseline) {
        return Err(Error::InvalidParameter("training requires baseline packing".into()));
    }
    Ok(())
}

/// Everything `train_step` needs from a plan, checked before any work.
pub fn check_trainable(plan: &PackingPlan) -> Result<()> {
    check_baseline(plan)?;
    for f in &plan.fc {
        check_step_two(f, plan.n)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub eta: f64,
    pub policy: RefreshPolicy,
    pub schedule: Schedule,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { eta: 0.01, policy: RefreshPolicy::OnExhaustion, schedule: Schedule::Parallel }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<C> {
    pub model: EncryptedModel<C>,
    pub forward: ForwardTrace<C>,
    pub backward: BackwardTrace<C>,
    /// Step-5 refreshes per layer (conv first).
    pub refreshes: Vec<usize>,
}

/// One SGD step: forward with retained activations, loss gradient from the
/// TEE, backward, then the weight update of every layer.
#[allow(clippy::too_many_arguments)]
pub fn train_step<B: HeBackend, T: TeeService<B::Ciphertext>>(
    be: &B,
    tee: &T,
    plan: &PackingPlan,
    model: &EncryptedModel<B::Ciphertext>,
    input: ActivationGrid<B::Ciphertext>,
    labels: &Tensor,
    opts: TrainOptions,
    ledger: &mut OpLedger,
) -> Result<TrainOutcome<B::Ciphertext>> {
    check_trainable(plan)?;
    let ctx = Ctx::new(be, tee, opts.policy, opts.schedule);
    let forward = infer_with_trace(be, plan, model, input, opts.schedule, ledger)?;
    ledger.set_phase("Loss");
    let g = tee.final_gradient(&forward.output, labels, plan, ledger)?;
    let bwd = backward(&ctx, plan, model, &forward, g, ledger)?;
    let c = plan.conv.len();
    let mut updated = EncryptedModel { conv: Vec::new(), fc: Vec::new() };
    let mut refreshes = Vec::new();
    for (l, cp) in plan.conv.iter().enumerate() {
        let label = format!("Update CL{}", l + 1);
        ledger.set_phase(&label);
        let shape = UpdateShape::conv(plan);
        let (w, r) = weight_update(&ctx, &bwd.weight_grads[l], &model.conv[l], shape, opts.eta, ledger)
            .phase(|| label.clone())?;
        debug_assert_eq!(w.len(), cp.filter_ciphertexts());
        updated.conv.push(w);
        refreshes.push(r);
    }
    for l in 0..plan.fc.len() {
        let label = format!("Update FL{}", l + 1);
        ledger.set_phase(&label);
        let shape = UpdateShape::dense(plan);
        let (w, r) = weight_update(&ctx, &bwd.weight_grads[c + l], &model.fc[l], shape, opts.eta, ledger)
            .phase(|| label.clone())?;
        updated.fc.push(w);
        refreshes.push(r);
    }
    Ok(TrainOutcome { model: updated, forward, backward: bwd, refreshes })
}
