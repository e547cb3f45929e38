//! In-process simulation of the four-party session: model provider, data
//! provider, TEE and REE, with the message flow numbered 1 to 10.
//!
//! Only the TEE ever holds decryption capability. The REE works with the
//! public half of the key material and asks the TEE for the few plaintext
//! services training needs.

use std::fmt;
use std::sync::Mutex;

use rand::{RngCore, SeedableRng};
use rand_chacha::{ChaCha20Rng, ChaCha8Rng};

use crate::backward::{train_step, RefreshPolicy, TeeService, TrainOptions};
use crate::error::{Error, PhaseExt, Result};
use crate::exec::Schedule;
use crate::geometry::{validate_model_with, FcType, ModelConfig, PackingPlan, PlanOptions};
use crate::he_sim::{keygen, Ciphertext, HeBackend, HeDecrypt, SimBackend, SlotVector};
use crate::ledger::OpLedger;
use crate::oracle::{mse_gradient, PlainModel};
use crate::packing::{
    encrypt_inputs, encrypt_model, pack_replicated_values, pack_type2_output_values, unpack_model,
    unpack_outputs, ActivationGrid, GridLayout,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    ModelProvider,
    DataProvider,
    Tee,
    Ree,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::ModelProvider => "model-provider",
            Role::DataProvider => "data-provider",
            Role::Tee => "tee",
            Role::Ree => "ree",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub step: u8,
    pub from: Role,
    pub to: Role,
    pub kind: String,
    /// Rough payload size.
    pub bytes: usize,
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} from={} to={} kind={} bytes={}",
            self.step, self.from, self.to, self.kind, self.bytes
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    messages: Vec<Message>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, step: u8, from: Role, to: Role, kind: &str, bytes: usize) {
        debug_assert!(self.messages.last().is_none_or(|m| m.step <= step));
        self.messages.push(Message { step, from, to, kind: kind.into(), bytes });
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    /// Distinct step numbers, in order.
    pub fn steps(&self) -> Vec<u8> {
        let mut s: Vec<u8> = self.messages.iter().map(|m| m.step).collect();
        s.dedup();
        s
    }

    pub fn to_text(&self) -> String {
        self.messages.iter().map(|m| format!("{m}\n")).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TeeStats {
    pub keygens: usize,
    pub result_decrypts: usize,
    pub rewraps: usize,
    /// Weight-update refreshes.
    pub refreshes: usize,
    /// Refreshes of operands that ran out of levels.
    pub depth_refreshes: usize,
    /// Loss-gradient computations.
    pub final_gradients: usize,
}

/// A client's symmetric secret, shared with the TEE after attestation.
#[derive(Clone, PartialEq, Eq)]
pub struct ClientKey([u8; 32]);

impl fmt::Debug for ClientKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ClientKey(..)")
    }
}

impl ClientKey {
    pub fn generate(rng: &mut impl RngCore) -> Self {
        let mut k = [0u8; 32];
        rng.fill_bytes(&mut k);
        Self(k)
    }

    fn keystream(&self, len: usize) -> Vec<u8> {
        let mut out = vec![0u8; len];
        ChaCha20Rng::from_seed(self.0).fill_bytes(&mut out);
        out
    }
}

/// A tensor under a client's symmetric key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Wrapped {
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl Wrapped {
    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

pub fn wrap(t: &Tensor, key: &ClientKey) -> Wrapped {
    let plain: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    let ks = key.keystream(plain.len());
    Wrapped { shape: t.shape().to_vec(), bytes: plain.iter().zip(ks).map(|(a, b)| a ^ b).collect() }
}

pub fn unwrap(w: &Wrapped, key: &ClientKey) -> Result<Tensor> {
    let ks = key.keystream(w.bytes.len());
    let plain: Vec<u8> = w.bytes.iter().zip(ks).map(|(a, b)| a ^ b).collect();
    let data = plain
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(w.shape.clone(), data)
}

/// The key holder. Refresh and decryption requests are served one at a
/// time.
#[derive(Debug)]
pub struct Tee {
    backend: SimBackend,
    stats: Mutex<TeeStats>,
    service: Mutex<()>,
}

impl Tee {
    /// Generates a fresh key set.
    pub fn keygen(security: u32, levels: u32, slots: usize) -> Result<Tee> {
        let keys = keygen(security, levels, slots)?;
        let tee = Tee {
            backend: SimBackend::new(keys),
            stats: Mutex::new(TeeStats::default()),
            service: Mutex::new(()),
        };
        tee.bump(|s| s.keygens += 1);
        Ok(tee)
    }

    /// The backend handed to everyone else: can encrypt and evaluate but
    /// not decrypt.
    pub fn public_backend(&self) -> SimBackend {
        self.backend.evaluator_only()
    }

    pub fn stats(&self) -> TeeStats {
        *self.stats.lock().expect("stats lock")
    }

    pub fn top_level(&self) -> u32 {
        self.backend.top_level()
    }

    fn bump(&self, f: impl FnOnce(&mut TeeStats)) {
        f(&mut self.stats.lock().expect("stats lock"));
    }

    fn reencrypt(&self, ct: &Ciphertext, ledger: &mut OpLedger) -> Result<Ciphertext> {
        let _serial = self.service.lock().expect("service lock");
        let pt = self.backend.decrypt(ct, ledger)?;
        self.backend.encrypt_at(&pt, self.backend.top_level(), ledger)
    }

    fn decrypt_all(&self, cts: &[Ciphertext], ledger: &mut OpLedger) -> Result<Vec<SlotVector>> {
        let _serial = self.service.lock().expect("service lock");
        cts.iter().map(|c| self.backend.decrypt(c, ledger)).collect()
    }

    /// Decrypts and decodes the logits.
    pub fn decrypt_result(
        &self,
        out: &ActivationGrid<Ciphertext>,
        plan: &PackingPlan,
        ledger: &mut OpLedger,
    ) -> Result<Tensor> {
        let slots = self.decrypt_all(&out.cts, ledger)?;
        self.bump(|s| s.result_decrypts += 1);
        unpack_outputs(&slots, plan)
    }

    /// Decrypts an updated model for its owner.
    pub fn decrypt_model(
        &self,
        model: &crate::packing::EncryptedModel<Ciphertext>,
        plan: &PackingPlan,
        ledger: &mut OpLedger,
    ) -> Result<PlainModel> {
        let conv = model.conv.iter().map(|c| self.decrypt_all(c, ledger)).collect::<Result<Vec<_>>>()?;
        let fc = model.fc.iter().map(|c| self.decrypt_all(c, ledger)).collect::<Result<Vec<_>>>()?;
        unpack_model(&conv, &fc, plan)
    }

    pub fn rewrap(&self, t: &Tensor, key: &ClientKey) -> Wrapped {
        self.bump(|s| s.rewraps += 1);
        wrap(t, key)
    }

    /// Test hook: plaintext of any ciphertext under this TEE's key.
    pub fn inspect(&self, ct: &Ciphertext) -> Result<SlotVector> {
        self.backend.decrypt(ct, &mut OpLedger::new())
    }
}

impl TeeService<Ciphertext> for Tee {
    fn refresh(&self, ct: &Ciphertext, ledger: &mut OpLedger) -> Result<Ciphertext> {
        let out = self.reencrypt(ct, ledger)?;
        self.bump(|s| s.refreshes += 1);
        Ok(out)
    }

    fn depth_refresh(&self, ct: &Ciphertext, ledger: &mut OpLedger) -> Result<Ciphertext> {
        let out = self.reencrypt(ct, ledger)?;
        self.bump(|s| s.depth_refreshes += 1);
        Ok(out)
    }

    fn final_gradient(
        &self,
        logits: &ActivationGrid<Ciphertext>,
        labels: &Tensor,
        plan: &PackingPlan,
        ledger: &mut OpLedger,
    ) -> Result<ActivationGrid<Ciphertext>> {
        let slots = self.decrypt_all(&logits.cts, ledger)?;
        let y = unpack_outputs(&slots, plan)?;
        let g = mse_gradient(&y, labels)?;
        let last = plan.fc.last().expect("validated plan has a dense layer");
        let (layout, pts) = match last.input_type {
            FcType::TypeI => (GridLayout::FcTypeII, pack_replicated_values(&g, plan)),
            FcType::TypeII => (GridLayout::FcTypeI, pack_type2_output_values(&g, plan)),
        };
        let top = self.backend.top_level();
        let cts = pts
            .iter()
            .map(|p| self.backend.encrypt_at(p, top, ledger))
            .collect::<Result<Vec<_>>>()?;
        self.bump(|s| s.final_gradients += 1);
        Ok(ActivationGrid::dense(layout, cts))
    }
}

/// Which attestation, if any, is made to fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttestationFault {
    #[default]
    None,
    /// The model provider's attestation (step 1).
    ModelProvider,
    /// The data provider's attestation (step 5).
    DataProvider,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionOptions {
    pub plan: PlanOptions,
    pub security: u32,
    pub seed: u64,
    pub schedule: Schedule,
    pub eta: f64,
    pub policy: RefreshPolicy,
    pub fault: AttestationFault,
}

impl Default for SessionOptions {
    fn default() -> Self {
        Self {
            plan: PlanOptions::default(),
            security: 128,
            seed: 0,
            schedule: Schedule::Parallel,
            eta: 0.01,
            policy: RefreshPolicy::OnExhaustion,
            fault: AttestationFault::None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SessionOutput {
    pub plan: PackingPlan,
    /// Logits as unwrapped by the data provider.
    pub logits: Tensor,
    /// The model after one training step, as unwrapped by the model
    /// provider (training sessions only).
    pub updated: Option<PlainModel>,
    /// Weight-update refreshes per layer (training sessions only).
    pub refreshes: Vec<usize>,
    pub tee: TeeStats,
}

fn attest(fault: AttestationFault, who: AttestationFault) -> Result<()> {
    if fault == who {
        let name = match who {
            AttestationFault::ModelProvider => "the model provider",
            _ => "the data provider",
        };
        return Err(Error::Attestation(name.into()));
    }
    Ok(())
}

fn ct_bytes(plan: &PackingPlan, count: usize) -> usize {
    // Two ring elements of S complex slots each, 8 bytes per coefficient.
    count * 2 * 2 * plan.slots * 8
}

/// Runs one session end to end. With labels, the REE also performs one
/// training step inside step 8 and the model provider receives the updated
/// weights. The ledger and transcript are filled in as the session goes, so
/// they stay inspectable after a failure.
pub fn run_session(
    model: &PlainModel,
    config: &ModelConfig,
    inputs: &Tensor,
    labels: Option<&Tensor>,
    opts: SessionOptions,
    ledger: &mut OpLedger,
    transcript: &mut Transcript,
) -> Result<SessionOutput> {
    use Role::*;
    let plan = validate_model_with(config, opts.plan)?;
    model.check(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let model_key = ClientKey::generate(&mut rng);
    let data_key = ClientKey::generate(&mut rng);

    attest(opts.fault, AttestationFault::ModelProvider).phase(|| "step 1".into())?;
    transcript.push(1, ModelProvider, Tee, "attest+secret+hyperparameters", 32 + config.to_toml().len());

    // Training spends one extra level on the update's split step.
    let levels = plan.levels + labels.is_some() as u32;
    let tee = self::Tee::keygen(opts.security, levels, plan.slots).phase(|| "step 2".into())?;
    let public = tee.public_backend();
    transcript.push(2, Tee, ModelProvider, "public-key", ct_bytes(&plan, 1));

    let enc_model = encrypt_model(&public, model, &plan, opts.schedule, ledger).phase(|| "step 3".into())?;
    let model_cts: usize = enc_model.conv.iter().chain(&enc_model.fc).map(Vec::len).sum();
    transcript.push(3, ModelProvider, Ree, "encrypted-model", ct_bytes(&plan, model_cts));

    transcript.push(4, Tee, Ree, "public+evaluation-key", ct_bytes(&plan, 1 + levels as usize));

    attest(opts.fault, AttestationFault::DataProvider).phase(|| "step 5".into())?;
    transcript.push(5, DataProvider, Tee, "attest+secret", 32);
    transcript.push(6, Tee, DataProvider, "public-key", ct_bytes(&plan, 1));

    let x = encrypt_inputs(&public, inputs, &plan, opts.schedule, ledger).phase(|| "step 7".into())?;
    transcript.push(7, DataProvider, Ree, "encrypted-inputs", ct_bytes(&plan, x.cts.len()));

    let (output, trained) = match labels {
        None => {
            let out = crate::forward::infer(&public, &plan, &enc_model, x, opts.schedule, ledger)
                .phase(|| "step 8".into())?;
            (out, None)
        }
        Some(y) => {
            let t = TrainOptions { eta: opts.eta, policy: opts.policy, schedule: opts.schedule };
            let before = tee.stats();
            let outcome = train_step(&public, &tee, &plan, &enc_model, x, y, t, ledger)
                .phase(|| "step 8".into())?;
            let after = tee.stats();
            transcript.push(8, Ree, Tee, "encrypted-logits", ct_bytes(&plan, outcome.forward.output.cts.len()));
            transcript.push(8, Tee, Ree, "encrypted-loss-gradient", ct_bytes(&plan, outcome.forward.output.cts.len()));
            let refreshed = (after.refreshes - before.refreshes) + (after.depth_refreshes - before.depth_refreshes);
            if refreshed > 0 {
                transcript.push(8, Ree, Tee, "refresh-request", ct_bytes(&plan, refreshed));
                transcript.push(8, Tee, Ree, "refreshed", ct_bytes(&plan, refreshed));
            }
            (outcome.forward.output.clone(), Some(outcome))
        }
    };
    transcript.push(8, Ree, Tee, "encrypted-result", ct_bytes(&plan, output.cts.len()));

    ledger.set_phase("Dec. Outputs");
    let logits = tee.decrypt_result(&output, &plan, ledger).phase(|| "step 9".into())?;
    let wrapped = tee.rewrap(&logits, &data_key);
    transcript.push(9, Tee, DataProvider, "wrapped-result", wrapped.len());

    let mut updated = None;
    let mut refreshes = Vec::new();
    if let Some(outcome) = &trained {
        transcript.push(9, Ree, Tee, "encrypted-updated-model", ct_bytes(&plan, model_cts));
        ledger.set_phase("Dec. Model");
        let m = tee.decrypt_model(&outcome.model, &plan, ledger).phase(|| "step 9".into())?;
        let packed = m.to_bundle();
        let wrapped_model: Vec<(String, Wrapped)> =
            packed.iter().map(|(k, t)| (k.clone(), tee.rewrap(t, &model_key))).collect();
        transcript.push(9, Tee, ModelProvider, "wrapped-model", wrapped_model.iter().map(|(_, w)| w.len()).sum());
        let mut bundle = crate::tensor::TensorBundle::new();
        for (k, w) in &wrapped_model {
            bundle.insert(k.clone(), unwrap(w, &model_key)?);
        }
        updated = Some(PlainModel::from_bundle(&bundle, config)?);
        refreshes = outcome.refreshes.clone();
    }

    let logits = unwrap(&wrapped, &data_key)?;
    transcript.push(10, DataProvider, DataProvider, "unwrap-result", logits.len() * 8);
    if updated.is_some() {
        transcript.push(10, ModelProvider, ModelProvider, "unwrap-model", 0);
    }
    Ok(SessionOutput { plan, logits, updated, refreshes, tee: tee.stats() })
}
