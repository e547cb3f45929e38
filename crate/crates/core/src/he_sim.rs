//! Leveled SIMD homomorphic-encryption primitives behind a backend trait.
//!
//! [`SimBackend`] is a noise-free, exact-arithmetic simulation: a ciphertext
//! is its plaintext slot vector plus an encryption level. It keeps the level
//! semantics of a CKKS-style scheme so that depth budgets and per-level
//! operation counts behave as they would on a real library.
//!
//! Level rules:
//! - fresh ciphertexts start at `L - 1`;
//! - ⊗ and CMult consume one level and are counted at the (aligned) operand
//!   level; their result is marked *rescale pending*;
//! - ⊕ and Rot are counted at the level the operand had before its pending
//!   rescale (`level + 1` when pending), and keep the pending mark;
//! - binary operations align both operands down to the lower level for free.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::ledger::{OpKind, OpLedger};

/// A plaintext vector of exactly `S` real slots.
#[derive(Clone, PartialEq)]
pub struct SlotVector(Vec<f64>);

impl SlotVector {
    pub fn zeros(slots: usize) -> Self {
        Self(vec![0.0; slots])
    }

    pub fn filled(slots: usize, value: f64) -> Self {
        Self(vec![value; slots])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Cyclic left rotation: slot `i` of the result is slot `(i + m) mod S`.
    pub fn rotated_left(&self, m: usize) -> Self {
        let mut v = self.0.clone();
        let len = v.len();
        if len > 0 {
            v.rotate_left(m % len);
        }
        Self(v)
    }
}

impl fmt::Debug for SlotVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.len() <= 16 {
            f.debug_list().entries(&self.0).finish()
        } else {
            write!(f, "SlotVector[{}]({:?}, ..)", self.0.len(), &self.0[..8])
        }
    }
}

impl std::ops::Index<usize> for SlotVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for SlotVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KeyId(u64);

static NEXT_KEY_ID: AtomicU64 = AtomicU64::new(1);

/// Opaque decryption capability. Only the key holder (the TEE) has one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecretKey {
    key_id: KeyId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyMaterial {
    pub security: u32,
    pub levels: u32,
    pub slots: usize,
    pub key_id: KeyId,
    secret: Option<SecretKey>,
}

impl KeyMaterial {
    /// Public and evaluation material only; decryption is refused.
    pub fn public(&self) -> KeyMaterial {
        KeyMaterial { secret: None, ..self.clone() }
    }

    pub fn can_decrypt(&self) -> bool {
        self.secret.is_some()
    }

    /// Level of freshly encrypted ciphertexts.
    pub fn top_level(&self) -> u32 {
        self.levels - 1
    }
}

pub fn keygen(security: u32, levels: u32, slots: usize) -> Result<KeyMaterial> {
    if levels < 1 {
        return Err(Error::InvalidParameter("level budget must be at least 1".into()));
    }
    if slots == 0 || !slots.is_power_of_two() {
        return Err(Error::InvalidParameter(format!("slot count {slots} is not a power of two")));
    }
    let key_id = KeyId(NEXT_KEY_ID.fetch_add(1, Ordering::Relaxed));
    Ok(KeyMaterial { security, levels, slots, key_id, secret: Some(SecretKey { key_id }) })
}

#[derive(Clone, PartialEq)]
pub struct Ciphertext {
    payload: SlotVector,
    level: u32,
    rescale_pending: bool,
    key_id: KeyId,
}

impl Ciphertext {
    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn rescale_pending(&self) -> bool {
        self.rescale_pending
    }

    pub fn key_id(&self) -> KeyId {
        self.key_id
    }
}

impl fmt::Debug for Ciphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Ciphertext")
            .field("level", &self.level)
            .field("pending", &self.rescale_pending)
            .finish_non_exhaustive()
    }
}

/// The six primitives plus free level alignment.
///
/// Implementations record every primitive into the ledger passed in, exactly
/// once, at the level given by the module rules.
pub trait HeBackend: Sync {
    type Ciphertext: Clone + Send + Sync + fmt::Debug;

    fn slot_count(&self) -> usize;

    /// `L`, the number of levels of the key material.
    fn level_budget(&self) -> u32;

    fn level(&self, ct: &Self::Ciphertext) -> u32;

    fn encrypt(&self, pt: &SlotVector, ledger: &mut OpLedger) -> Result<Self::Ciphertext>;

    fn add(
        &self,
        a: &Self::Ciphertext,
        b: &Self::Ciphertext,
        ledger: &mut OpLedger,
    ) -> Result<Self::Ciphertext>;

    fn multiply(
        &self,
        a: &Self::Ciphertext,
        b: &Self::Ciphertext,
        ledger: &mut OpLedger,
    ) -> Result<Self::Ciphertext>;

    fn cmult(
        &self,
        ct: &Self::Ciphertext,
        pt: &SlotVector,
        ledger: &mut OpLedger,
    ) -> Result<Self::Ciphertext>;

    /// Cyclic left rotation by `m` slots, `0 <= m < S`.
    fn rotate(&self, ct: &Self::Ciphertext, m: usize, ledger: &mut OpLedger)
        -> Result<Self::Ciphertext>;

    fn level_align(&self, ct: &Self::Ciphertext, target: u32) -> Result<Self::Ciphertext>;

    fn top_level(&self) -> u32 {
        self.level_budget() - 1
    }

    /// Cyclic right rotation by `m`, expressed as a left rotation.
    fn rotate_right(
        &self,
        ct: &Self::Ciphertext,
        m: usize,
        ledger: &mut OpLedger,
    ) -> Result<Self::Ciphertext> {
        let s = self.slot_count();
        self.rotate(ct, (s - m % s) % s, ledger)
    }
}

/// Backends that can also decrypt, given the secret capability.
pub trait HeDecrypt: HeBackend {
    fn decrypt(&self, ct: &Self::Ciphertext, ledger: &mut OpLedger) -> Result<SlotVector>;
}

/// Shared level bookkeeping for simulated ciphertexts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LevelState {
    level: u32,
    pending: bool,
}

impl LevelState {
    fn accounting_level(self) -> u32 {
        self.level + self.pending as u32
    }

    fn aligned(self, target: u32) -> LevelState {
        if target == self.level {
            self
        } else {
            LevelState { level: target, pending: false }
        }
    }

    fn join(a: LevelState, b: LevelState) -> LevelState {
        let level = a.level.min(b.level);
        let (a, b) = (a.aligned(level), b.aligned(level));
        LevelState { level, pending: a.pending || b.pending }
    }
}

fn add_state(a: LevelState, b: LevelState, ledger: &mut OpLedger) -> LevelState {
    let out = LevelState::join(a, b);
    ledger.record(OpKind::Add, out.accounting_level());
    out
}

fn mul_state(
    a: LevelState,
    b: LevelState,
    kind: OpKind,
    ledger: &mut OpLedger,
) -> Result<LevelState> {
    let level = a.level.min(b.level);
    if level == 0 {
        return Err(Error::DepthExhausted {
            op: if kind == OpKind::Mul { "⊗" } else { "CMult" },
            context: ledger
                .current_phase()
                .map(|p| p.label.clone())
                .unwrap_or_else(|| "unphased".into()),
        });
    }
    ledger.record(kind, level);
    Ok(LevelState { level: level - 1, pending: true })
}

fn rot_state(a: LevelState, m: usize, slots: usize, ledger: &mut OpLedger) -> Result<LevelState> {
    if m >= slots {
        return Err(Error::RotationRange { amount: m, slots });
    }
    ledger.record(OpKind::Rot, a.accounting_level());
    Ok(a)
}

fn align_state(a: LevelState, target: u32) -> Result<LevelState> {
    if target > a.level {
        return Err(Error::LevelAlign { level: a.level, target });
    }
    Ok(a.aligned(target))
}

/// Exact-arithmetic simulation backend.
#[derive(Debug, Clone)]
pub struct SimBackend {
    keys: KeyMaterial,
}

impl SimBackend {
    pub fn new(keys: KeyMaterial) -> Self {
        Self { keys }
    }

    pub fn keys(&self) -> &KeyMaterial {
        &self.keys
    }

    /// The same backend with the secret capability removed.
    pub fn evaluator_only(&self) -> SimBackend {
        SimBackend { keys: self.keys.public() }
    }

    fn check_len(&self, pt: &SlotVector) -> Result<()> {
        if pt.len() != self.keys.slots {
            return Err(Error::SlotLength { expected: self.keys.slots, got: pt.len() });
        }
        Ok(())
    }

    fn check_key(&self, ct: &Ciphertext) -> Result<()> {
        if ct.key_id != self.keys.key_id {
            return Err(Error::KeyMismatch);
        }
        Ok(())
    }

    fn state(ct: &Ciphertext) -> LevelState {
        LevelState { level: ct.level, pending: ct.rescale_pending }
    }

    fn with_state(&self, payload: SlotVector, s: LevelState) -> Ciphertext {
        Ciphertext { payload, level: s.level, rescale_pending: s.pending, key_id: self.keys.key_id }
    }

    /// Encrypts at an explicit level (used by the key holder's refresh).
    pub fn encrypt_at(
        &self,
        pt: &SlotVector,
        level: u32,
        ledger: &mut OpLedger,
    ) -> Result<Ciphertext> {
        self.check_len(pt)?;
        if level > self.keys.top_level() {
            return Err(Error::LevelAlign { level: self.keys.top_level(), target: level });
        }
        ledger.record(OpKind::Enc, level);
        Ok(self.with_state(pt.clone(), LevelState { level, pending: false }))
    }

    fn zip_with(a: &SlotVector, b: &SlotVector, f: impl Fn(f64, f64) -> f64) -> SlotVector {
        SlotVector(a.0.iter().zip(&b.0).map(|(&x, &y)| f(x, y)).collect())
    }
}

impl HeBackend for SimBackend {
    type Ciphertext = Ciphertext;

    fn slot_count(&self) -> usize {
        self.keys.slots
    }

    fn level_budget(&self) -> u32 {
        self.keys.levels
    }

    fn level(&self, ct: &Ciphertext) -> u32 {
        ct.level
    }

    fn encrypt(&self, pt: &SlotVector, ledger: &mut OpLedger) -> Result<Ciphertext> {
        self.encrypt_at(pt, self.keys.top_level(), ledger)
    }

    fn add(&self, a: &Ciphertext, b: &Ciphertext, ledger: &mut OpLedger) -> Result<Ciphertext> {
        self.check_key(a)?;
        self.check_key(b)?;
        let s = add_state(Self::state(a), Self::state(b), ledger);
        Ok(self.with_state(Self::zip_with(&a.payload, &b.payload, |x, y| x + y), s))
    }

    fn multiply(
        &self,
        a: &Ciphertext,
        b: &Ciphertext,
        ledger: &mut OpLedger,
    ) -> Result<Ciphertext> {
        self.check_key(a)?;
        self.check_key(b)?;
        let s = mul_state(Self::state(a), Self::state(b), OpKind::Mul, ledger)?;
        Ok(self.with_state(Self::zip_with(&a.payload, &b.payload, |x, y| x * y), s))
    }

    fn cmult(&self, ct: &Ciphertext, pt: &SlotVector, ledger: &mut OpLedger) -> Result<Ciphertext> {
        self.check_key(ct)?;
        self.check_len(pt)?;
        let st = Self::state(ct);
        let s = mul_state(st, st, OpKind::CMult, ledger)?;
        Ok(self.with_state(Self::zip_with(&ct.payload, pt, |x, y| x * y), s))
    }

    fn rotate(&self, ct: &Ciphertext, m: usize, ledger: &mut OpLedger) -> Result<Ciphertext> {
        self.check_key(ct)?;
        let s = rot_state(Self::state(ct), m, self.keys.slots, ledger)?;
        Ok(self.with_state(ct.payload.rotated_left(m), s))
    }

    fn level_align(&self, ct: &Ciphertext, target: u32) -> Result<Ciphertext> {
        self.check_key(ct)?;
        let s = align_state(Self::state(ct), target)?;
        Ok(self.with_state(ct.payload.clone(), s))
    }
}

impl HeDecrypt for SimBackend {
    fn decrypt(&self, ct: &Ciphertext, ledger: &mut OpLedger) -> Result<SlotVector> {
        match &self.keys.secret {
            None => return Err(Error::Unauthorized),
            Some(sk) if sk.key_id != ct.key_id => return Err(Error::KeyMismatch),
            Some(_) => {}
        }
        ledger.record(OpKind::Dec, ct.level);
        Ok(ct.payload.clone())
    }
}

/// Payload-free backend: tracks levels and counts operations only.
///
/// Operation counts of the packed pipeline do not depend on data, so running
/// it over this backend yields the same ledger as a full simulation at a
/// fraction of the cost.
#[derive(Debug, Clone)]
pub struct CountingBackend {
    slots: usize,
    levels: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CountingCiphertext {
    state: LevelStateView,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LevelStateView {
    level: u32,
    pending: bool,
}

impl CountingBackend {
    pub fn new(levels: u32, slots: usize) -> Result<Self> {
        // Same parameter checks as keygen.
        keygen(0, levels, slots)?;
        Ok(Self { slots, levels })
    }

    fn s(ct: &CountingCiphertext) -> LevelState {
        LevelState { level: ct.state.level, pending: ct.state.pending }
    }

    fn ct(s: LevelState) -> CountingCiphertext {
        CountingCiphertext { state: LevelStateView { level: s.level, pending: s.pending } }
    }
}

impl HeBackend for CountingBackend {
    type Ciphertext = CountingCiphertext;

    fn slot_count(&self) -> usize {
        self.slots
    }

    fn level_budget(&self) -> u32 {
        self.levels
    }

    fn level(&self, ct: &CountingCiphertext) -> u32 {
        ct.state.level
    }

    fn encrypt(&self, pt: &SlotVector, ledger: &mut OpLedger) -> Result<CountingCiphertext> {
        if pt.len() != self.slots {
            return Err(Error::SlotLength { expected: self.slots, got: pt.len() });
        }
        ledger.record(OpKind::Enc, self.levels - 1);
        Ok(Self::ct(LevelState { level: self.levels - 1, pending: false }))
    }

    fn add(
        &self,
        a: &CountingCiphertext,
        b: &CountingCiphertext,
        ledger: &mut OpLedger,
    ) -> Result<CountingCiphertext> {
        Ok(Self::ct(add_state(Self::s(a), Self::s(b), ledger)))
    }

    fn multiply(
        &self,
        a: &CountingCiphertext,
        b: &CountingCiphertext,
        ledger: &mut OpLedger,
    ) -> Result<CountingCiphertext> {
        Ok(Self::ct(mul_state(Self::s(a), Self::s(b), OpKind::Mul, ledger)?))
    }

    fn cmult(
        &self,
        ct: &CountingCiphertext,
        pt: &SlotVector,
        ledger: &mut OpLedger,
    ) -> Result<CountingCiphertext> {
        if pt.len() != self.slots {
            return Err(Error::SlotLength { expected: self.slots, got: pt.len() });
        }
        Ok(Self::ct(mul_state(Self::s(ct), Self::s(ct), OpKind::CMult, ledger)?))
    }

    fn rotate(
        &self,
        ct: &CountingCiphertext,
        m: usize,
        ledger: &mut OpLedger,
    ) -> Result<CountingCiphertext> {
        Ok(Self::ct(rot_state(Self::s(ct), m, self.slots, ledger)?))
    }

    fn level_align(&self, ct: &CountingCiphertext, target: u32) -> Result<CountingCiphertext> {
        Ok(Self::ct(align_state(Self::s(ct), target)?))
    }
}
