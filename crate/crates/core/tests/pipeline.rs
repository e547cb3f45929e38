use std::path::{Path, PathBuf};

use lhe_cnn::error::Error;
use lhe_cnn::exec::Schedule;
use lhe_cnn::geometry::{ModelConfig, PackingChoice, PackingMode, PlanOptions};
use lhe_cnn::ledger::{OpKind, OpLedger};
use lhe_cnn::oracle::{max_relative_error, plain_forward, random_inputs, PlainModel};
use lhe_cnn::protocol::{run_session, AttestationFault, Role, SessionOptions, Transcript};
use lhe_cnn::tensor::{load_bundle, take_tensor, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(rel)
}

fn desk() -> (ModelConfig, PlainModel, Tensor, Tensor) {
    let config = ModelConfig::load(&fixture("desk/model.toml")).unwrap();
    let model = PlainModel::from_bundle(&load_bundle(&fixture("desk/weights.txt")).unwrap(), &config).unwrap();
    let x = take_tensor(&load_bundle(&fixture("desk/inputs.txt")).unwrap(), "inputs").unwrap();
    let y = take_tensor(&load_bundle(&fixture("desk/labels.txt")).unwrap(), "labels").unwrap();
    (config, model, x, y)
}

fn baseline() -> PlanOptions {
    PlanOptions { packing: PackingChoice::Forced(PackingMode::Baseline), activation: true }
}

#[test]
fn inference_transcript_walks_every_step() {
    let (config, model, x, _) = desk();
    let mut transcript = Transcript::new();
    let out =
        run_session(&model, &config, &x, None, SessionOptions::default(), &mut OpLedger::new(), &mut transcript)
            .unwrap();
    let mut steps = transcript.steps();
    steps.dedup();
    assert_eq!(steps.first(), Some(&1));
    assert_eq!(steps.last(), Some(&10));
    assert!(out.updated.is_none());
    assert_eq!(out.tee.result_decrypts, 1);
    // The REE never receives anything in plaintext form.
    for m in transcript.messages() {
        if m.to == Role::Ree {
            assert!(!m.kind.contains("plain"), "{m}");
        }
    }
    let want = plain_forward(&model, &config, &x, true).unwrap().logits;
    assert!(max_relative_error(out.logits.data(), want.data()) < 1e-9);
}

#[test]
fn failed_attestation_stops_the_session() {
    let (config, model, x, _) = desk();
    for fault in [AttestationFault::ModelProvider, AttestationFault::DataProvider] {
        let opts = SessionOptions { fault, ..Default::default() };
        let e = run_session(&model, &config, &x, None, opts, &mut OpLedger::new(), &mut Transcript::new())
            .unwrap_err();
        assert!(matches!(e.root(), Error::Attestation(_)), "{e}");
    }
}

#[test]
fn schedules_agree_bit_for_bit() {
    let (config, model, x, y) = desk();
    let run = |schedule| {
        let mut ledger = OpLedger::new();
        let opts = SessionOptions { plan: baseline(), schedule, ..Default::default() };
        let out = run_session(&model, &config, &x, Some(&y), opts, &mut ledger, &mut Transcript::new()).unwrap();
        (out.logits, out.updated.unwrap(), ledger.totals())
    };
    let (la, ma, ca) = run(Schedule::Sequential);
    let (lb, mb, cb) = run(Schedule::Parallel);
    assert_eq!(la, lb);
    assert_eq!(ma.conv, mb.conv);
    assert_eq!(ma.fc, mb.fc);
    assert_eq!(ca, cb);
}

#[test]
fn repeated_training_lowers_the_loss() {
    let (config, mut model, x, y) = desk();
    let loss = |m: &PlainModel| {
        let logits = plain_forward(m, &config, &x, true).unwrap().logits;
        logits.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    };
    let start = loss(&model);
    for seed in 0..5 {
        let opts = SessionOptions { plan: baseline(), eta: 0.02, seed, ..Default::default() };
        let out = run_session(&model, &config, &x, Some(&y), opts, &mut OpLedger::new(), &mut Transcript::new())
            .unwrap();
        model = out.updated.unwrap();
    }
    assert!(loss(&model) < start, "{} vs {start}", loss(&model));
}

#[test]
fn random_models_run_in_every_mode() {
    let config = ModelConfig::load(&fixture("desk/model.toml")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for mode in [PackingMode::Baseline, PackingMode::CrossChannel, PackingMode::CrossFilter] {
        let model = PlainModel::random(&config, &mut rng);
        let x = random_inputs(&config, &mut rng);
        let opts = SessionOptions {
            plan: PlanOptions { packing: PackingChoice::Forced(mode), activation: true },
            ..Default::default()
        };
        let mut ledger = OpLedger::new();
        let out = match run_session(&model, &config, &x, None, opts, &mut ledger, &mut Transcript::new()) {
            Ok(out) => out,
            // Alternation puts a cross-filter layer last, and two filters
            // cannot be spread over four blocks.
            Err(e) if mode != PackingMode::Baseline => {
                assert!(matches!(e.root(), Error::Validation(_)), "{e}");
                continue;
            }
            Err(e) => panic!("{mode:?}: {e}"),
        };
        let want = plain_forward(&model, &config, &x, true).unwrap().logits;
        assert!(max_relative_error(out.logits.data(), want.data()) < 1e-9, "{mode:?}");
        assert!(ledger.count(OpKind::Enc) > 0);
    }
}
