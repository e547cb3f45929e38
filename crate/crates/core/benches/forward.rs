use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lhe_cnn::exec::Schedule;
use lhe_cnn::forward::infer;
use lhe_cnn::geometry::{validate_model_with, ModelConfig, PlanOptions};
use lhe_cnn::he_sim::{keygen, SimBackend};
use lhe_cnn::ledger::OpLedger;
use lhe_cnn::oracle::{random_inputs, PlainModel};
use lhe_cnn::packing::{encrypt_inputs, encrypt_model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cnn_1_2_inference(c: &mut Criterion) {
    let base = ModelConfig::cnn_1_2();
    // Wider slot vectors make each operation heavy enough for threads to pay.
    let wide = ModelConfig { slot_count: 8192, ..base.clone() };
    bench_config(c, "cnn_1_2_infer", base);
    bench_config(c, "cnn_1_2_infer_8192_slots", wide);
}

fn bench_config(c: &mut Criterion, title: &str, config: ModelConfig) {
    let plan = validate_model_with(&config, PlanOptions::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = PlainModel::random(&config, &mut rng);
    let x = random_inputs(&config, &mut rng);
    let be = SimBackend::new(keygen(128, plan.levels, plan.slots).unwrap());
    let mut ledger = OpLedger::new();
    let enc_model = encrypt_model(&be, &model, &plan, Schedule::Parallel, &mut ledger).unwrap();
    let grid = encrypt_inputs(&be, &x, &plan, Schedule::Parallel, &mut ledger).unwrap();

    let mut group = c.benchmark_group(title);
    group.sample_size(20);
    for (name, schedule) in [("sequential", Schedule::Sequential), ("parallel", Schedule::Parallel)] {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let mut ledger = OpLedger::new();
                infer(&be, &plan, &enc_model, grid.clone(), schedule, &mut ledger).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, cnn_1_2_inference);
criterion_main!(benches);
