//! Regenerates the bundled fixtures under `fixtures/`.
//!
//! cargo run -p lhe-cnn --example gen_fixtures

use std::path::Path;

use lhe_cnn::geometry::{ConvLayerConfig, FcLayerConfig, ModelConfig};
use lhe_cnn::oracle::{random_inputs, random_labels, PlainModel};
use lhe_cnn::tensor::{save_bundle, Tensor, TensorBundle};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const CNN12_SEED: u64 = 12;
const DESK_SEED: u64 = 7;

fn desk() -> ModelConfig {
    ModelConfig {
        input_side: 6,
        n: 4,
        slot_count: 64,
        conv: vec![
            ConvLayerConfig { channels: 1, filters: 2, kernel: 3, stride: 1 },
            ConvLayerConfig { channels: 2, filters: 2, kernel: 2, stride: 2 },
        ],
        fc: vec![FcLayerConfig { inputs: 8, outputs: 2 }, FcLayerConfig { inputs: 2, outputs: 2 }],
        final_activation: false,
    }
}

fn single(name: &str, t: Tensor) -> TensorBundle {
    TensorBundle::from([(name.to_string(), t)])
}

fn main() -> lhe_cnn::error::Result<()> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");

    let fig2 = ModelConfig::worked_example();
    std::fs::write(root.join("fig2/model.toml"), fig2.to_toml())?;
    let mut x = Tensor::zeros(vec![2, 1, 8, 8]);
    for t in 0..2 {
        for a in 0..8 {
            for b in 0..8 {
                *x.at_mut(&[t, 0, a, b]) = ((t + 1) * (8 * a + b + 1)) as f64;
            }
        }
    }
    save_bundle(&root.join("fig2/inputs.txt"), &single("inputs", x))?;
    let model = PlainModel {
        conv: vec![
            Tensor::new(vec![2, 1, 2, 2], vec![1., 0., 0., 0., 1., 0., 0., 0.])?,
            Tensor::new(vec![1, 2, 2, 2], vec![1., 0., 0., 0., 0., 0., 0., 1.])?,
        ],
        fc: vec![
            Tensor::new(vec![2, 4], vec![1., 0., 0., 1., 1., -1., 1., 0.])?,
            Tensor::new(vec![2, 2], vec![1., -1., 0., 1.])?,
        ],
    };
    save_bundle(&root.join("fig2/weights.txt"), &model.to_bundle())?;

    let cnn = ModelConfig::cnn_1_2();
    std::fs::write(root.join("cnn12/model.toml"), cnn.to_toml())?;
    let mut rng = ChaCha8Rng::seed_from_u64(CNN12_SEED);
    save_bundle(&root.join("cnn12/weights.bin"), &PlainModel::random(&cnn, &mut rng).to_bundle())?;
    save_bundle(&root.join("cnn12/inputs.bin"), &single("inputs", random_inputs(&cnn, &mut rng)))?;

    let d = desk();
    std::fs::write(root.join("desk/model.toml"), d.to_toml())?;
    let mut rng = ChaCha8Rng::seed_from_u64(DESK_SEED);
    save_bundle(&root.join("desk/weights.txt"), &PlainModel::random(&d, &mut rng).to_bundle())?;
    save_bundle(&root.join("desk/inputs.txt"), &single("inputs", random_inputs(&d, &mut rng)))?;
    save_bundle(&root.join("desk/labels.txt"), &single("labels", random_labels(&d, &mut rng)))?;
    Ok(())
}
