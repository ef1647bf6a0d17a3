//! Prints reference values that the regression tests freeze.

use ndarray::Array3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use quasar_core::data::{DatasetConfig, Split, SyntheticDataset};
use quasar_core::evo::crossover;
use quasar_core::nas::{sample_subnet_seeded, ModelArch, SearchSpace, SubnetConfig, Supernet};
use quasar_core::vit::{forward, ModelParams, QuantKind, ToyModelConfig};

fn main() {
    // Fixed-seed tiny model logits (d=16, depth=2).
    let cfg = ToyModelConfig {
        embed_dim: 16,
        depth: 2,
        heads: 2,
        hidden_dims: vec![16, 16],
        expansion_ratios: vec![2.0, 2.0],
        mixed_ratios: vec![0.5, 0.25],
        num_classes: 4,
        token_dim: 16,
        act_bits: 6,
        quant: QuantKind::Full,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let params = ModelParams::init(&cfg, &mut rng).unwrap();
    let x = Array3::from_shape_fn((2, 8, 16), |_| rng.sample::<f64, _>(StandardNormal));
    let (logits, _) = forward(&params, &cfg, &x).unwrap();
    println!("golden logits:");
    for row in logits.rows() {
        let v: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        println!("  [{}]", v.join(", "));
    }

    // Seeded crossover child of two fixed configs.
    let space = SearchSpace::toy();
    let p1 = sample_subnet_seeded(&space, 100);
    let p2 = sample_subnet_seeded(&space, 200);
    let mut cross_rng = ChaCha8Rng::seed_from_u64(77);
    let child = crossover(&p1, &p2, &mut cross_rng);
    println!("p1 = {p1:?}");
    println!("p2 = {p2:?}");
    println!("child = {child:?}");

    // Ranking of five fixed configs on a briefly trained supernet.
    let arch = ModelArch::default();
    let mut net = Supernet::new(space.clone(), arch, 6, 7).unwrap();
    let ds = SyntheticDataset::generate(&DatasetConfig::default()).unwrap();
    let tc = quasar_core::nas::SupernetTrainConfig {
        epochs: 8,
        batch_size: 32,
        lr: 0.05,
        seed: 7,
        kd_alpha: 0.0,
        kd_tau: 2.0,
    };
    quasar_core::nas::train_supernet(&mut net, &ds, &tc, None).unwrap();
    let configs: Vec<SubnetConfig> = (0..5).map(|i| sample_subnet_seeded(&space, 1000 + i)).collect();
    println!("ranking configs and accuracies:");
    let mut accs = Vec::new();
    for (i, c) in configs.iter().enumerate() {
        let a = net.subnet_accuracy(c, &ds, Split::Val).unwrap();
        println!("  cfg{i} {c:?} -> {a:.10}");
        accs.push((i, a));
    }
    accs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    let order: Vec<usize> = accs.iter().map(|(i, _)| *i).collect();
    println!("ranking order: {order:?}");
}
