use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use duet_bench::random_matrix;
use duet_core::features::synth_dataset;
use duet_core::gw::{entropic_gw, pairwise_l1, sinkhorn, GwConfig};
use duet_core::model::{Generator, ModelConfig, TrainConfig, Trainer};
use duet_core::{rng, Direction, Skeleton};

fn solvers(c: &mut Criterion) {
    let z = random_matrix(16, 32, 1);
    let k = pairwise_l1(&z).map(|v| (-v / 10.0).exp());
    c.bench_function("sinkhorn_16x16_30it", |b| b.iter(|| sinkhorn(&k, 30).unwrap()));

    let cfg = GwConfig::default();
    for m in [4, 16] {
        let x = random_matrix(m, 32, 2).map(|v| v / 32.0);
        let y = random_matrix(m, 32, 3).map(|v| v / 32.0);
        c.bench_function(&format!("entropic_gw_m{m}"), |b| b.iter(|| entropic_gw(&x, &y, &cfg).unwrap()));
    }
}

fn model(c: &mut Criterion) {
    let mut init = rng::seeded(0);
    let g = Generator::new(Direction::MusicToDance, ModelConfig::desk(), &mut init).unwrap();
    let x = random_matrix(75, 53, 4);
    c.bench_function("encode_desk_t75", |b| b.iter(|| g.encode(&x).unwrap()));

    let sk = Skeleton::canonical();
    let ds = synth_dataset(0, 1, 0, 75, 0.9);
    let dance = &ds.pairs[0].dance;
    c.bench_function("fk_75_frames", |b| {
        b.iter(|| (0..dance.len()).map(|t| sk.frame_positions(dance.frame(t)).unwrap()).count())
    });

    let ds = synth_dataset(1, 8, 0, 48, 0.9);
    let trainer = Trainer::new(TrainConfig::default(), ModelConfig::desk(), ModelConfig::desk(), &ds, 0).unwrap();
    c.bench_function("train_step_desk", |b| {
        b.iter_batched(|| trainer_clone(&trainer, &ds), |mut t| t.step().unwrap(), BatchSize::LargeInput)
    });
}

fn trainer_clone(t: &Trainer, ds: &duet_core::PairedDataset) -> Trainer {
    Trainer::with_generators(t.cfg.clone(), t.music_to_dance.clone(), t.dance_to_music.clone(), ds, 0).unwrap()
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = solvers, model
}
criterion_main!(benches);
