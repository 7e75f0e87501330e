//! The three costs that bound tracking throughput: one matcher forward,
//! one policy scoring pass over a full pool, and one whole tracked frame
//! (pool-size templates × 1 pass + 6 refinement passes).

use criterion::{criterion_group, criterion_main, Criterion};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use retrack_core::matching::{
    MatchingNet, PredictionMap, SearchPatch, TemplatePatch, MAP_SIDE, SEARCH_SIDE, TEMPLATE_SIDE,
};
use retrack_core::policy::PolicyNet;
use retrack_core::sim::{gen_synthetic_sequence, SyntheticSpec};
use retrack_core::tracker::{SelectionMode, Tracker, TrackerConfig};
use retrack_core::Tensor;
use std::hint::black_box;

fn uniform_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(0.05..0.95)).collect())
}

fn matcher_forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let net = MatchingNet::<f32>::new(&mut rng);
    let template =
        TemplatePatch::new(uniform_tensor(&[TEMPLATE_SIDE, TEMPLATE_SIDE, 3], &mut rng)).unwrap();
    let search = SearchPatch::new(
        uniform_tensor(&[SEARCH_SIDE, SEARCH_SIDE, 3], &mut rng),
        (60.0, 60.0),
        120.0,
    )
    .unwrap();
    c.bench_function("matcher_forward", |b| {
        b.iter(|| black_box(net.predict(black_box(&template), black_box(&search))))
    });
}

fn policy_scoring(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let policy = PolicyNet::<f32>::new(&mut rng);
    let maps: Vec<PredictionMap> = (0..4)
        .map(|i| {
            let mut vals = vec![0.1f32; MAP_SIDE * MAP_SIDE];
            vals[(7 + 5 * i) * MAP_SIDE + (9 + 3 * i)] = 0.9;
            PredictionMap::new(Tensor::from_vec(&[MAP_SIDE, MAP_SIDE], vals)).unwrap()
        })
        .collect();
    c.bench_function("policy_score_pool_of_4", |b| {
        b.iter(|| black_box(policy.score_templates(black_box(&maps)).unwrap()))
    });
}

fn tracked_frame(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let matcher = MatchingNet::<f32>::new(&mut rng);
    let policy = PolicyNet::<f32>::new(&mut rng);
    // 240x240 canvas, 40x40 target — long enough to fill the pool.
    let spec = SyntheticSpec { length: 160, ..SyntheticSpec::default() };
    let seq = gen_synthetic_sequence(&spec, 21).unwrap();
    let mut tracker = Tracker::new(
        &matcher,
        &policy,
        &seq.frames[0],
        seq.ground_truth[0],
        SelectionMode::PolicyGreedy,
        TrackerConfig::default(),
        0,
    )
    .unwrap();
    // Walk through three refresh intervals so the pool reaches its full
    // capacity and every benchmarked frame pays the steady-state N + 6
    // matcher passes.
    for f in &seq.frames[1..] {
        tracker.track_frame(f).unwrap();
    }
    assert_eq!(tracker.pool().len(), 4);
    c.bench_function("track_frame_240px_pool_4", |b| {
        b.iter(|| black_box(tracker.track_frame(black_box(&seq.frames[5])).unwrap()))
    });
}

criterion_group!(benches, matcher_forward, policy_scoring, tracked_frame);
criterion_main!(benches);
