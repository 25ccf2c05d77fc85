use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slicer_core::cutsim::{loss_and_gradient, simulate_trace, ConstantSpeedDescent};
use slicer_core::rl::env::{EnvConfig, EnvItem, ItemModel, SlicingEnv, ACTION_DIM, FLAT_FEATURES, WRENCH_DIM};
use slicer_core::rl::replay::{PerConfig, PrioritizedReplay, Transition};
use slicer_core::rl::sac::{Batch, Sac, SacConfig};
use slicer_core::{CutScene, FoodSpec, SimParams};

fn food() -> FoodSpec {
    FoodSpec {
        name: "bench".into(),
        height: 0.04,
        slice_column_width: 0.005,
        spring_count: 16,
        anchor_y: 0.0,
    }
}

fn params() -> SimParams {
    SimParams::from_array([6000.0, 12.0, 7000.0, 25.0, 100.0, 0.5])
}

fn cutsim(c: &mut Criterion) {
    let descent = ConstantSpeedDescent {
        start: [0.0, 0.045],
        speed: 0.1,
        stop_z: -0.001,
    };
    let (dt, duration) = (2.5e-4, 0.5);
    let mut scene = CutScene::new(food(), params()).unwrap();
    let reference = simulate_trace(&mut scene, &descent, dt, duration).unwrap();
    let guess = SimParams::from_array([4000.0, 20.0, 5000.0, 30.0, 100.0, 0.6]);
    c.bench_function("cutsim loss+gradient, M=16, 2000 steps", |b| {
        b.iter(|| loss_and_gradient(&food(), &descent, &reference, &guess, dt, duration).unwrap())
    });
}

fn env_step(c: &mut Criterion) {
    let item = EnvItem {
        food: FoodSpec {
            spring_count: 4,
            ..food()
        },
        model: ItemModel::Cutsim { params: params() },
    };
    let mut env = SlicingEnv::new(EnvConfig::default(), vec![item]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    env.reset(&mut rng).unwrap();
    let action = [0.0; ACTION_DIM];
    c.bench_function("env step (one agent period)", |b| {
        b.iter(|| {
            if env.step(&action).unwrap().done {
                env.reset(&mut rng).unwrap();
            }
        })
    });
}

fn sac_update(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let config = SacConfig::default();
    let history_len = EnvConfig::default().history_len;
    let mut sac = Sac::new(config.clone(), WRENCH_DIM, history_len, FLAT_FEATURES, ACTION_DIM, &mut rng).unwrap();
    let mut buffer = PrioritizedReplay::new(PerConfig {
        capacity: 4096,
        ..PerConfig::default()
    })
    .unwrap();
    let hn = WRENCH_DIM * history_len;
    for _ in 0..1024 {
        let mut v = |n: usize| (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>();
        let t = Transition {
            history: v(hn),
            flat: v(FLAT_FEATURES),
            action: v(ACTION_DIM),
            reward: v(1)[0],
            next_history: v(hn),
            next_flat: v(FLAT_FEATURES),
            done: false,
        };
        buffer.push(t);
    }
    c.bench_function("sac update, batch 256", |b| {
        b.iter(|| {
            let sample = buffer.sample(config.batch_size, &mut rng).unwrap();
            let batch = Batch::from_replay(&buffer, &sample, WRENCH_DIM, history_len).unwrap();
            sac.update(&batch, &mut rng).unwrap()
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = cutsim, env_step, sac_update
}
criterion_main!(benches);
