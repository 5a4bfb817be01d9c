use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use viws_core::data::WeatherLabel;
use viws_core::train::{TrainConfig, TrainSample, Trainer};

#[test]
fn probe_step_time() {
    let cfg = TrainConfig::desk();
    let mut t: Trainer<f32> = Trainer::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mk = |rng: &mut ChaCha8Rng, w: WeatherLabel| TrainSample::<f32> {
        clip: Array4::from_shape_simple_fn((5, 64, 64, 3), || rng.gen_range(0.1f32..0.9)),
        target: Array3::from_shape_simple_fn((64, 64, 3), || rng.gen_range(0.1f32..0.9)),
        label: w,
        video_id: "probe".into(),
    };
    let batch: Vec<_> = WeatherLabel::ALL.iter().map(|&w| mk(&mut rng, w)).collect();
    let start = std::time::Instant::now();
    t.train_step(&batch).unwrap();
    println!("first desk step (batch 3, 64x64 T=5): {:?}", start.elapsed());
    let start = std::time::Instant::now();
    for _ in 0..3 {
        t.train_step(&batch).unwrap();
    }
    println!("steady desk step: {:?}", start.elapsed() / 3);

    let single = vec![mk(&mut rng, WeatherLabel::Rain)];
    let start = std::time::Instant::now();
    for _ in 0..3 {
        t.train_step(&single).unwrap();
    }
    println!("steady single-clip step: {:?}", start.elapsed() / 3);
}
