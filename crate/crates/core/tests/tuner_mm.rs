use looptree_core::backend::TargetDescriptor;
use looptree_core::models;
use looptree_core::tuner::{per_step, tune};

#[test]
fn mm256_halves_memory_accesses_within_500_candidates() {
    let d = models::matmul(256, 256, 256);
    let r = tune(&d, &TargetDescriptor::avx512(), 500);
    assert!(r.leaderboard.len() <= 500);
    let naive = r.leaderboard[0].score().unwrap().0;
    let best = r.leaderboard.iter().filter_map(|c| c.score()).min().unwrap().0;
    println!("naive {naive} best {best} ratio {:.2} steps {:?}", naive as f64 / best as f64, per_step(&r.leaderboard));
    assert!(best * 2 <= naive);
    assert!(r.leaderboard.iter().all(|c| c.error.is_none()));
    assert!(r.leaderboard.iter().any(|c| c.verified));
}

