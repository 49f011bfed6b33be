use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use scmflow_core::hsic::hsic_test;

fn normal_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

// Brute-force permutation p on raw vectors.
fn perm_p(a: &[f64], b: &[f64], n_perm: usize, seed: u64) -> f64 {
    let observed = hsic_test(a, b).unwrap().statistic;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bp = b.to_vec();
    let mut ge = 0;
    for _ in 0..n_perm {
        for i in (1..bp.len()).rev() {
            let j = rng.random_range(0..=i);
            bp.swap(i, j);
        }
        if hsic_test(a, &bp).unwrap().statistic >= observed { ge += 1; }
    }
    (ge + 1) as f64 / (n_perm + 1) as f64
}

fn main() {
    for n in [200usize, 300, 500] {
        let mut worst = 0.0f64;
        let mut worst_case = 0;
        for case in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(3000 + case);
            let a = normal_vec(n, &mut rng);
            let b: Vec<f64> = if case % 2 == 0 {
                normal_vec(n, &mut rng)
            } else {
                a.iter().map(|x| { let e: f64 = StandardNormal.sample(&mut rng); 0.25*x*x + e }).collect()
            };
            let gp = hsic_test(&a, &b).unwrap().p_value;
            let pp = perm_p(&a, &b, 1000, 99 + case);
            let d = (gp - pp).abs();
            if d > worst { worst = d; worst_case = case; }
        }
        eprintln!("N={n}: worst |gamma - perm| = {worst:.4} (case {worst_case})");
    }
}
