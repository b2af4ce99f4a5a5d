use nsnquant_core::codebook::{kmeans_init, BitMode};
use nsnquant_core::dq::rtn4_group;
use nsnquant_core::hadamard::fwht;
use nsnquant_core::kvcache::{CacheConfig, KvCacheState};
use nsnquant_core::nsn::{nsn_forward, nsn_restore};
use nsnquant_core::tensor::sample_standard_normal;
use nsnquant_core::vq::{adjust_scale, ScaleStrategy};
use nsnquant_core::SeededRng;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fwht_is_orthonormal(log_d in 1u32..9, seed in any::<u64>()) {
        let d = 1usize << log_d;
        let mut rng = SeededRng::new(seed);
        let mut x = vec![0.0f32; d];
        rng.fill_normal(&mut x);
        let y = fwht(&x).unwrap();
        let (nx, ny): (f32, f32) = (x.iter().map(|v| v * v).sum(), y.iter().map(|v| v * v).sum());
        prop_assert!((nx - ny).abs() <= 1e-4 * nx.max(1.0));
        let z = fwht(&y).unwrap();
        for (a, b) in x.iter().zip(&z) {
            prop_assert!((a - b).abs() <= 1e-5 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn nsn_restores_any_chunk(n in 1usize..40, log_d in 3u32..8, seed in any::<u64>()) {
        let t = sample_standard_normal(&mut SeededRng::new(seed), n, 1 << log_d);
        let out = nsn_forward(&t).unwrap();
        let back = nsn_restore(&out.normalized, &out.byproducts).unwrap();
        for (a, b) in t.as_slice().iter().zip(back.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-4 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn parallel_preserving_projection_is_unit(seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let mut v = vec![0.0f32; 16];
        let mut noise = vec![0.0f32; 16];
        rng.fill_normal(&mut v);
        rng.fill_normal(&mut noise);
        let q: Vec<f32> = v.iter().zip(&noise).map(|(a, b)| 0.8 * a + 0.2 * b).collect();
        let f = adjust_scale(&v, &q, ScaleStrategy::ParallelPreserving).unwrap();
        let proj: f32 = v.iter().zip(&q).map(|(a, b)| a * b * f).sum::<f32>()
            / v.iter().map(|a| a * a).sum::<f32>();
        prop_assert!((proj - 1.0).abs() < 1e-4);
    }

    #[test]
    fn rtn4_error_within_half_step(values in prop::collection::vec(-1e3f32..1e3, 1..200), group in 1usize..64) {
        let q = rtn4_group(&values, group).unwrap();
        for (i, (a, b)) in values.iter().zip(q.dequantize()).enumerate() {
            let half = q.params()[i / group].scale / 2.0;
            prop_assert!((a - b).abs() <= half * (1.0 + 1e-5) + 1e-4);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn append_schedule_does_not_matter(cuts in prop::collection::vec(1usize..50, 1..20), seed in any::<u64>()) {
        let cb = kmeans_init(&mut SeededRng::new(1), BitMode::TwoBit, 4096, 3).unwrap();
        let cfg = CacheConfig { d: 32, residual_size: 16, ..CacheConfig::default() };
        let mut rng = SeededRng::new(seed);
        let total: usize = cuts.iter().sum();
        let k = sample_standard_normal(&mut rng, total, 32);
        let v = sample_standard_normal(&mut rng, total, 32);
        let mut whole = KvCacheState::new(cfg).unwrap();
        whole.append(&k, &v, &cb, &cb).unwrap();
        let mut parts = KvCacheState::new(cfg).unwrap();
        let mut at = 0;
        for c in cuts {
            parts.append(&k.slice_rows(at, at + c), &v.slice_rows(at, at + c), &cb, &cb).unwrap();
            at += c;
        }
        prop_assert_eq!(whole.n_quantized(), total / 16 * 16);
        prop_assert!(parts == whole);
    }
}
